"""Shared types: probability vectors, scored beams, call accounting and seeding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SUM_TOL = 1e-9

Token = int
TokenSeq = tuple  # tuple[int, ...]


class AllZero(ValueError):
    """Raised when a vector with no positive mass is normalized."""


@dataclass(frozen=True, eq=False)
class Distribution:
    probs: np.ndarray
    support_mask: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1:
            raise ValueError("probs must be a vector")
        if np.any(probs < 0):
            raise ValueError("negative probability")
        if self.support_mask is not None:
            mask = np.asarray(self.support_mask, dtype=bool)
            if mask.shape != probs.shape:
                raise ValueError("support_mask shape mismatch")
            if np.any(probs[~mask] != 0):
                raise ValueError("mass outside support_mask")
            object.__setattr__(self, "support_mask", mask)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return len(self.probs)

    def __getitem__(self, i):
        return float(self.probs[i])

    def is_normalized(self, tol: float = SUM_TOL) -> bool:
        return abs(float(self.probs.sum()) - 1.0) <= tol


def normalize(v, support_mask=None) -> Distribution:
    """Scale a non-negative vector to sum to one."""
    v = np.asarray(v, dtype=float)
    if support_mask is not None:
        v = np.where(np.asarray(support_mask, dtype=bool), v, 0.0)
    if np.any(v < 0):
        raise ValueError("normalize expects non-negative entries")
    total = float(v.sum())
    if total <= 0.0:
        raise AllZero("cannot normalize a vector with zero total mass")
    return Distribution(v / total, support_mask)


def top_k(d: Distribution, k: int) -> list[tuple[Token, float]]:
    """k most probable tokens with positive mass; ties go to the lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    p = d.probs
    ok = p > 0
    if d.support_mask is not None:
        ok &= d.support_mask
    ids = np.flatnonzero(ok)
    # stable sort on -p keeps ascending id order among ties
    order = ids[np.argsort(-p[ids], kind="stable")]
    return [(int(i), float(p[i])) for i in order[:k]]


def sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF lookup for a single uniform draw ``u`` in [0, 1)."""
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    if i >= len(probs):
        # u * total rounded up to the total
        i = int(np.flatnonzero(probs > 0)[-1])
    return i


def sample(d: Distribution, rng: np.random.Generator) -> Token:
    """Draw one token; consumes exactly one uniform from ``rng``."""
    return sample_index(d.probs, rng.random())


def tvd(p: Distribution, q: Distribution) -> float:
    pp = p.probs if isinstance(p, Distribution) else np.asarray(p, dtype=float)
    qq = q.probs if isinstance(q, Distribution) else np.asarray(q, dtype=float)
    if pp.shape != qq.shape:
        raise ValueError("distributions over different vocabularies")
    return float(min(1.0, 0.5 * np.abs(pp - qq).sum()))


def logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    if m == -math.inf:
        return -math.inf
    return m + math.log(float(np.exp(x - m).sum()))


# ---------------------------------------------------------------- beams

def _beam_key(entry):
    seq, lp = entry
    return (-lp, seq)


@dataclass(frozen=True)
class ScoredBeam:
    """Equal-length token sequences with joint log-probabilities.

    Entries are kept sorted by logprob descending, then lexicographically.
    """

    entries: tuple
    step: int
    context_id: int = 0

    def __post_init__(self):
        entries = tuple((tuple(int(t) for t in s), float(lp)) for s, lp in self.entries)
        seqs = [s for s, _ in entries]
        if len(set(seqs)) != len(seqs):
            raise ValueError("duplicate sequences in beam")
        if any(len(s) != self.step for s in seqs):
            raise ValueError("beam entries must all have length == step")
        object.__setattr__(self, "entries", tuple(sorted(entries, key=_beam_key)))

    @classmethod
    def root(cls, context_id: int = 0) -> "ScoredBeam":
        return cls((((), 0.0),), 0, context_id)

    @property
    def seqs(self) -> list[tuple]:
        return [s for s, _ in self.entries]

    @property
    def logprobs(self) -> list[float]:
        return [lp for _, lp in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def rank_entries(entries: Iterable[tuple[tuple, float]], k: int | None = None) -> list:
    ranked = sorted(entries, key=_beam_key)
    return ranked if k is None else ranked[:k]


# ---------------------------------------------------------------- ledger

@dataclass
class CallLedger:
    target_calls: int = 0
    draft_calls: int = 0
    target_node_evals: int = 0
    draft_node_evals: int = 0

    def record(self, role: str, nodes: int, calls: int = 1) -> None:
        if nodes < 0 or calls < 0:
            raise ValueError("ledger counters only grow")
        if role == "target":
            self.target_calls += calls
            self.target_node_evals += nodes
        elif role == "draft":
            self.draft_calls += calls
            self.draft_node_evals += nodes
        else:
            raise ValueError(f"unknown role {role!r}")

    def merge(self, other: "CallLedger") -> "CallLedger":
        return CallLedger(
            self.target_calls + other.target_calls,
            self.draft_calls + other.draft_calls,
            self.target_node_evals + other.target_node_evals,
            self.draft_node_evals + other.draft_node_evals,
        )

    def as_dict(self) -> dict:
        return {
            "target_calls": self.target_calls,
            "draft_calls": self.draft_calls,
            "target_node_evals": self.target_node_evals,
            "draft_node_evals": self.draft_node_evals,
        }


# ---------------------------------------------------------------- randomness

def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """PCG64 stream; the same seed gives the same draws on every platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def fork(rng: np.random.Generator) -> np.random.Generator:
    """Child stream derived from (and advancing) the parent."""
    return make_rng(int(rng.integers(0, 2**63 - 1)))


def stream_for(seed: int, *path: int) -> np.random.Generator:
    """Independent stream keyed by ``(seed, *path)``; order-independent across workers."""
    return make_rng([int(seed) & (2**64 - 1), *[int(p) for p in path]])
