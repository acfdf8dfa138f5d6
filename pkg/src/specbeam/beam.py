"""Trie-constrained beam search, deterministic and sampled."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import CallLedger, Distribution, ScoredBeam, logsumexp, rank_entries, sample_index

log = logging.getLogger(__name__)

Mode = Literal["deterministic", "sampled"]


class DeadEnd(RuntimeError):
    pass


class IdentifierTrie:
    """Prefix tree over the valid item identifiers."""

    def __init__(self, items):
        items = [tuple(int(t) for t in s) for s in items]
        if not items:
            raise ValueError("empty identifier set")
        lengths = {len(s) for s in items}
        if len(lengths) != 1:
            raise ValueError("identifiers must share one length")
        self.L = lengths.pop()
        kids: dict[tuple, set] = {}
        for s in items:
            for t in range(self.L):
                kids.setdefault(s[:t], set()).add(s[t])
        self._children = {p: np.array(sorted(c), dtype=int) for p, c in kids.items()}
        self.terminals = frozenset(items)
        self.item_index = {s: i for i, s in enumerate(items)}
        self._empty = np.array([], dtype=int)

    @property
    def node_count(self) -> int:
        """Distinct prefixes, the root included."""
        return len(self._children) + len(self.terminals)

    def children(self, prefix) -> np.ndarray:
        return self._children.get(tuple(prefix), self._empty)

    def is_prefix(self, prefix) -> bool:
        prefix = tuple(prefix)
        return prefix in self._children or prefix in self.terminals

    def prefixes(self, depth: int) -> list[tuple]:
        if depth == self.L:
            return sorted(self.terminals)
        return sorted(p for p in self._children if len(p) == depth)


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int
    mode: Mode = "deterministic"
    temperature: float = 1.0
    max_len: int = 4

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.mode not in ("deterministic", "sampled"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "sampled" and not self.temperature > 0:
            raise ValueError("sampled mode needs temperature > 0")


def _children_or_fail(trie, seq):
    ch = trie.children(seq)
    if len(ch) == 0:
        raise DeadEnd(f"prefix {seq} has no valid continuation")
    return ch


def constrained_step(model, beam: ScoredBeam, trie: IdentifierTrie) -> list[Distribution]:
    """Per-entry next-token distribution masked to the trie children."""
    out = []
    for seq, _ in beam:
        ch = _children_or_fail(trie, seq)
        probs = np.zeros(model.vocab_size)
        probs[ch] = model.masked(beam.context_id, seq, ch)
        mask = np.zeros(model.vocab_size, dtype=bool)
        mask[ch] = True
        out.append(Distribution(probs, mask))
    return out


def expand(model, entries, trie, context_id) -> list[tuple[tuple, float]]:
    """All one-token extensions with joint log-probabilities.

    Zero-probability children (greedy mode) are left out.
    """
    out = {}
    for seq, lp in entries:
        ch = _children_or_fail(trie, seq)
        with np.errstate(divide="ignore"):
            logp = np.log(model.masked(context_id, seq, ch))
        for c, l in zip(ch.tolist(), logp.tolist()):
            if l == -np.inf:
                continue
            s = seq + (c,)
            score = lp + l
            if s not in out or score > out[s]:
                out[s] = score
    return list(out.items())


def beam_step_det(model, beam: ScoredBeam, k: int, trie) -> ScoredBeam:
    cand = expand(model, beam.entries, trie, beam.context_id)
    return ScoredBeam(tuple(rank_entries(cand, k)), beam.step + 1, beam.context_id)


def expansion_distribution(cand: list[tuple[tuple, float]]) -> np.ndarray:
    """Joint scores of the candidates, normalized over the candidate set."""
    lps = np.array([lp for _, lp in cand], dtype=float)
    return np.exp(lps - logsumexp(lps))


def draw_without_replacement(probs: np.ndarray, k: int, rng) -> list[int]:
    """Sequential draw-and-remove; one uniform per draw."""
    w = np.array(probs, dtype=float)
    picked = []
    for _ in range(min(k, int(np.count_nonzero(w > 0)))):
        i = sample_index(w, rng.random())
        picked.append(i)
        w[i] = 0.0
    return picked


def beam_step_sampled(model, beam: ScoredBeam, k: int, trie, rng):
    """Draw k distinct expansions from the step's joint expansion distribution.

    Returns the new beam and each drawn sequence's first-draw proposal
    probability (its mass under the unconditioned expansion distribution).
    """
    cand = expand(model, beam.entries, trie, beam.context_id)
    probs = expansion_distribution(cand)
    picked = draw_without_replacement(probs, k, rng)
    if len(picked) < k:
        log.debug("short sampled beam: %d of %d", len(picked), k)
    new = ScoredBeam(tuple(cand[i] for i in picked), beam.step + 1, beam.context_id)
    proposal = {cand[i][0]: float(probs[i]) for i in picked}
    return new, proposal


def beam_search(model, context_id: int, cfg: BeamConfig, trie: IdentifierTrie, rng=None,
                ledger: CallLedger | None = None, role: str = "target",
                start: ScoredBeam | None = None) -> ScoredBeam:
    """Run beam steps from ``start`` (default: the empty sequence) to depth L."""
    if cfg.mode == "sampled" and rng is None:
        raise ValueError("sampled beam search needs an rng")
    if cfg.mode == "sampled" and cfg.temperature != getattr(model, "temperature", cfg.temperature):
        model = model.with_temperature(cfg.temperature)
    beam = start if start is not None else ScoredBeam.root(context_id)
    while beam.step < min(cfg.max_len, trie.L):
        if ledger is not None:
            ledger.record(role, nodes=len(beam))
        if cfg.mode == "deterministic":
            beam = beam_step_det(model, beam, cfg.beam_size, trie)
        else:
            beam, _ = beam_step_sampled(model, beam, cfg.beam_size, trie, rng)
    return beam
