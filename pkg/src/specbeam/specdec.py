"""Speculative decoding for top-K beam search.

One SD step drafts ``gamma`` beam-search steps with the cheap model, then the
target scores every drafted prefix in a single tree-batched call and checks
the drafted beams step by step:

* strict: step j is accepted iff the target's top-K beam at that depth is a
  subset of the drafted top-N beam. The output is always the target's own
  beam, so the final list equals plain target beam search.
* relaxed: each of the K sampled sequences is accepted with probability
  min(1, p/q); on the first step with a rejection the missing sequences are
  resampled from norm(max(0, p - q)).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .beam import BeamConfig, beam_search, beam_step_det, draw_without_replacement, expand, expansion_distribution
from .core import CallLedger, ScoredBeam, rank_entries

log = logging.getLogger(__name__)

Verification = Literal["strict", "relaxed"]


class ResidualAllZero(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SDConfig:
    gamma: int = 4
    N: int = 40
    K: int = 10
    verification: Verification = "strict"
    draft_mode: str | None = None  # derived from verification when None
    cost_ratio: float = 0.01
    temperature: float = 1.0
    alg2_literal: bool = False

    def __post_init__(self):
        if not 1 <= self.K <= self.N:
            raise ValueError("need 1 <= K <= N")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.verification not in ("strict", "relaxed"):
            raise ValueError(f"unknown verification {self.verification!r}")
        if self.draft_mode is None:
            object.__setattr__(self, "draft_mode",
                               "deterministic" if self.verification == "strict" else "sampled")
        if not 0 <= self.cost_ratio <= 1:
            raise ValueError("cost_ratio must lie in [0, 1]")


@dataclass
class DraftBundle:
    origin_beam: ScoredBeam
    beams_per_step: list[ScoredBeam]
    # sampled mode: full first-draw expansion distribution per step, seq -> q
    proposal_probs: list[dict] = field(default_factory=list)

    @property
    def sequences(self) -> list[tuple]:
        return [s for b in self.beams_per_step for s in b.seqs]


# ---------------------------------------------------------------- tree batching

@dataclass
class FlatTree:
    """Drafted sequences merged into one prefix tree below the origin beam.

    Node ``i`` carries ``token[i]`` and ``parent[i]`` (-1 for children of an
    origin entry, whose index is in ``root_of``). Every distinct prefix is one
    node, which is what the verifier pays for.
    """

    origin_len: int
    token: list[int] = field(default_factory=list)
    parent: list[int] = field(default_factory=list)
    root_of: list[tuple] = field(default_factory=list)
    node_of: dict = field(default_factory=dict)  # absolute prefix -> node id
    leaf_of: dict = field(default_factory=dict)  # drafted sequence -> node id
    naive_count: int = 0

    @property
    def node_count(self) -> int:
        return len(self.token)

    @property
    def savings(self) -> int:
        return self.naive_count - self.node_count

    def add(self, seq: tuple) -> int:
        seq = tuple(seq)
        if len(seq) <= self.origin_len:
            raise ValueError("drafted sequence must extend the origin")
        root = seq[: self.origin_len]
        self.naive_count += len(seq) - self.origin_len
        parent = -1
        for t in range(self.origin_len + 1, len(seq) + 1):
            pre = seq[:t]
            node = self.node_of.get(pre)
            if node is None:
                node = len(self.token)
                self.node_of[pre] = node
                self.token.append(seq[t - 1])
                self.parent.append(parent)
                self.root_of.append(root)
            parent = node
        self.leaf_of[seq] = parent
        return parent

    def reconstruct(self, node: int) -> tuple:
        toks = []
        root = self.root_of[node]
        while node != -1:
            toks.append(self.token[node])
            node = self.parent[node]
        return root + tuple(reversed(toks))

    def prefixes(self) -> list[tuple]:
        return list(self.node_of)


def flatten_sequences(seqs, origin_len: int) -> FlatTree:
    tree = FlatTree(origin_len)
    for s in seqs:
        tree.add(s)
    return tree


def flatten(bundle: DraftBundle, steps: int | None = None) -> FlatTree:
    """Prefix tree over the drafted beams (the first ``steps`` of them)."""
    beams = bundle.beams_per_step if steps is None else bundle.beams_per_step[:steps]
    return flatten_sequences([s for b in beams for s in b.seqs], bundle.origin_beam.step)


class _TargetPass:
    """Target conditionals for exactly the nodes of one batched verify call."""

    def __init__(self, model, nodes):
        self.model = model
        self.nodes = set(nodes)
        self.vocab_size = model.vocab_size
        self.temperature = model.temperature

    def masked(self, context_id, prefix, children):
        if tuple(prefix) not in self.nodes:
            raise RuntimeError(f"verification needs {prefix}, which the batched call did not score")
        return self.model.masked(context_id, prefix, children)


def _verify_pass(target, bundle: DraftBundle, bonus: bool, ledger: CallLedger | None):
    steps = len(bundle.beams_per_step)
    scored = steps if bonus else steps - 1
    tree = flatten(bundle, scored)
    nodes = bundle.origin_beam.seqs + tree.prefixes()
    if ledger is not None:
        ledger.record("target", nodes=len(bundle.origin_beam) + tree.node_count)
    return _TargetPass(target, nodes)


# ---------------------------------------------------------------- drafting

def draft(draft_model, origin: ScoredBeam, cfg: SDConfig, trie, steps: int | None = None, rng=None,
          ledger: CallLedger | None = None) -> DraftBundle:
    """Run ``steps`` (default gamma) draft beam steps from the origin beam.

    Draft scores start from the origin's (target) log-probabilities and then
    accumulate draft conditionals.
    """
    steps = cfg.gamma if steps is None else steps
    if origin.step + steps > trie.L:
        raise ValueError("draft would run past identifier length")
    model = draft_model
    if cfg.draft_mode == "sampled":
        if rng is None:
            raise ValueError("sampled drafting needs an rng")
        if model.temperature != cfg.temperature:
            model = model.with_temperature(cfg.temperature)
    beam = origin
    beams, proposals = [], []
    for _ in range(steps):
        if ledger is not None:
            ledger.record("draft", nodes=len(beam))
        if cfg.draft_mode == "deterministic":
            beam = beam_step_det(model, beam, cfg.N, trie)
        else:
            cand = expand(model, beam.entries, trie, beam.context_id)
            probs = expansion_distribution(cand)
            picked = draw_without_replacement(probs, cfg.K, rng)
            beam = ScoredBeam(tuple(cand[i] for i in picked), beam.step + 1, beam.context_id)
            proposals.append({s: float(p) for (s, _), p in zip(cand, probs)})
        beams.append(beam)
    return DraftBundle(origin, beams, proposals)


# ---------------------------------------------------------------- verification

def verify_strict(target_model, bundle: DraftBundle, cfg: SDConfig, trie, bonus: bool = True,
                  ledger: CallLedger | None = None):
    """Returns (accepted_steps, output_beam, verdicts)."""
    tp = _verify_pass(target_model, bundle, bonus, ledger)
    working = bundle.origin_beam
    verdicts = []
    for drafted in bundle.beams_per_step:
        cand = expand(tp, working.entries, trie, working.context_id)
        ideal = ScoredBeam(tuple(rank_entries(cand, cfg.K)), working.step + 1, working.context_id)
        ok = set(ideal.seqs) <= set(drafted.seqs)
        verdicts.append(ok)
        working = ideal
        if not ok:
            return len(verdicts) - 1, working, verdicts
    if bonus:
        cand = expand(tp, working.entries, trie, working.context_id)
        working = ScoredBeam(tuple(rank_entries(cand, cfg.K)), working.step + 1, working.context_id)
    return len(verdicts), working, verdicts


def accept_prob(p, q):
    """min(1, p/q), elementwise; q = 0 counts as certain acceptance."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    ratio = np.divide(p, q, out=np.ones_like(p), where=q > 0)
    return np.minimum(1.0, ratio)


def accepts(p, q, r):
    """The verification test: uniform ``r`` passes iff r <= min(1, p/q) (ties accept)."""
    return np.asarray(r) <= accept_prob(p, q)


def relaxed_step(p: np.ndarray, q: np.ndarray, drafted: list[int], K: int, rng):
    """Verify one sampled step over a shared candidate set.

    ``p``/``q`` are target/draft step-expansion distributions over the same
    candidates and ``drafted`` the indices the draft sampled. Returns
    ``(step_accepted, chosen_indices)``.
    """
    kept = []
    for i in drafted:
        if accepts(p[i], q[i], rng.random()):
            kept.append(i)
    if len(kept) == len(drafted):
        return True, kept
    return False, kept + _resample(p, q, kept, K - len(kept), rng)


def _resample(p, q, kept, B, rng):
    residual = np.maximum(0.0, p - q)
    residual[kept] = 0.0
    out = draw_without_replacement(residual, B, rng)
    if len(out) < B:
        # residual support ran out; fall back to p over what is still free
        log.info("residual distribution exhausted (%d of %d); sampling rest from p", len(out), B)
        rest = np.array(p, dtype=float)
        rest[kept + out] = 0.0
        out += draw_without_replacement(rest, B - len(out), rng)
    return out


def _relaxed_literal(p, q, drafted, K, rng, out_cum):
    """Cumulative reading: accepted sequences pile up across steps and are subsampled to K."""
    for i in drafted:
        if accepts(p[i], q[i], rng.random()):
            out_cum.append(("cur", i))
    here = [i for tag, i in out_cum if tag == "cur"]
    if len(out_cum) > K:
        pick = draw_without_replacement(np.ones(len(out_cum)), K, rng)
        kept = [out_cum[j] for j in sorted(pick)]
        out_cum[:] = [("old", i) for _, i in kept]
        return True, [i for tag, i in kept if tag == "cur"]
    chosen = here + _resample(p, q, here, K - len(here), rng)
    return False, chosen


def verify_relaxed(target_model, bundle: DraftBundle, cfg: SDConfig, trie, rng, bonus: bool = True,
                   ledger: CallLedger | None = None):
    """Returns (accepted_steps, output_beam, verdicts)."""
    target = target_model if target_model.temperature == cfg.temperature else \
        target_model.with_temperature(cfg.temperature)
    tp = _verify_pass(target, bundle, bonus, ledger)
    working = bundle.origin_beam
    verdicts = []
    cumulative: list = []
    for drafted, proposal in zip(bundle.beams_per_step, bundle.proposal_probs):
        cand = expand(tp, working.entries, trie, working.context_id)
        seqs = [s for s, _ in cand]
        p = expansion_distribution(cand)
        q = np.array([proposal.get(s, 0.0) for s in seqs])
        pos = {s: i for i, s in enumerate(seqs)}
        # drafted sequences outside the working beam's expansions have p = 0
        idx = [pos[s] for s in drafted.seqs if s in pos]
        if len(idx) < len(drafted):
            extra = [s for s in drafted.seqs if s not in pos]
            seqs += extra
            cand += [(s, -math.inf) for s in extra]
            p = np.concatenate([p, np.zeros(len(extra))])
            q = np.concatenate([q, [proposal[s] for s in extra]])
            idx = [seqs.index(s) for s in drafted.seqs]
        if cfg.alg2_literal:
            for j, (tag, i) in enumerate(cumulative):
                cumulative[j] = ("old", i)
            ok, chosen = _relaxed_literal(p, q, idx, cfg.K, rng, cumulative)
        else:
            ok, chosen = relaxed_step(p, q, idx, cfg.K, rng)
        verdicts.append(ok)
        working = ScoredBeam(tuple(cand[i] for i in chosen), working.step + 1, working.context_id)
        if not ok:
            return len(verdicts) - 1, working, verdicts
    if bonus:
        cand = expand(tp, working.entries, trie, working.context_id)
        picked = draw_without_replacement(expansion_distribution(cand), cfg.K, rng)
        working = ScoredBeam(tuple(cand[i] for i in picked), working.step + 1, working.context_id)
    return len(verdicts), working, verdicts


# ---------------------------------------------------------------- outer loop

@dataclass
class SDTrace:
    steps: list[dict]
    ledger: CallLedger
    final_topK: ScoredBeam

    @property
    def accepted_steps(self) -> list[int]:
        return [s["accepted_steps"] for s in self.steps]

    def summary(self, user, cfg: SDConfig) -> dict:
        return {
            "user": user,
            "K": cfg.K,
            "N": cfg.N,
            "gamma": cfg.gamma,
            "verification": cfg.verification,
            "accepted_steps": self.accepted_steps,
            **self.ledger.as_dict(),
            "topK": [list(s) for s in self.final_topK.seqs],
        }


def sd_decode(target, draft_model, context_id: int, cfg: SDConfig, trie, rng=None) -> SDTrace:
    if cfg.verification == "relaxed" and rng is None:
        raise ValueError("relaxed verification needs an rng")
    ledger = CallLedger()
    beam = ScoredBeam.root(context_id)
    steps = []
    while beam.step < trie.L:
        remaining = trie.L - beam.step
        n = min(cfg.gamma, remaining)
        bonus = remaining > cfg.gamma
        bundle = draft(draft_model, beam, cfg, trie, steps=n, rng=rng, ledger=ledger)
        if cfg.verification == "strict":
            acc, beam, verdicts = verify_strict(target, bundle, cfg, trie, bonus, ledger)
        else:
            acc, beam, verdicts = verify_relaxed(target, bundle, cfg, trie, rng, bonus, ledger)
        steps.append({"accepted_steps": acc, "verdicts": verdicts, "output_beam": beam})
    return SDTrace(steps, ledger, beam)


def baseline_decode(target, context_id: int, cfg: SDConfig, trie, rng=None):
    """Target-only beam search under the same config; returns (beam, ledger)."""
    ledger = CallLedger()
    if cfg.verification == "strict":
        bcfg = BeamConfig(cfg.K, "deterministic", max_len=trie.L)
    else:
        bcfg = BeamConfig(cfg.K, "sampled", cfg.temperature, max_len=trie.L)
    beam = beam_search(target, context_id, bcfg, trie, rng=rng, ledger=ledger)
    return beam, ledger


def simulated_time(ledger: CallLedger, cost_ratio: float, call_cost: float = 0.0) -> float:
    """Node-eval walltime proxy; ``call_cost`` adds a fixed price per sequential call."""
    return (ledger.target_node_evals + cost_ratio * ledger.draft_node_evals
            + call_cost * (ledger.target_calls + cost_ratio * ledger.draft_calls))
