"""Draft alignment: recommendation NLL, constrained RKLD + density loss, truncated TVD loss.

All losses work on *position groups*: one group per distinct (context, prefix)
visited by the training sequences, carrying the draft row it reads, the trie
children mask and a weight. Gradients are returned with the shape of the
draft's logits table.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .beam import beam_step_det
from .core import ScoredBeam

log = logging.getLogger(__name__)

EPS = 1e-12
VARIANTS = ("sft", "s", "r")


class DegenerateK(RuntimeWarning):
    pass


@dataclass(frozen=True)
class AlignConfig:
    alpha: float = 0.5
    lambda_mix: float = 0.5
    K_align: int = 10
    lr: float = 50.0
    epochs: int = 40
    variant: str = "s"
    density_sign: int = 1
    momentum: float = 0.0
    multi_step: bool = False

    def __post_init__(self):
        v = self.variant.lower().replace("atspeed-", "")
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0 <= self.alpha <= 1 or not 0 <= self.lambda_mix <= 1:
            raise ValueError("alpha and lambda_mix must lie in [0, 1]")
        if self.density_sign not in (1, -1):
            raise ValueError("density_sign is +1 or -1")
        if self.K_align < 1:
            raise ValueError("K_align must be >= 1")
        # sft and alpha = 0 are the same run
        if v == "sft" or self.alpha == 0:
            v, alpha = "sft", 0.0
        else:
            alpha = self.alpha
        object.__setattr__(self, "variant", v)
        object.__setattr__(self, "alpha", float(alpha))


# ---------------------------------------------------------------- positions

@dataclass
class Positions:
    cids: list
    prefixes: list
    rows: np.ndarray  # (G,) draft table rows
    mask: np.ndarray  # (G, V) trie children
    weight: np.ndarray  # (G,) number of visits
    counts: np.ndarray  # (G, V) next-token counts

    def __len__(self):
        return len(self.rows)

    @property
    def total(self) -> float:
        return float(self.weight.sum())


def compile_positions(model, trie, seqs) -> Positions:
    """Group every (context, prefix) visited by ``seqs`` = [(cid, tokens), ...]."""
    V = model.vocab_size
    slot: dict = {}
    cids, prefixes, weight, counts = [], [], [], []
    for cid, y in seqs:
        y = tuple(y)
        for t in range(len(y)):
            k = (int(cid), y[:t])
            g = slot.get(k)
            if g is None:
                g = slot[k] = len(cids)
                cids.append(k[0])
                prefixes.append(k[1])
                weight.append(0.0)
                counts.append({})
            weight[g] += 1.0
            counts[g][y[t]] = counts[g].get(y[t], 0.0) + 1.0
    G = len(cids)
    rows = model.ensure_rows([model.key(c, p) for c, p in zip(cids, prefixes)])
    mask = np.zeros((G, V), dtype=bool)
    cnt = np.zeros((G, V))
    for g in range(G):
        mask[g, trie.children(prefixes[g])] = True
        for tok, c in counts[g].items():
            cnt[g, tok] = c
    if np.any(cnt[~mask]):
        raise ValueError("training sequence leaves the identifier trie")
    return Positions(cids, prefixes, rows, mask, np.array(weight), cnt)


def masked_softmax(Z: np.ndarray, mask: np.ndarray, T: float = 1.0) -> np.ndarray:
    z = np.where(mask, Z / T, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def target_probs(target, pos: Positions) -> np.ndarray:
    P = np.zeros(pos.mask.shape)
    for g, (c, pre) in enumerate(zip(pos.cids, pos.prefixes)):
        ch = np.flatnonzero(pos.mask[g])
        P[g, ch] = target.masked(c, pre, ch)
    return P


def constrained_topk_mask(Q: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k of ``Q`` among ``mask`` entries; ties go to the lower id."""
    score = np.where(mask, Q, -1.0)
    order = np.argsort(-score, axis=1, kind="stable")
    out = np.zeros_like(mask)
    take = order[:, :k]
    np.put_along_axis(out, take, True, axis=1)
    return out & mask


def constrained_topk_vocab(q, children, k: int) -> list[int]:
    """The k most likely trie-valid tokens under ``q``."""
    q = np.asarray(getattr(q, "probs", q), dtype=float)
    mask = np.zeros(len(q), dtype=bool)
    mask[np.asarray(list(children), dtype=int)] = True
    return np.flatnonzero(constrained_topk_mask(q[None], mask[None], k)[0]).tolist()


# ---------------------------------------------------------------- per-position terms

def align_s_terms(Q, P, vc, pK, sign: int = 1):
    """Constrained RKLD minus (sign=+1) the density term, per row.

    Returns (f, dF/dQ) with rows of shape (G,); positions where q <= EPS are
    dropped. With sign=+1 the two terms collapse to sum q (log pK - log p).
    """
    keep = vc & (Q > EPS)
    logq = np.log(np.where(keep, Q, 1.0))
    logp = np.log(np.maximum(P, EPS))
    logk = np.log(np.maximum(pK, EPS))[:, None]
    a = (1 - sign) * logq - logp + sign * logk
    f = np.where(keep, Q * a, 0.0).sum(axis=1)
    g = np.where(keep, a + (1 - sign), 0.0)
    return f, g


def truncated(D, vc):
    Dm = np.where(vc, D, 0.0)
    s = Dm.sum(axis=1, keepdims=True)
    return np.divide(Dm, s, out=np.zeros_like(Dm), where=s > 0)


def align_r_terms(Q, P, vc):
    """tvd of the V_c-renormalized pair, and its subgradient w.r.t. q'."""
    q2, p2 = truncated(Q, vc), truncated(P, vc)
    f = 1.0 - np.minimum(p2, q2).sum(axis=1)
    g = np.where(vc & (q2 < p2), -1.0, 0.0)
    return f, g, q2


# ---------------------------------------------------------------- losses

def _scatter(shape, rows, dZ):
    grad = np.zeros(shape)
    np.add.at(grad, rows, dZ)
    return grad


def rec_terms(table, pos: Positions, T: float = 1.0):
    Q = masked_softmax(table[pos.rows], pos.mask, T)
    n = pos.total
    with np.errstate(divide="ignore"):
        nll = -(pos.counts * np.log(np.where(pos.counts > 0, Q, 1.0))).sum()
    dZ = (pos.weight[:, None] * Q - pos.counts) / (T * n)
    return float(nll / n), _scatter(table.shape, pos.rows, dZ)


def align_terms(table, pos: Positions, P, pK, variant: str, K: int, sign: int = 1, T: float = 1.0):
    Q = masked_softmax(table[pos.rows], pos.mask, T)
    vc = constrained_topk_mask(Q, pos.mask, K)
    w = pos.weight / pos.total
    if variant == "s":
        f, g = align_s_terms(Q, P, vc, pK, sign)
        D = Q
    elif variant == "r":
        f, g, D = align_r_terms(Q, P, vc)
    else:
        raise ValueError(f"no alignment term for variant {variant!r}")
    # softmax backprop restricted to V_c (g is zero outside it)
    dZ = D * (g - (D * g).sum(axis=1, keepdims=True)) / T
    return float(w @ f), _scatter(table.shape, pos.rows, w[:, None] * dZ)


def rec_loss(model, pairs, trie):
    """Mean next-token NLL of ``pairs`` = [(cid, identifier), ...] and its gradient."""
    pos = compile_positions(model, trie, pairs)
    return rec_terms(model.table, pos, model.temperature)


def kth_target_probs(target, trie, cid: int, K: int) -> list[float]:
    """Per depth t, the step-t conditional of the K-th entry of the target's beam."""
    beam = ScoredBeam.root(cid)
    out = []
    for _ in range(trie.L):
        prev = dict(beam.entries)
        beam = beam_step_det(target, beam, K, trie)
        if len(beam) < K:
            log.debug("fewer than %d expansions at depth %d for context %d", K, beam.step, cid)
        seq, lp = beam.entries[min(K, len(beam)) - 1]
        out.append(float(np.exp(lp - prev[seq[:-1]])))
    return out


def _pk_column(target, trie, pos: Positions, K: int, cache: dict | None = None) -> np.ndarray:
    cache = {} if cache is None else cache
    out = np.empty(len(pos))
    for g, (c, pre) in enumerate(zip(pos.cids, pos.prefixes)):
        if c not in cache:
            cache[c] = kth_target_probs(target, trie, c, K)
        out[g] = cache[c][len(pre)]
    return out


def _align_inputs(draft, target, seqs, trie, cfg):
    pos = compile_positions(draft, trie, seqs)
    return pos, target_probs(target, pos), _pk_column(target, trie, pos, cfg.K_align)


def align_s_loss(draft, target, dataset, trie, cfg: AlignConfig):
    pos, P, pK = _align_inputs(draft, target, dataset.pairs(), trie, cfg)
    return align_terms(draft.table, pos, P, pK, "s", cfg.K_align, cfg.density_sign, draft.temperature)


def align_r_loss(draft, target, dataset, trie, cfg: AlignConfig):
    pos, P, pK = _align_inputs(draft, target, dataset.pairs(), trie, cfg)
    return align_terms(draft.table, pos, P, pK, "r", cfg.K_align, T=draft.temperature)


# ---------------------------------------------------------------- dataset

@dataclass
class MixtureModel:
    """Per-step mixture (1 - lam) q + lam p of trie-masked conditionals."""

    draft: object
    target: object
    lam: float

    @property
    def vocab_size(self):
        return self.target.vocab_size

    @property
    def temperature(self):
        return self.target.temperature

    def masked(self, context_id, prefix, children):
        q = self.draft.masked(context_id, prefix, children)
        p = self.target.masked(context_id, prefix, children)
        return (1.0 - self.lam) * q + self.lam * p


@dataclass
class AlignDataset:
    records: list = field(default_factory=list)  # {"x": {...}, "y": [...], "source": ...}

    def __len__(self):
        return len(self.records)

    def pairs(self) -> list[tuple[int, tuple]]:
        return [(r["x"]["context"], tuple(r["y"])) for r in self.records]

    def save(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")

    @classmethod
    def load(cls, path) -> "AlignDataset":
        with open(path) as f:
            return cls([json.loads(line) for line in f if line.strip()])


def _beams_by_depth(model, cid, K, trie):
    beam, out = ScoredBeam.root(cid), []
    for _ in range(trie.L):
        beam = beam_step_det(model, beam, K, trie)
        out.append(beam)
    return out


def build_dataset(draft, target, world, cfg: AlignConfig, users=None, rng=None) -> AlignDataset:
    """Sequences to align on, one block per training user.

    Variant ``s`` decodes with the draft/target mixture, ``r`` takes the
    target's own top beams. Beam search here is deterministic, so ``rng`` is
    accepted only for interface symmetry.
    """
    trie = world.trie()
    if users is None:
        users = world.split()[0]
    if cfg.variant == "r":
        model, source = target, "target_topk"
    else:
        model, source = MixtureModel(draft, target, cfg.lambda_mix), "mixed"
    cache: dict = {}
    records = []
    for u in users:
        cid = world.context_of(u)
        if cid not in cache:
            beams = _beams_by_depth(model, cid, cfg.K_align, trie)
            cache[cid] = beams if cfg.multi_step else beams[-1:]
        for b in cache[cid]:
            for s in b.seqs:
                records.append({"x": {"user": int(u), "context": cid}, "y": list(s), "source": source})
    return AlignDataset(records)


# ---------------------------------------------------------------- training

def item_pairs(world, users=None) -> list[tuple[int, tuple]]:
    """(context item, next identifier) pairs for the recommendation loss."""
    return [(a, world.items[b]) for a, b in world.rec_pairs(users)]


def gradient_descent(model, objective, epochs: int, lr: float, momentum: float = 0.0):
    """Plain (optionally heavy-ball) descent on ``model.table``; returns per-epoch losses.

    ``objective(table)`` returns (dict of losses with a "total_loss" key, grad).
    """
    curve = []
    vel = np.zeros_like(model.table)
    for epoch in range(epochs):
        losses, grad = objective(model.table)
        curve.append({"epoch": epoch, **losses})
        vel = momentum * vel - lr * grad
        model.table += vel
    losses, _ = objective(model.table)
    curve.append({"epoch": epochs, **losses})
    return curve


def train_draft(draft_init, target, world, cfg: AlignConfig, dataset: AlignDataset | None = None,
                train_users=None):
    """Descend alpha * align + (1 - alpha) * rec from a copy of ``draft_init``.

    Returns (draft, curve, dataset).
    """
    trie = world.trie()
    model = draft_init.copy()
    T = model.temperature
    rec_pos = compile_positions(model, trie, item_pairs(world, train_users))
    align_args = None
    if cfg.variant != "sft":
        if dataset is None:
            dataset = build_dataset(model, target, world, cfg, train_users)
        pos, P, pK = _align_inputs(model, target, dataset.pairs(), trie, cfg)
        align_args = (pos, P, pK)
    a = cfg.alpha

    def objective(table):
        rec, g = rec_terms(table, rec_pos, T)
        if align_args is None:
            return {"rec_loss": rec, "align_loss": 0.0, "total_loss": rec}, g
        al, ga = align_terms(table, *align_args, cfg.variant, cfg.K_align, cfg.density_sign, T)
        return ({"rec_loss": rec, "align_loss": al, "total_loss": a * al + (1 - a) * rec},
                a * ga + (1 - a) * g)

    curve = gradient_descent(model, objective, cfg.epochs, cfg.lr, cfg.momentum)
    return model, curve, dataset


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "rec_loss", "align_loss", "total_loss"])
        w.writeheader()
        for row in curve:
            w.writerow({k: row.get(k, 0.0) for k in w.fieldnames})


def mean_step_tvd(draft, target, world, users, K: int) -> float:
    """Mean truncated tvd over the target's top-K prefixes for ``users``."""
    trie = world.trie()
    seqs = []
    for u in users:
        cid = world.context_of(u)
        seqs += [(cid, s) for s in _beams_by_depth(target, cid, K, trie)[-1].seqs]
    probe = draft.copy()
    pos = compile_positions(probe, trie, seqs)
    Q = masked_softmax(probe.table[pos.rows], pos.mask, probe.temperature)
    vc = constrained_topk_mask(Q, pos.mask, K)
    f, _, _ = align_r_terms(Q, target_probs(target, pos), vc)
    return float(pos.weight @ f / pos.total)


def with_variant(cfg: AlignConfig, variant: str, alpha: float | None = None) -> AlignConfig:
    return replace(cfg, variant=variant, alpha=cfg.alpha if alpha is None else alpha)


def train_draft_recipe(world, target, cfg: AlignConfig, warm_epochs: int = 30, context_window: int | None = 1,
                       context_buckets: int | None = None, train_users=None):
    """Fresh draft: ``warm_epochs`` of SFT, then ``cfg.epochs`` of ``cfg.variant``.

    Every variant shares the warm start, so SFT, S and R differ only in the
    second stage. Returns (draft, curve, dataset).
    """
    from .toymodel import TabularModel

    init = TabularModel(world.vocab_size, world.L, context_window=context_window,
                        context_buckets=context_buckets)
    warm_cfg = replace(cfg, variant="sft", alpha=0.0, epochs=warm_epochs)
    warm, c1, _ = train_draft(init, target, world, warm_cfg, train_users=train_users)
    model, c2, ds = train_draft(warm, target, world, cfg, train_users=train_users)
    curve = c1[:-1] + [dict(r, epoch=r["epoch"] + warm_epochs) for r in c2]
    return model, curve, ds
