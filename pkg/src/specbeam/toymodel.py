"""Tabular autoregressive models and the synthetic recommendation world."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Distribution, make_rng


class LengthExceeded(ValueError):
    pass


class Infeasible(ValueError):
    pass


# ---------------------------------------------------------------- world

@dataclass
class SynthWorld:
    items: list[tuple]
    users: list[dict]  # {"history": [item ids], "next": item id}
    L: int
    codebook: list[int]
    seed: int = 0
    skew: float = 1.0

    @property
    def vocab_size(self) -> int:
        return max(self.codebook)

    def context_of(self, user: int) -> int:
        """Conditioning context of a user: the last item they interacted with."""
        return int(self.users[user]["history"][-1])

    def split(self, test_frac: float = 0.25) -> tuple[list[int], list[int]]:
        n = len(self.users)
        n_test = int(round(n * test_frac)) if n > 1 else 0
        return list(range(n - n_test)), list(range(n - n_test, n))

    def rec_pairs(self, train_users=None) -> list[tuple[int, int]]:
        """(context item, next item) training pairs.

        Transitions inside every user's history are observable; the held-out
        ``next`` item only counts for users in ``train_users``.
        """
        if train_users is None:
            train_users = self.split()[0]
        train_users = set(train_users)
        pairs = []
        for u, rec in enumerate(self.users):
            h = list(rec["history"])
            seq = h + [rec["next"]] if u in train_users else h
            pairs.extend(zip(seq[:-1], seq[1:]))
        return pairs

    def trie(self):
        from .beam import IdentifierTrie

        return IdentifierTrie(self.items)

    def to_json(self) -> dict:
        return {
            "items": [list(s) for s in self.items],
            "users": [{"history": list(u["history"]), "next": int(u["next"])} for u in self.users],
            "codebook": list(self.codebook),
            "L": self.L,
            "seed": self.seed,
            "skew": self.skew,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SynthWorld":
        return cls(
            items=[tuple(int(t) for t in s) for s in d["items"]],
            users=[{"history": [int(i) for i in u["history"]], "next": int(u["next"])} for u in d["users"]],
            L=int(d["L"]),
            codebook=[int(c) for c in d["codebook"]],
            seed=int(d.get("seed", 0)),
            skew=float(d.get("skew", 1.0)),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, separators=(",", ":"))
            f.write("\n")

    @classmethod
    def load(cls, path) -> "SynthWorld":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _unique_codes(n_items, codebook, rng):
    space = math.prod(codebook)
    if space < n_items:
        raise Infeasible(f"{space} identifiers available for {n_items} items")
    if space <= 4 * n_items or space <= 1 << 16:
        flat = rng.choice(space, size=n_items, replace=False)
    else:
        seen: set[int] = set()
        flat = []
        while len(flat) < n_items:
            c = int(rng.integers(space))
            if c not in seen:
                seen.add(c)
                flat.append(c)
    codes = []
    for c in flat:
        c = int(c)
        digits = []
        for size in reversed(codebook):
            digits.append(c % size)
            c //= size
        codes.append(tuple(reversed(digits)))
    return codes


def gen_world(
    n_items: int = 200,
    n_users: int = 2000,
    L: int = 4,
    codebook=(16, 16, 16, 16),
    skew: float = 1.0,
    seed: int = 0,
    history_len: tuple[int, int] = (4, 12),
    cluster_size: int = 20,
    noise: float = 0.1,
) -> SynthWorld:
    """Users with a latent taste cluster; their items are drawn mostly from it.

    Within a cluster item popularity is Zipf with exponent ``skew``. Clusters
    are chosen with probability proportional to their size, so at ``skew=0``
    every item is equally popular overall.
    """
    codebook = [int(c) for c in codebook]
    if len(codebook) != L:
        raise ValueError("codebook must list one alphabet size per position")
    if n_items < 1:
        raise ValueError("need at least one item")
    rng = make_rng(seed)
    items = _unique_codes(n_items, codebook, rng)

    n_clusters = max(1, n_items // cluster_size)
    cluster_of = rng.permutation(np.arange(n_items) % n_clusters)
    members = [np.flatnonzero(cluster_of == c) for c in range(n_clusters)]
    sizes = np.array([len(m) for m in members], dtype=float)
    weights = []
    for m in members:
        ranks = rng.permutation(len(m)) + 1
        w = ranks.astype(float) ** (-skew)
        weights.append(w / w.sum())

    def draw(c):
        if rng.random() < noise:
            return int(rng.integers(n_items))
        return int(members[c][rng.choice(len(members[c]), p=weights[c])])

    users = []
    lo, hi = history_len
    for _ in range(n_users):
        c = int(rng.choice(n_clusters, p=sizes / sizes.sum()))
        h = [draw(c) for _ in range(int(rng.integers(lo, hi + 1)))]
        users.append({"history": h, "next": draw(c)})
    return SynthWorld(items=items, users=users, L=L, codebook=codebook, seed=int(seed), skew=float(skew))


# ---------------------------------------------------------------- model

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class TabularModel:
    """Explicit next-token logit table keyed by (context, prefix).

    ``context_window`` truncates the prefix part of the key to its last T
    tokens (``None`` keeps the whole prefix, i.e. an exact tree-structured
    model). ``context_buckets`` folds context ids modulo B. Both shrink the
    number of distinct rows and are how the draft is made weaker than the
    target. ``temperature == 0`` selects greedy argmax mode.
    """

    vocab_size: int
    max_len: int
    temperature: float = 1.0
    context_window: int | None = None
    context_buckets: int | None = None
    keys: list = field(default_factory=list)
    table: np.ndarray | None = None

    def __post_init__(self):
        if self.table is None:
            self.table = np.zeros((0, self.vocab_size))
        self.table = np.asarray(self.table, dtype=float).reshape(-1, self.vocab_size)
        self.keys = [tuple(k) for k in self.keys]
        if len(self.keys) != len(self.table):
            raise ValueError("one logits row per key")
        self.index = {k: i for i, k in enumerate(self.keys)}

    @property
    def greedy(self) -> bool:
        return self.temperature == 0

    def key(self, context_id: int, prefix) -> tuple:
        cid = int(context_id)
        if self.context_buckets:
            cid %= self.context_buckets
        prefix = tuple(prefix)
        depth = len(prefix)
        if self.context_window is not None:
            prefix = prefix[max(0, depth - self.context_window):] if self.context_window else ()
        return (cid, depth, *prefix)

    def row(self, context_id: int, prefix) -> np.ndarray:
        i = self.index.get(self.key(context_id, prefix))
        return self.table[i] if i is not None else np.zeros(self.vocab_size)

    def ensure_rows(self, keys) -> np.ndarray:
        """Row indices for ``keys``, appending zero rows for unseen ones."""
        new = []
        for k in keys:
            if k not in self.index:
                self.index[k] = len(self.keys) + len(new)
                new.append(k)
        if new:
            self.keys.extend(new)
            self.table = np.vstack([self.table, np.zeros((len(new), self.vocab_size))])
        return np.array([self.index[k] for k in keys], dtype=int)

    def forward(self, context) -> Distribution:
        """Next-token distribution over the whole vocabulary."""
        context_id, prefix = context
        if len(prefix) >= self.max_len:
            raise LengthExceeded(f"prefix length {len(prefix)} >= max_len {self.max_len}")
        z = self.row(context_id, prefix)
        if self.greedy:
            p = np.zeros(self.vocab_size)
            p[int(np.argmax(z))] = 1.0
            return Distribution(p)
        return Distribution(_softmax(z / self.temperature))

    def masked(self, context_id: int, prefix, children: np.ndarray) -> np.ndarray:
        """Next-token probabilities restricted to ``children`` and renormalized.

        Returned vector is aligned with ``children`` (not the vocabulary).
        """
        if len(prefix) >= self.max_len:
            raise LengthExceeded(f"prefix length {len(prefix)} >= max_len {self.max_len}")
        z = self.row(context_id, prefix)[children]
        if self.greedy:
            p = np.zeros(len(children))
            p[int(np.argmax(z))] = 1.0
            return p
        return _softmax(z / self.temperature)

    def copy(self) -> "TabularModel":
        return TabularModel(self.vocab_size, self.max_len, self.temperature, self.context_window,
                            self.context_buckets, list(self.keys), self.table.copy())

    def with_temperature(self, temperature: float) -> "TabularModel":
        return TabularModel(self.vocab_size, self.max_len, temperature, self.context_window,
                            self.context_buckets, list(self.keys), self.table)

    # -------------------------------------------------------- persistence

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "temperature": self.temperature,
            "context_window": self.context_window,
            "context_buckets": self.context_buckets,
            "rows": [{"key": list(k), "logits": [float(x) for x in r]} for k, r in zip(self.keys, self.table)],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TabularModel":
        rows = d.get("rows", [])
        V = int(d["vocab_size"])
        table = np.array([r["logits"] for r in rows], dtype=float).reshape(-1, V)
        return cls(V, int(d["max_len"]), float(d.get("temperature", 1.0)), d.get("context_window"),
                   d.get("context_buckets"), [tuple(r["key"]) for r in rows], table)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "TabularModel":
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------- training

def train_target(world: SynthWorld, epochs: int = 60, lr: float = 2000.0, train_users=None,
                 momentum: float = 0.9, return_curve: bool = False):
    """Exact-prefix model fit by gradient descent on the recommendation NLL.

    The loss is a mean over all training positions, so per-row gradients are
    small and ``lr`` is correspondingly large.
    """
    from .align import gradient_descent, compile_positions, item_pairs, rec_terms

    model = TabularModel(world.vocab_size, world.L)
    pos = compile_positions(model, world.trie(), item_pairs(world, train_users))

    def objective(table):
        loss, g = rec_terms(table, pos, model.temperature)
        return {"rec_loss": loss, "align_loss": 0.0, "total_loss": loss}, g

    curve = gradient_descent(model, objective, epochs, lr, momentum)
    return (model, curve) if return_curve else model


def popularity_topk(world: SynthWorld, k: int, train_users=None) -> list[int]:
    """Most frequent next items over the training transitions (ties to lower id)."""
    counts = np.zeros(len(world.items))
    for _, b in world.rec_pairs(train_users):
        counts[b] += 1
    return [int(i) for i in np.argsort(-counts, kind="stable")[:k]]
