"""Brute-force references for the decoding engine.

Nothing here calls the beam or verification code; the checks enumerate
draw orders, verdicts and paths directly and cap instance sizes instead of
falling back to sampling.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

MAX_TERMINALS = 100_000


class TooLarge(ValueError):
    pass


class OracleMismatch(AssertionError):
    pass


@dataclass
class OracleReport:
    check_name: str
    instances: int
    max_abs_error: float | None = None
    gap_stats: dict | None = None
    passed: bool = True
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return {k: v for k, v in d.items() if v is not None}

    def line(self) -> str:
        err = f" max_err={self.max_abs_error:.3g}" if self.max_abs_error is not None else ""
        return f"{'PASS' if self.passed else 'FAIL'} {self.check_name} n={self.instances}{err}"


def write_reports(reports, path) -> None:
    with open(path, "w") as f:
        json.dump([r.to_json() for r in reports], f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------- joints

@dataclass
class ExactJoint:
    table: dict  # full sequence -> probability
    logp: dict  # full sequence -> joint log-probability, accumulated left to right

    def total(self) -> float:
        return float(sum(self.table.values()))

    def ranked(self) -> list[tuple]:
        return sorted(self.logp, key=lambda s: (-self.logp[s], s))


def _paths(model, x, trie, prefix, prob, lp, out_p, out_lp):
    ch = trie.children(prefix)
    if len(ch) == 0:
        out_p[prefix] = prob
        out_lp[prefix] = lp
        return
    cond = model.masked(x, prefix, ch)
    for c, pc in zip(ch.tolist(), cond.tolist()):
        if pc > 0:
            _paths(model, x, trie, prefix + (c,), prob * pc, lp + math.log(pc), out_p, out_lp)


def enumerate_joint(model, x, trie) -> ExactJoint:
    """Product of trie-masked conditionals along every identifier path."""
    if len(trie.terminals) > MAX_TERMINALS:
        raise TooLarge(f"{len(trie.terminals)} identifiers exceed {MAX_TERMINALS}")
    p, lp = {}, {}
    _paths(model, x, trie, (), 1.0, 0.0, p, lp)
    return ExactJoint(p, lp)


def enumerate_beam(model, x, trie, K: int) -> list[tuple[tuple, float]]:
    """True top-K identifiers by joint probability (ties: lexicographic)."""
    joint = enumerate_joint(model, x, trie)
    return [(s, joint.logp[s]) for s in joint.ranked()[:K]]


def _depth_scores(model, x, trie):
    """Joint log-probability of every prefix, grouped by depth."""
    by_depth = [{(): 0.0}]
    for _ in range(trie.L):
        nxt = {}
        for pre, lp in by_depth[-1].items():
            ch = trie.children(pre)
            for c, pc in zip(ch.tolist(), model.masked(x, pre, ch).tolist()):
                if pc > 0:
                    nxt[pre + (c,)] = lp + math.log(pc)
        by_depth.append(nxt)
    return by_depth


def beam_admissible(model, x, trie, K: int) -> bool:
    """True when greedy top-K pruning per depth cannot drop a global top-K prefix.

    Holds iff at every depth the K best prefixes all extend one of the K best
    prefixes of the previous depth; then beam search returns the true top-K.
    """
    by_depth = _depth_scores(model, x, trie)
    keep = [()]
    for d in range(1, trie.L + 1):
        ranked = sorted(by_depth[d], key=lambda s: (-by_depth[d][s], s))[:K]
        if any(s[:-1] not in set(keep) for s in ranked):
            return False
        keep = ranked
    return True


# ---------------------------------------------------------------- relaxed verification

def _check_pair(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be vectors of one length")
    return p, q


def exact_accept_rate(p, q, tol: float = 1e-12) -> float:
    """Probability that one draft draw y ~ q passes the min(1, p/q) test.

    Cross-checked against the half-L1 form of 1 - TVD.
    """
    p, q = _check_pair(p, q)
    on = q > 0
    b = float(np.sum(np.minimum(q[on], p[on])))  # q * min(1, p/q) = min(q, p)
    ref = 1.0 - 0.5 * float(np.abs(p - q).sum())
    if abs(b - ref) > tol:
        raise OracleMismatch(f"acceptance {b!r} vs 1 - TVD {ref!r}")
    return b


def _residual(p, q):
    r = np.maximum(0.0, p - q)
    s = r.sum()
    return r / s if s > 0 else r


def exact_output_dist_k1(p, q) -> np.ndarray:
    """One-sequence verify: q(y) min(1, p/q) + P(reject) * residual(y)."""
    p, q = _check_pair(p, q)
    ratio = np.divide(p, q, out=np.ones_like(p), where=q > 0)
    keep = q * np.minimum(1.0, ratio)
    reject = float(np.sum(q * np.maximum(0.0, 1.0 - ratio)))
    return keep + reject * _residual(p, q)


def _orders(w, n):
    """All ordered without-replacement draws of length n with their probabilities."""
    w = np.asarray(w, dtype=float)

    def rec(avail, mass, prefix, prob):
        if len(prefix) == n or mass <= 0:
            yield tuple(prefix), prob
            return
        for i in avail:
            if w[i] > 0:
                rest = [j for j in avail if j != i]
                yield from rec(rest, mass - w[i], prefix + [i], prob * w[i] / mass)

    yield from rec(list(range(len(w))), float(w.sum()), [], 1.0)


def without_replacement_sets(w, n) -> dict:
    out: dict = {}
    for order, pr in _orders(w, n):
        k = frozenset(order)
        out[k] = out.get(k, 0.0) + pr
    return out


def exact_output_dist_relaxed(p, q, K: int, max_support: int = 8, max_K: int = 3):
    """Distribution of the verified K-set.

    K = 1 returns a vector over tokens (closed form). K >= 2 returns a dict
    frozenset -> probability by summing over draft orders, verdicts and
    residual draws.
    """
    p, q = _check_pair(p, q)
    if K == 1:
        return exact_output_dist_k1(p, q)
    if len(p) > max_support or K > max_K:
        raise TooLarge("enumeration limited to support <= 8 and K <= 3")
    a = np.minimum(1.0, np.divide(p, q, out=np.ones_like(p), where=q > 0))
    out: dict = {}

    def add(s, pr):
        out[s] = out.get(s, 0.0) + pr

    for order, p_draw in _orders(q, K):
        for verdict in itertools.product((True, False), repeat=len(order)):
            pv = p_draw
            for i, v in zip(order, verdict):
                pv *= a[i] if v else 1.0 - a[i]
            if pv == 0:
                continue
            kept = [i for i, v in zip(order, verdict) if v]
            if len(kept) == len(order):
                add(frozenset(order), pv)
                continue
            res = np.maximum(0.0, p - q)
            res[kept] = 0.0
            need = K - len(kept)
            for extra, pr in _orders(res, need):
                if len(extra) < need:
                    rest = p.copy()
                    rest[kept + list(extra)] = 0.0
                    for more, pr2 in _orders(rest, need - len(extra)):
                        add(frozenset(kept + list(extra) + list(more)), pv * pr * pr2)
                else:
                    add(frozenset(kept + list(extra)), pv * pr)
    return out


def set_tvd(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


def relaxed_gap(p, q, K: int) -> float:
    """How far the verified K-set law is from drawing K without replacement from p."""
    return set_tvd(exact_output_dist_relaxed(p, q, K), without_replacement_sets(p, K))


# ---------------------------------------------------------------- with-replacement approximation

def _exact_orders(w, n):
    """``_orders`` in rational arithmetic."""
    total = sum(w)

    def rec(avail, mass, prefix, prob):
        if len(prefix) == n or mass == 0:
            yield tuple(prefix), prob
            return
        for i in avail:
            if w[i] > 0:
                rest = [j for j in avail if j != i]
                yield from rec(rest, mass - w[i], prefix + [i], prob * w[i] / mass)

    yield from rec(list(range(len(w))), total, [], Fraction(1))


def replacement_gap(d, n: int, max_support: int = 10, max_n: int = 4) -> float:
    """TVD between without-replacement n-sets and deduplicated n draws with replacement.

    Computed with exact rationals (every float is one), so equal laws give 0.
    """
    w = np.asarray(getattr(d, "probs", d), dtype=float)
    support = int(np.count_nonzero(w > 0))
    if n > support:
        raise ValueError("n exceeds support")
    if support > max_support or n > max_n:
        raise TooLarge("enumeration limited to support <= 10 and n <= 4")
    fw = [Fraction(float(x)) for x in w]
    total = sum(fw)
    fw = [x / total for x in fw]
    exact: dict = {}
    for order, pr in _exact_orders(fw, n):
        k = frozenset(order)
        exact[k] = exact.get(k, 0) + pr
    multi: dict = {}
    idx = [i for i, x in enumerate(fw) if x > 0]
    for draw in itertools.product(idx, repeat=n):
        k = frozenset(draw)
        multi[k] = multi.get(k, 0) + math.prod(fw[i] for i in draw)
    keys = set(exact) | set(multi)
    return float(sum(abs(exact.get(k, 0) - multi.get(k, 0)) for k in keys) / 2)
