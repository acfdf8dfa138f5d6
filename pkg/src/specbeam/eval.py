"""Metrics and the benchmark harness."""
from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import CallLedger, make_rng, stream_for
from .specdec import SDConfig, baseline_decode, sd_decode, simulated_time

CSV_FIELDS = ["method", "verification", "K", "N", "gamma", "alpha", "AS", "WS", "recall", "target_calls",
              "node_evals"]

NOTES = {
    "AS": "mean over users of the per-user mean accepted steps per SD step",
    "WS": "baseline simulated time / SD simulated time; simulated time = target node evals "
          "+ cost_ratio * draft node evals (+ call_cost per sequential call)",
    "reference": "published GPU walltime speedups (e.g. WS@1 = 2.33 on Beauty) are not reproducible "
                 "with this cost model and are never compared against",
}


class UserMismatch(ValueError):
    pass


class LosslessnessViolation(AssertionError):
    pass


# ---------------------------------------------------------------- metrics

def _steps(t):
    return t["accepted_steps"] if isinstance(t, dict) else t.accepted_steps


def per_user_accept(traces) -> np.ndarray:
    return np.array([np.mean(_steps(t)) for t in traces], dtype=float)


def accept_steps(traces) -> float:
    """Per-user mean of accepted steps per SD step, then the mean over users."""
    if len(traces) == 0:
        raise ValueError("no traces")
    return float(per_user_accept(traces).mean())


def _ledger(t) -> CallLedger:
    return CallLedger(t["target_calls"], t["draft_calls"], t["target_node_evals"], t["draft_node_evals"])


def speedup(traces, baseline_traces, cost_ratio: float, call_cost: float = 0.0) -> float:
    """Total baseline simulated time over total SD simulated time (same users)."""
    users = [t["user"] for t in traces]
    if sorted(users) != sorted(t["user"] for t in baseline_traces):
        raise UserMismatch("SD and baseline traces cover different users")
    sd = sum(simulated_time(_ledger(t), cost_ratio, call_cost) for t in traces)
    base = sum(simulated_time(_ledger(t), cost_ratio, call_cost) for t in baseline_traces)
    return base / sd if sd > 0 else float("inf")


def hits_at_k(topk_lists, truth, K: int) -> np.ndarray:
    if len(topk_lists) != len(truth):
        raise ValueError("one ranked list per ground-truth item")
    return np.array([tuple(g) in {tuple(s) for s in lst[:K]} for lst, g in zip(topk_lists, truth)], dtype=float)


def recall_at_k(topk_lists, truth, K: int) -> float:
    """Fraction of users whose held-out item is in their first K results."""
    return float(hits_at_k(topk_lists, truth, K).mean()) if len(truth) else 0.0


def paired_bootstrap(a, b, n_boot: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Mean of b - a and the half-width of its percentile 95% interval."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    rng = make_rng(seed)
    idx = rng.integers(0, len(d), size=(n_boot, len(d)))
    means = d[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return float(d.mean()), float((hi - lo) / 2)


# ---------------------------------------------------------------- harness

def expand_grid(grid: dict) -> list[dict]:
    keys = ["K", "N", "gamma", "verification"]
    vals = [list(grid[k]) if isinstance(grid[k], (list, tuple)) else [grid[k]] for k in keys]
    out = []
    for combo in itertools.product(*vals):
        row = dict(zip(keys, combo))
        if row["N"] is None or row["N"] < row["K"]:
            # N given as 0/None or below K means "use K"
            row["N"] = row["K"]
        out.append(row)
    return out


@dataclass
class _Job:
    target: object
    draft: object
    trie: object
    cfg: SDConfig
    users: list
    contexts: list
    seed: int
    replicates: int
    with_baseline: bool


def _run_job(job: _Job):
    sd, base = [], []
    for u, cid in zip(job.users, job.contexts):
        for rep in range(job.replicates):
            tr = sd_decode(job.target, job.draft, cid, job.cfg, job.trie, stream_for(job.seed, u, rep, 0))
            s = tr.summary(u, job.cfg)
            s["replicate"] = rep
            sd.append(s)
            if job.with_baseline:
                beam, led = baseline_decode(job.target, cid, job.cfg, job.trie, stream_for(job.seed, u, rep, 1))
                base.append({"user": u, "replicate": rep, **led.as_dict(), "topK": [list(x) for x in beam.seqs]})
    return sd, base


def decode_users(target, draft, trie, cfg: SDConfig, users, contexts, seed: int = 0, replicates: int = 1,
                 with_baseline: bool = True, jobs: int = 1):
    """SD (and baseline) summaries for every user and replicate, in user order."""
    users, contexts = list(users), list(contexts)
    if jobs <= 1 or len(users) < 2:
        return _run_job(_Job(target, draft, trie, cfg, users, contexts, seed, replicates, with_baseline))
    chunks = np.array_split(np.arange(len(users)), jobs)
    work = [_Job(target, draft, trie, cfg, [users[i] for i in c], [contexts[i] for i in c], seed, replicates,
                 with_baseline) for c in chunks if len(c)]
    sd, base = [], []
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for s, b in ex.map(_run_job, work):
            sd += s
            base += b
    return sd, base


def _per_user(rows, fn):
    by: dict = {}
    for r in rows:
        by.setdefault(r["user"], []).append(fn(r))
    return {u: float(np.mean(v)) for u, v in by.items()}


def assert_lossless(sd, base) -> None:
    for s, b in zip(sd, base):
        if s["user"] != b["user"] or s["topK"] != b["topK"]:
            raise LosslessnessViolation(f"user {s['user']}: SD list differs from target beam search")


@dataclass
class BenchReport:
    config: dict
    rows: list = field(default_factory=list)
    per_user: dict = field(default_factory=dict)  # row label -> {"AS": [...], "hits": [...]}
    meta: dict = field(default_factory=lambda: dict(NOTES))

    def find(self, **match) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(match)

    def to_json(self) -> dict:
        return {"config": self.config, "meta": self.meta, "rows": self.rows}

    def save(self, json_path=None, csv_path=None) -> None:
        if json_path:
            with open(json_path, "w") as f:
                json.dump(self.to_json(), f, indent=2)
                f.write("\n")
        if csv_path:
            with open(csv_path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore")
                w.writeheader()
                w.writerows(self.rows)


def row_label(method, cfg: SDConfig) -> str:
    return f"{method}/{cfg.verification}/K{cfg.K}/N{cfg.N}/g{cfg.gamma}"


def run_bench(world, target, drafts: dict, grid: dict, users=None, seed: int = 0, cost_ratio: float = 0.01,
              temperature: float = 1.0, replicates: int = 1, alphas: dict | None = None, jobs: int = 1,
              call_cost: float = 0.0) -> BenchReport:
    """Every draft x every grid point over ``users`` (default: held-out users).

    Strict rows raise LosslessnessViolation if any list differs from the
    baseline. Relaxed rows carry Recall@K of both SD and target sampling.
    """
    trie = world.trie()
    if users is None:
        users = world.split()[1]
    users = list(users)
    contexts = [world.context_of(u) for u in users]
    truth = [world.items[world.users[u]["next"]] for u in users]
    alphas = alphas or {}
    report = BenchReport({"grid": {k: list(v) if isinstance(v, (list, tuple)) else v for k, v in grid.items()},
                          "users": len(users), "seed": seed, "cost_ratio": cost_ratio,
                          "temperature": temperature, "replicates": replicates, "methods": list(drafts)})
    for point in expand_grid(grid):
        cfg = SDConfig(point["gamma"], point["N"], point["K"], point["verification"], cost_ratio=cost_ratio,
                       temperature=temperature)
        reps = replicates if cfg.verification == "relaxed" else 1
        base_hits = None
        for name, draft in drafts.items():
            sd, base = decode_users(target, draft, trie, cfg, users, contexts, seed, reps, True, jobs)
            if cfg.verification == "strict":
                assert_lossless(sd, base)
            rep_truth = [truth[users.index(s["user"])] for s in sd]
            hits = hits_at_k([s["topK"] for s in sd], rep_truth, cfg.K)
            user_hits = _per_user([dict(s, h=h) for s, h in zip(sd, hits)], lambda r: r["h"])
            if base_hits is None:
                bh = hits_at_k([b["topK"] for b in base], rep_truth, cfg.K)
                base_hits = _per_user([dict(b, h=h) for b, h in zip(base, bh)], lambda r: r["h"])
            user_as = _per_user(sd, lambda r: np.mean(r["accepted_steps"]))
            label = row_label(name, cfg)
            report.per_user[label] = {"users": users, "AS": [user_as[u] for u in users],
                                      "hits": [user_hits[u] for u in users],
                                      "baseline_hits": [base_hits[u] for u in users]}
            report.rows.append({
                "method": name,
                "verification": cfg.verification,
                "K": cfg.K,
                "N": cfg.N,
                "gamma": cfg.gamma,
                "alpha": alphas.get(name, ""),
                "AS": float(np.mean(list(user_as.values()))),
                "WS": speedup(sd, base, cost_ratio, call_cost),
                "recall": float(np.mean([user_hits[u] for u in users])),
                "baseline_recall": float(np.mean([base_hits[u] for u in users])),
                "target_calls": int(sum(s["target_calls"] for s in sd)),
                "node_evals": int(sum(s["target_node_evals"] for s in sd)),
                "baseline_target_calls": int(sum(b["target_calls"] for b in base)),
            })
    return report
