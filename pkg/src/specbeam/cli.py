"""specbeam command line: gen-world, train, decode, bench, check.

Settings resolve as: command-line flag, then the ``--config`` INI file, then
(for the seed) the SPECBEAM_SEED environment variable, then built-in defaults.
Exit codes: 0 ok, 1 failed assertion or oracle check, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import align, eval as ev, oracle
from .core import make_rng, stream_for
from .specdec import SDConfig, baseline_decode, sd_decode
from .toymodel import Infeasible, SynthWorld, TabularModel, gen_world, train_target

log = logging.getLogger("specbeam")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# (section, key) -> (type, default)
DEFAULTS = {
    ("world", "items"): (int, 200),
    ("world", "users"): (int, 2000),
    ("world", "L"): (int, None),
    ("world", "codebook"): (str, "16,16,16,16"),
    ("world", "skew"): (float, 1.0),
    ("target", "epochs"): (int, 60),
    ("target", "lr"): (float, 2000.0),
    ("target", "momentum"): (float, 0.9),
    ("draft", "variant"): (str, "sft"),
    ("draft", "alpha"): (float, 0.5),
    ("draft", "lambda"): (float, 0.5),
    ("draft", "K_align"): (int, 10),
    ("draft", "epochs"): (int, 30),
    ("draft", "warm_epochs"): (int, 30),
    ("draft", "lr"): (float, 2000.0),
    ("draft", "momentum"): (float, 0.9),
    ("draft", "density_sign"): (int, 1),
    ("draft", "context_window"): (int, 1),
    ("draft", "context_buckets"): (int, 0),
    ("sd", "K"): (int, 10),
    ("sd", "N"): (int, 40),
    ("sd", "gamma"): (int, 4),
    ("sd", "verification"): (str, "strict"),
    ("sd", "temperature"): (float, 1.0),
    ("sd", "cost_ratio"): (float, 0.01),
    ("bench", "K"): (str, "1,3,5,10,20"),
    ("bench", "N"): (str, "40"),
    ("bench", "gamma"): (str, "4"),
    ("bench", "verification"): (str, "strict,relaxed"),
    ("bench", "users"): (int, 500),
    ("bench", "replicates"): (int, 1),
    ("run", "seed"): (int, 0),
    ("run", "jobs"): (int, 1),
}


class UsageError(Exception):
    pass


class Settings:
    """Flag > config file > SPECBEAM_SEED (seed only) > default."""

    def __init__(self, args, config: configparser.ConfigParser):
        self.args = args
        self.config = config
        self.used = configparser.ConfigParser()
        self.used.optionxform = str

    def get(self, section: str, key: str, flag: str | None = None):
        typ, default = DEFAULTS[(section, key)]
        val = getattr(self.args, flag or key.lower(), None)
        if val is None and self.config.has_option(section, key):
            val = self.config.get(section, key)
        if val is None and (section, key) == ("run", "seed") and os.environ.get("SPECBEAM_SEED"):
            val = os.environ["SPECBEAM_SEED"]
        if val is None:
            val = default
        if val is not None and not isinstance(val, typ):
            try:
                val = typ(val)
            except ValueError as e:
                raise UsageError(f"bad value for {section}.{key}: {val!r}") from e
        if not self.used.has_section(section):
            self.used.add_section(section)
        self.used.set(section, key, "" if val is None else str(val))
        return val

    def dump(self, path) -> None:
        with open(path, "w") as f:
            self.used.write(f)


def _read_config(path):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        cp.read(path)
    return cp


def _need_file(path, what):
    if not path:
        raise UsageError(f"missing --{what}")
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")
    return path


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from e


# ---------------------------------------------------------------- commands

def cmd_gen_world(args, st: Settings) -> int:
    codebook = _ints(st.get("world", "codebook"))
    L = st.get("world", "L", "L") or len(codebook)
    try:
        world = gen_world(st.get("world", "items"), st.get("world", "users"), L, codebook,
                          st.get("world", "skew"), st.get("run", "seed"))
    except Infeasible as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        raise UsageError(str(e)) from e
    world.save(args.out)
    st.dump(args.out + ".ini")
    print(f"wrote {args.out}: {len(world.items)} items, {len(world.users)} users")
    return EXIT_OK


def cmd_train(args, st: Settings) -> int:
    world = SynthWorld.load(_need_file(args.world, "world"))
    seed = st.get("run", "seed")
    if args.role == "target":
        model, curve = train_target(world, st.get("target", "epochs"), st.get("target", "lr"),
                                    momentum=st.get("target", "momentum"), return_curve=True)
    else:
        target = TabularModel.load(_need_file(args.target, "target"))
        cfg = align.AlignConfig(alpha=st.get("draft", "alpha"), lambda_mix=st.get("draft", "lambda", "lam"),
                                K_align=st.get("draft", "K_align", "k_align"), lr=st.get("draft", "lr"),
                                epochs=st.get("draft", "epochs"), variant=st.get("draft", "variant"),
                                density_sign=st.get("draft", "density_sign"),
                                momentum=st.get("draft", "momentum"), multi_step=args.multi_step_data)
        buckets = st.get("draft", "context_buckets") or None
        model, curve, ds = align.train_draft_recipe(world, target, cfg, st.get("draft", "warm_epochs"),
                                                    st.get("draft", "context_window"), buckets)
        if args.dataset_out and ds is not None:
            ds.save(args.dataset_out)
    model.save(args.out)
    st.get("run", "seed")
    st.dump(args.out + ".ini")
    if args.curve_out:
        align.write_curve(curve, args.curve_out)
    log.info("seed %d", seed)
    print(f"wrote {args.out}: final total_loss {curve[-1]['total_loss']:.6f}")
    return EXIT_OK


def _select_users(world, spec):
    if spec in (None, "all"):
        return list(range(len(world.users)))
    if spec == "test":
        return world.split()[1]
    users = _ints(spec)
    if any(not 0 <= u < len(world.users) for u in users):
        raise UsageError("user id out of range")
    return users


def _sd_config(st: Settings, args) -> SDConfig:
    try:
        return SDConfig(st.get("sd", "gamma"), st.get("sd", "N"), st.get("sd", "K"),
                        st.get("sd", "verification"), cost_ratio=st.get("sd", "cost_ratio"),
                        temperature=st.get("sd", "temperature"), alg2_literal=args.alg2_literal)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_decode(args, st: Settings) -> int:
    world = SynthWorld.load(_need_file(args.world, "world"))
    target = TabularModel.load(_need_file(args.target, "target"))
    draft = TabularModel.load(_need_file(args.draft, "draft"))
    cfg = _sd_config(st, args)
    seed = st.get("run", "seed")
    trie = world.trie()
    users = _select_users(world, args.users)
    bad, steps = [], []
    out = open(args.trace_out, "w") if args.trace_out else None
    try:
        for u in users:
            cid = world.context_of(u)
            tr = sd_decode(target, draft, cid, cfg, trie, stream_for(seed, u, 0, 0))
            steps.append(np.mean(tr.accepted_steps))
            if out:
                out.write(json.dumps(tr.summary(u, cfg)) + "\n")
            if args.assert_lossless:
                if cfg.verification != "strict":
                    raise UsageError("--assert-lossless needs strict verification")
                beam, _ = baseline_decode(target, cid, cfg, trie)
                if beam.seqs != tr.final_topK.seqs:
                    bad.append(u)
    finally:
        if out:
            out.close()
    if args.trace_out:
        st.dump(args.trace_out + ".ini")
    print(f"users={len(users)} AS={np.mean(steps):.4f}")
    if bad:
        print(f"lossless check FAILED for {len(bad)} users, first {bad[:5]}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _parse_methods(text):
    out = {}
    for part in (text or "").split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise UsageError(f"--methods wants name=path pairs, got {part!r}")
        name, path = part.split("=", 1)
        out[name.strip()] = TabularModel.load(_need_file(path.strip(), "draft"))
    if not out:
        raise UsageError("--methods is empty")
    return out


def cmd_bench(args, st: Settings) -> int:
    world = SynthWorld.load(_need_file(args.world, "world"))
    target = TabularModel.load(_need_file(args.target, "target"))
    drafts = _parse_methods(args.methods)
    grid = {"K": _ints(st.get("bench", "K", "grid_k")), "N": _ints(st.get("bench", "N", "grid_n")),
            "gamma": _ints(st.get("bench", "gamma", "grid_gamma")),
            "verification": [v.strip() for v in st.get("bench", "verification", "grid_verification").split(",")]}
    if any(v not in ("strict", "relaxed") for v in grid["verification"]):
        raise UsageError("verification must be strict or relaxed")
    users = world.split()[1][: st.get("bench", "users", "n_users")]
    t0 = time.time()
    try:
        report = ev.run_bench(world, target, drafts, grid, users, st.get("run", "seed"),
                              st.get("sd", "cost_ratio"), st.get("sd", "temperature"),
                              st.get("bench", "replicates"), jobs=st.get("run", "jobs"))
    except ev.LosslessnessViolation as e:
        print(f"FAIL {e}", file=sys.stderr)
        return EXIT_FAIL
    report.meta["seconds"] = round(time.time() - t0, 1)
    csv_path = str(Path(args.report_out).with_suffix(".csv"))
    report.save(args.report_out, csv_path)
    st.dump(args.report_out + ".ini")
    for r in report.rows:
        print(f"{r['method']:>8} {r['verification']:>7} K={r['K']:<3} N={r['N']:<3} AS={r['AS']:.3f} "
              f"WS={r['WS']:.3f} recall={r['recall']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- check suites

def suite_exactness(seed: int, n: int = 1000) -> oracle.OracleReport:
    rng = make_rng([seed, 1])
    worst = 0.0
    for _ in range(n):
        V = int(rng.integers(2, 9))
        p, q = rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(V))
        worst = max(worst, float(np.abs(oracle.exact_output_dist_k1(p, q) - p).max()))
    return oracle.OracleReport("relaxed_k1_exactness", n, worst, passed=worst < 1e-9)


def suite_acceptance(seed: int, pairs: int = 50, trials: int = 100_000, analytic: int = 10_000):
    from .specdec import accepts

    rng = make_rng([seed, 2])
    worst_z, ok = 0.0, True
    for _ in range(pairs):
        V = int(rng.integers(2, 9))
        p, q = rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(V))
        y = np.searchsorted(np.cumsum(q), rng.random(trials) * q.sum(), side="right").clip(0, V - 1)
        acc = accepts(p[y], q[y], rng.random(trials)).mean()
        b = oracle.exact_accept_rate(p, q)
        sd = np.sqrt(max(b * (1 - b), 1e-300) / trials)
        z = abs(acc - b) / sd if b * (1 - b) > 0 else (0.0 if acc == b else np.inf)
        worst_z = max(worst_z, z)
        ok &= z <= 3
    mc = oracle.OracleReport("acceptance_law_mc", pairs, gap_stats={"max_z": worst_z}, passed=bool(ok))
    worst = 0.0
    for _ in range(analytic):
        V = int(rng.integers(2, 9))
        p, q = rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(V))
        a = float(np.minimum(q, p).sum())
        worst = max(worst, abs(a - (1 - 0.5 * np.abs(p - q).sum())))
        oracle.exact_accept_rate(p, q)
    an = oracle.OracleReport("acceptance_law_analytic", analytic, worst, passed=worst <= 1e-12)
    return [mc, an]


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, n) -> float:
    return float(np.abs(a - n).max() / max(np.abs(n).max(), 1e-12))


def gradient_instances(seed: int, count: int = 20):
    """Small random worlds with random draft/target tables and precompiled positions."""
    rng = make_rng([seed, 3])
    for i in range(count):
        world = gen_world(n_items=12, n_users=30, L=3, codebook=(4, 4, 4), seed=int(rng.integers(1 << 30)))
        trie = world.trie()
        V = world.vocab_size
        target = TabularModel(V, 3, context_window=None)
        draft = TabularModel(V, 3, context_window=1 if i % 2 else None, context_buckets=3 if i % 3 == 0 else None)
        seqs = [(world.context_of(u), world.items[world.users[u]["next"]]) for u in range(len(world.users))]
        pos = align.compile_positions(draft, trie, seqs)
        tpos = align.compile_positions(target, trie, seqs)
        target.table = rng.normal(0, 1.5, target.table.shape)
        draft.table = rng.normal(0, 1.5, draft.table.shape)
        P = align.target_probs(target, tpos)
        K = int(rng.integers(1, 4))
        pK = rng.uniform(0.05, 0.9, len(pos))
        yield world, draft, pos, P, pK, K


def _stable_groups(table, pos, P, K, kink=1e-3):
    """Groups away from top-K set switches and tvd kinks."""
    Q = align.masked_softmax(table[pos.rows], pos.mask)
    keep = []
    for g in range(len(pos)):
        q = np.sort(Q[g][pos.mask[g]])[::-1]
        if K < len(q) and q[K - 1] - q[K] < 1e-4:
            continue
        vc = align.constrained_topk_mask(Q[g:g + 1], pos.mask[g:g + 1], K)
        q2, p2 = align.truncated(Q[g:g + 1], vc), align.truncated(P[g:g + 1], vc)
        if np.any(np.abs(q2 - p2)[vc] <= kink):
            continue
        keep.append(g)
    return np.array(keep, dtype=int)


def subset(pos: align.Positions, idx) -> align.Positions:
    return align.Positions([pos.cids[i] for i in idx], [pos.prefixes[i] for i in idx], pos.rows[idx],
                           pos.mask[idx], pos.weight[idx], pos.counts[idx])


def suite_gradients(seed: int, count: int = 20) -> list:
    worst = {"rec": 0.0, "align_s": 0.0, "align_r": 0.0}
    for world, draft, pos, P, pK, K in gradient_instances(seed, count):
        x = draft.table
        _, g = align.rec_terms(x, pos)
        worst["rec"] = max(worst["rec"], rel_error(g, finite_difference(lambda t: align.rec_terms(t, pos)[0], x)))
        for sign in (1, -1):
            _, g = align.align_terms(x, pos, P, pK, "s", K, sign)
            n = finite_difference(lambda t: align.align_terms(t, pos, P, pK, "s", K, sign)[0], x)
            worst["align_s"] = max(worst["align_s"], rel_error(g, n))
        idx = _stable_groups(x, pos, P, K)
        if len(idx):
            sp, sP, spK = subset(pos, idx), P[idx], pK[idx]
            _, g = align.align_terms(x, sp, sP, spK, "r", K)
            n = finite_difference(lambda t: align.align_terms(t, sp, sP, spK, "r", K)[0], x)
            worst["align_r"] = max(worst["align_r"], rel_error(g, n))
    tol = {"rec": 1e-5, "align_s": 1e-5, "align_r": 1e-4}
    return [oracle.OracleReport(f"gradient_{k}", count, v, passed=v <= tol[k]) for k, v in worst.items()]


def shared_prefix_bundle():
    """Origin {()} drafted to depth 3 with two sequences per step; returns (seqs, hand count)."""
    steps = [[(0,), (1,)], [(0, 2), (0, 3)], [(0, 2, 4), (0, 2, 5)]]
    # distinct prefixes: (0) (1) (0,2) (0,3) (0,2,4) (0,2,5)
    return [s for b in steps for s in b], 6


def suite_tree(seed: int, count: int = 100) -> list:
    from .specdec import flatten_sequences

    seqs, hand = shared_prefix_bundle()
    tree = flatten_sequences(seqs, 0)
    ok = tree.node_count == hand and all(tree.reconstruct(tree.leaf_of[s]) == s for s in seqs)
    reps = [oracle.OracleReport("tree_hand_example", 1, float(abs(tree.node_count - hand)), passed=ok,
                                detail={"node_count": tree.node_count, "naive": tree.naive_count})]
    rng = make_rng([seed, 4])
    good = True
    for _ in range(count):
        depth0 = int(rng.integers(0, 2))
        origin = tuple(int(t) for t in rng.integers(0, 3, depth0))
        seqs = {origin + tuple(int(t) for t in rng.integers(0, 3, int(rng.integers(1, 4))))
                for _ in range(int(rng.integers(1, 8)))}
        tree = flatten_sequences(sorted(seqs), depth0)
        prefixes = {s[:t] for s in seqs for t in range(depth0 + 1, len(s) + 1)}
        shared = tree.node_count < tree.naive_count
        naive_shared = len(prefixes) < sum(len(s) - depth0 for s in seqs)
        good &= (tree.node_count == len(prefixes) and tree.node_count <= tree.naive_count
                 and shared == naive_shared
                 and all(tree.reconstruct(tree.leaf_of[s]) == s for s in seqs))
    reps.append(oracle.OracleReport("tree_random_bundles", count, passed=bool(good)))
    return reps


def suite_replacement(seed: int) -> list:
    gaps = {V: oracle.replacement_gap(np.ones(V) / V, 2) for V in range(4, 11)}
    one = max(oracle.replacement_gap(np.ones(V) / V, 1) for V in range(2, 11))
    dec = all(gaps[V + 1] < gaps[V] for V in range(4, 10))
    return [oracle.OracleReport("replacement_gap", len(gaps) + 9, one,
                                gap_stats={str(k): v for k, v in gaps.items()}, passed=one == 0 and dec)]


SUITES = {
    "exactness": lambda s: [suite_exactness(s)],
    "acceptance": suite_acceptance,
    "gradients": suite_gradients,
    "tree": suite_tree,
    "replacement": suite_replacement,
}


def cmd_check(args, st: Settings) -> int:
    seed = st.get("run", "seed")
    names = list(SUITES) if args.suite == "all" else [args.suite]
    reports = []
    for name in names:
        reports += SUITES[name](seed)
    for r in reports:
        print(r.line())
    if args.report_out:
        oracle.write_reports(reports, args.report_out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [world] [target] [draft] [sd] [bench] [run] sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="specbeam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-world", parents=[common], help="write a synthetic world JSON")
    g.add_argument("--items", type=int)
    g.add_argument("--users", type=int)
    g.add_argument("--L", dest="L", type=int)
    g.add_argument("--codebook", help="comma-separated alphabet sizes, one per position")
    g.add_argument("--skew", type=float)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train the target or a draft model")
    t.add_argument("--role", choices=["target", "draft"], required=True)
    t.add_argument("--world")
    t.add_argument("--target", help="target model (draft role)")
    t.add_argument("--variant", choices=["sft", "atspeed-s", "atspeed-r", "s", "r"])
    t.add_argument("--alpha", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--k-align", dest="k_align", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--warm-epochs", dest="warm_epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--density-sign", dest="density_sign", type=int, choices=[1, -1])
    t.add_argument("--context-window", dest="context_window", type=int)
    t.add_argument("--context-buckets", dest="context_buckets", type=int)
    t.add_argument("--multi-step-data", action="store_true")
    t.add_argument("--dataset-out")
    t.add_argument("--curve-out")
    t.add_argument("--out", required=True)

    d = sub.add_parser("decode", parents=[common], help="speculative decoding for a set of users")
    d.add_argument("--world")
    d.add_argument("--target")
    d.add_argument("--draft")
    d.add_argument("--verification", choices=["strict", "relaxed"])
    d.add_argument("--K", dest="k", type=int)
    d.add_argument("--N", dest="n", type=int)
    d.add_argument("--gamma", type=int)
    d.add_argument("--temperature", type=float)
    d.add_argument("--cost-ratio", dest="cost_ratio", type=float)
    d.add_argument("--users", default="all", help="all | test | comma-separated ids")
    d.add_argument("--trace-out")
    d.add_argument("--assert-lossless", action="store_true")
    d.add_argument("--alg2-literal", action="store_true",
                   help="relaxed mode: accumulate accepted sequences across steps")

    b = sub.add_parser("bench", parents=[common], help="AS/WS/Recall table over a grid")
    b.add_argument("--world")
    b.add_argument("--target")
    b.add_argument("--methods", help="name=draft.json,... ")
    b.add_argument("--K", dest="grid_k")
    b.add_argument("--N", dest="grid_n")
    b.add_argument("--gamma", dest="grid_gamma")
    b.add_argument("--verification", dest="grid_verification")
    b.add_argument("--users", dest="n_users", type=int, help="number of held-out users")
    b.add_argument("--replicates", type=int)
    b.add_argument("--temperature", type=float)
    b.add_argument("--cost-ratio", dest="cost_ratio", type=float)
    b.add_argument("--report-out", required=True)
    b.set_defaults(alg2_literal=False)

    c = sub.add_parser("check", parents=[common], help="oracle certification suites")
    c.add_argument("--suite", choices=["all", *SUITES], default="all")
    c.add_argument("--report-out")
    return p


COMMANDS = {"gen-world": cmd_gen_world, "train": cmd_train, "decode": cmd_decode, "bench": cmd_bench,
            "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        st = Settings(args, _read_config(args.config))
        return COMMANDS[args.cmd](args, st)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
