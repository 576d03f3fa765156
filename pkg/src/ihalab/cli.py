"""``ihalab`` command line.

Exit codes: 0 success, 1 a verification failed, 2 usage error, 3 runtime or
numeric error.  Flags may also come from a JSON ``--config`` file; explicit
flags win.  ``IHALAB_OUT`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, constructions, tasks, trainer
from .errors import ConstraintError, DegenerateRowError, NonFiniteError, ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
GOLDEN_RTOL = 1e-12


def _out_dir(args) -> Path | None:
    out = args.out or os.environ.get("IHALAB_OUT")
    return Path(out) if out else None


def _emit(obj, args, filename: str) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"
    sys.stdout.write(text)
    out = _out_dir(args)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(text)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def normalized_adjacency(n: int, rng: np.random.Generator, density: float = 0.3) -> np.ndarray:
    """Random symmetric graph with self-loops, scaled to spectral radius 1."""
    a = np.triu(rng.random((n, n)) < density, 1).astype(np.float64)
    a = a + a.T + np.eye(n)
    return a / np.abs(np.linalg.eigvalsh(a)).max()


def _suite_superset(args) -> list[dict]:
    reports = [constructions.verify_superset(args.H, args.d, args.P, args.N, args.trials, args.seed, mode).to_dict()
               for mode in ("none", "causal")]
    reports.append(constructions.verify_strictness(args.H, args.d, seed=args.seed).to_dict())
    return reports


def _suite_polyfilter(args) -> list[dict]:
    rng = np.random.default_rng(args.seed)
    a = normalized_adjacency(args.N, rng)
    x = rng.normal(size=(args.N, args.d))
    return [constructions.build_mha_polyfilter(a, x, args.k)[1].to_dict(),
            constructions.build_iha_polyfilter(a, x, args.k)[1].to_dict()]


def _suite_cpm3(args) -> list[dict]:
    n = args.nmax
    rng = np.random.default_rng(args.seed)
    seqs = [np.arange(1, n + 1)] + [rng.integers(0, n, n) for _ in range(args.trials_cpm3)]
    out = []
    for kind, build, params_of in (("mha", constructions.build_cpm3_workspace_mha, constructions.cpm3_mha_params),
                                   ("iha", constructions.build_cpm3_workspace_iha, constructions.cpm3_iha_params)):
        report = build(n, seqs[0])[1]
        params = params_of(n)
        ws_err = count_err = 0.0
        for x in seqs:
            ws = constructions.cpm3_workspace(params, x)
            ws_err = max(ws_err, float(np.abs(ws[:, :n] - constructions.cyclic_shift_workspace_oracle(x)).max()))
            got = constructions.cpm3_mlp_eval(ws, n, args.G, args.M)
            count_err = max(count_err, float(np.abs(got - constructions.cpm3_count_oracle(x, args.G, args.M)).max()))
        report.details.update(sequences=len(seqs), workspace_max_error=ws_err, count_max_error=count_err,
                              workspace_example=constructions.cpm3_workspace(params, seqs[0])[:, :n])
        report.max_abs_error = max(report.max_abs_error, ws_err, count_err)
        report.__post_init__()
        out.append(report.to_dict())
    return out


def _suite_rank(args) -> list[dict]:
    return [constructions.rank_bound_check(args.N, args.d, args.k, args.trials_rank, args.seed)]


SUITES = {"superset": _suite_superset, "polyfilter": _suite_polyfilter, "cpm3": _suite_cpm3, "rank": _suite_rank}


def compare_golden(got, want, path: str = "$") -> list[str]:
    """Structural diff with floats compared to ``GOLDEN_RTOL`` (relative, absolute near 0)."""
    diffs: list[str] = []
    if isinstance(want, dict):
        if not isinstance(got, dict) or set(got) != set(want):
            return [f"{path}: keys differ"]
        for k in want:
            diffs += compare_golden(got[k], want[k], f"{path}.{k}")
    elif isinstance(want, list):
        if not isinstance(got, list) or len(got) != len(want):
            return [f"{path}: lengths differ"]
        for i, (g, w) in enumerate(zip(got, want)):
            diffs += compare_golden(g, w, f"{path}[{i}]")
    elif isinstance(want, bool) or want is None or isinstance(want, str):
        if got != want:
            diffs.append(f"{path}: {got!r} != {want!r}")
    elif isinstance(want, (int, float)):
        if not isinstance(got, (int, float)) or isinstance(got, bool):
            return [f"{path}: type differs"]
        if not math.isclose(got, want, rel_tol=GOLDEN_RTOL, abs_tol=GOLDEN_RTOL):
            diffs.append(f"{path}: {got!r} != {want!r}")
    elif got != want:
        diffs.append(f"{path}: {got!r} != {want!r}")
    return diffs


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    reports = []
    for name in names:
        reports += SUITES[name](args)
    reports = json.loads(json.dumps(reports, default=_json_default))
    _emit(reports, args, "verify.json")
    if args.save_golden:
        Path(args.save_golden).write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    failed = [r for r in reports if not r["passed"]]
    if failed:
        print(f"FAIL: {failed[0]['name']}", file=sys.stderr)
        return EXIT_FAIL
    if args.golden:
        diffs = compare_golden(reports, json.loads(Path(args.golden).read_text()))
        if diffs:
            print("golden mismatch: " + diffs[0], file=sys.stderr)
            return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# data, training
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = _out_dir(args)
    if out is None:
        raise ConstraintError("gen needs --out (or IHALAB_OUT)")
    spec = tasks.preset_spec(args.task, args.preset, args.seed)
    manifest = tasks.write_dataset(spec, out, compress=args.gzip)
    sys.stdout.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _load_data(args):
    if args.data:
        spec, data = tasks.read_dataset(args.data)
    else:
        spec = tasks.preset_spec(args.task, args.preset, args.seed)
        data = tasks.load_or_generate(spec)
    return spec, data


def cmd_train(args) -> int:
    spec, data = _load_data(args)
    cfg = trainer.model_for_task(spec, args.kind, heads=args.H, d=args.d, pseudo=args.P)
    log = (lambda c: print(json.dumps(c), file=sys.stderr)) if args.verbose else None
    result, params = trainer.train(cfg, data, args.lr, args.epochs, args.patience, args.batch,
                                   args.seed, args.optimizer, log=log)
    out = _out_dir(args)
    if out is not None:
        trainer.save_result(result, out)
        from .iha import save_tensors
        save_tensors(params, out / "params")
    sys.stdout.write(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = tasks.preset_spec(args.task, args.preset, args.seed)
    out = _out_dir(args) or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    rows = trainer.sweep(spec, out / f"sweep_{args.task}.csv", kinds=args.kinds, lrs=args.lrs, seed=args.seed,
                         workers=args.threads, max_epochs=args.epochs, patience=args.patience,
                         batch=args.batch, optimizer=args.optimizer, pseudo=args.P)
    sys.stdout.write(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


def cmd_flops(args) -> int:
    _emit(analysis.flop_report(args.N, args.d, args.H, args.P, args.schedule, args.global_layer), args, "flops.json")
    return EXIT_OK


def cmd_params(args) -> int:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("family", "size", "mha", "iha", "note"))
    w.writerow(("superset_extra", f"H={args.H};P={args.P}", 0, analysis.iha_extra_params(args.H, args.P), "4H^2P"))
    for k in range(1, args.kmax + 1):
        c = analysis.polyfilter_param_counts(args.N, args.d, k)
        w.writerow(("polyfilter", f"N={args.N};d={args.d};k={k}", c["mha"], c["iha"], f"crossover_k={c['crossover_k']}"))
    for n in range(1, args.nmax + 1):
        b = analysis.cpm3_param_bounds(n)
        w.writerow(("cpm3", f"n_max={n}", b["mha_lower"], b["iha_upper"], "mha lower bound; iha upper bound"))
    text = buf.getvalue()
    sys.stdout.write(text)
    out = _out_dir(args)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.csv").write_text(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = []
    rng = np.random.default_rng(args.seed)
    for kind in ("mha", "iha"):
        cfg = trainer.ModelConfig(kind, heads=args.H, pseudo=args.P if kind == "iha" else 1, d=args.d,
                                  vocab=2, positions=4)
        for t in range(args.trials):
            batch = random_batch(rng, 2, 4)
            r = trainer.model_gradcheck(cfg, batch, seed=args.seed + t, eps=args.eps)
            reports.append({"kind": kind, "trial": t, "status": r.status, "max_rel_error": r.max_rel_error})
    _emit(reports, args, "gradcheck.json")
    return EXIT_OK if all(r["status"] == "passed" for r in reports) else EXIT_FAIL


def random_batch(rng: np.random.Generator, batch: int, side: int) -> tasks.Batch:
    """Tiny composition-style batch with one padded example."""
    exs = []
    for b in range(batch):
        m = side - (b % 2)
        r = rng.random((m, m)) < 0.4
        exs.append(tasks.TaskExample(r.reshape(-1), tasks.bool_compose(r, 2).reshape(-1),
                                     np.ones(m * m, bool), {"m": m}))
    return tasks.pad_batch(exs)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _global_flags() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help="output directory (default: $IHALAB_OUT)")
    g.add_argument("--preset", choices=tuple(tasks.PRESET_COUNTS), default="desk")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    g.add_argument("--config", default=None, help="JSON file of flag defaults")
    return g


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=tasks.TASKS, default="binary")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--optimizer", choices=trainer.OPTIMIZERS, default="sgd")
    p.add_argument("--P", type=int, default=None, help="pseudo-heads for IHA (default 2)")


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = argparse.ArgumentParser(prog="ihalab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[g], help="run construction checks")
    v.add_argument("--suite", choices=("all",) + tuple(SUITES), default="all")
    v.add_argument("--N", type=int, default=16)
    v.add_argument("--d", type=int, default=3)
    v.add_argument("--k", type=int, default=4)
    v.add_argument("--H", type=int, default=2)
    v.add_argument("--P", type=int, default=3)
    v.add_argument("--nmax", type=int, default=4)
    v.add_argument("--G", type=int, default=10)
    v.add_argument("--M", type=int, default=3)
    v.add_argument("--trials", type=int, default=50)
    v.add_argument("--trials-cpm3", dest="trials_cpm3", type=int, default=10)
    v.add_argument("--trials-rank", dest="trials_rank", type=int, default=20)
    v.add_argument("--golden", default=None, help="compare against a stored report file")
    v.add_argument("--save-golden", dest="save_golden", default=None)
    v.set_defaults(func=cmd_verify)

    gen = sub.add_parser("gen", parents=[g], help="generate a dataset")
    gen.add_argument("--task", choices=tasks.TASKS, default="binary")
    gen.add_argument("--gzip", action="store_true")
    gen.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[g], help="train one model")
    _train_flags(t)
    t.add_argument("--kind", choices=trainer.KINDS, default="mha")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--H", type=int, default=8)
    t.add_argument("--d", type=int, default=4)
    t.add_argument("--data", default=None, help="dataset directory written by `gen`")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", parents=[g], help="kinds x learning rates grid")
    _train_flags(s)
    s.add_argument("--kinds", nargs="+", choices=trainer.KINDS, default=list(trainer.KINDS))
    s.add_argument("--lrs", nargs="+", type=float, default=[1e-3, 1e-4])
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("flops", parents=[g], help="attention FLOP report")
    f.add_argument("--N", type=int, required=True)
    f.add_argument("--d", type=int, default=128)
    f.add_argument("--H", type=int, default=20)
    f.add_argument("--P", type=int, default=4)
    f.add_argument("--schedule", choices=analysis.SCHEDULES, default="global")
    f.add_argument("--global-layer", dest="global_layer", choices=analysis.GLOBAL_LAYERS, default="mha")
    f.set_defaults(func=cmd_flops)

    pr = sub.add_parser("params", parents=[g], help="parameter-count table (CSV)")
    pr.add_argument("--H", type=int, default=8)
    pr.add_argument("--P", type=int, default=2)
    pr.add_argument("--N", type=int, default=64)
    pr.add_argument("--d", type=int, default=4)
    pr.add_argument("--kmax", type=int, default=16)
    pr.add_argument("--nmax", type=int, default=16)
    pr.set_defaults(func=cmd_params)

    gc = sub.add_parser("gradcheck", parents=[g], help="finite-difference check of both model kinds")
    gc.add_argument("--H", type=int, default=2)
    gc.add_argument("--d", type=int, default=2)
    gc.add_argument("--P", type=int, default=2)
    gc.add_argument("--trials", type=int, default=3)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(conf, dict):
            parser.error("config file must hold a JSON object")
        # re-parse with config values as defaults so explicit flags still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(conf) - known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**conf)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        return args.func(args)
    except (ConstraintError, ShapeError, DegenerateRowError, NonFiniteError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
