"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Run under pytest (``pytest tests/test_acceptance.py -s`` shows the summary
lines) or directly with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest

from ihalab import analysis, constructions as C, tasks as T, trainer as TR
from ihalab.attention import AttentionConfig, MhaParams, mha_forward
from ihalab.iha import IhaParams, embed_mha_as_iha, iha_forward, strictness_witness

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})", flush=True)


def graph(n, rng):
    a = np.triu(rng.random((n, n)) < 0.3, 1).astype(float)
    a = a + a.T + np.eye(n)
    return a / np.abs(np.linalg.eigvalsh(a)).max()


def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst, pairs = 0.0, 0
    for H, d, N, P in itertools.product((1, 2, 4), (2, 4), (1, 3, 8), (1, 2, 3)):
        m = MhaParams.random(rng, H, d)
        x = rng.normal(size=(N, H * d))
        got = iha_forward(x, embed_mha_as_iha(m, P), AttentionConfig(H, P))
        worst = max(worst, float(np.abs(got - mha_forward(x, m, AttentionConfig(H))).max()))
        pairs += 1
    dt = time.perf_counter() - t0
    ok = pairs >= 50 and worst <= 1e-10 and dt < 10
    record(1, "superset inclusion", ok, f"{pairs} pairs, max diff {worst:.2e}, {dt:.1f}s")
    return ok


def criterion_2():
    rng = np.random.default_rng(202)
    H, d, N = 2, 3, 5
    m = MhaParams.random(rng, H, d)
    ones = np.ones((N, 1))
    f = lambda v: mha_forward(ones * v, m, AttentionConfig(H))
    residual = 0.0
    for _ in range(10):
        x1, x2 = rng.normal(size=H * d), rng.normal(size=H * d)
        residual = max(residual, float(np.abs(f(x1) + f(x2) - f(x1 + x2)).max()))
    w = strictness_witness(H, d, base=m)
    g = lambda v: iha_forward(ones * v, w, AttentionConfig(H, 2))
    gaps = []
    for _ in range(10):
        x = rng.normal(size=H * d)
        x /= np.linalg.norm(x)
        gaps.append(float(np.abs(g(2 * x) - 2 * g(x)).max()))
    ok = residual <= 1e-9 and max(gaps) > 1e-3
    record(2, "strictness", ok, f"MHA residual {residual:.2e}, witness max |f(2x)-2f(x)| {max(gaps):.3f}")
    return ok


def criterion_3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst, cases, counts_ok = 0.0, 0, True
    for N, d, k in itertools.product((8, 16, 32), (2, 3), (1, 2, 4, 9, 16)):
        if k * d > N:
            continue
        a, x = graph(N, rng), rng.normal(size=(N, d))
        _, rm = C.build_mha_polyfilter(a, x, k)
        _, ri = C.build_iha_polyfilter(a, x, k)
        h = math.ceil(math.sqrt(k))
        counts_ok &= rm.param_count_constructed == 2 * N * (N + d) * k + d * (N + d) * k
        counts_ok &= ri.param_count_constructed == 2 * N * (N + d) * h + d * (N + d) * h * h + 4 * h ** 3
        worst = max(worst, rm.max_abs_error, ri.max_abs_error)
        cases += 1
    # worked example: k = 4 gives [X, AX, A^2 X, A^3 X]
    a, x = graph(16, rng), rng.normal(size=(16, 3))
    want = np.concatenate([np.linalg.matrix_power(a, j) @ x for j in range(4)], axis=1)
    p, _ = C.build_iha_polyfilter(a, x, 4)
    got = iha_forward(np.concatenate([x, np.eye(16)], 1), p, AttentionConfig(2, 2, score_mode="linear"),
                      ordering="pseudo_major")
    worked = float(np.abs(got - want).max())
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and counts_ok and worked <= 1e-9 and dt < 30
    record(3, "polynomial filters", ok,
           f"{cases} cases, max err {worst:.2e}, tallies exact={counts_ok}, k=4 example err {worked:.1e}, {dt:.1f}s")
    return ok


def criterion_4():
    t0 = time.perf_counter()
    paper = np.array([[1, 2, 3, 4], [2, 3, 4, 1], [3, 4, 1, 2], [4, 1, 2, 3]], float)
    ok_a = all(np.array_equal(C.cpm3_workspace(p, [1, 2, 3, 4])[:, :4], paper)
               for p in (C.cpm3_mha_params(4), C.cpm3_iha_params(4)))
    rng = np.random.default_rng(404)
    ok_b, checked = True, 0
    for n in range(1, 11):
        params = (C.cpm3_mha_params(n), C.cpm3_iha_params(n))
        for _ in range(10):
            x = rng.integers(0, n, n)
            want = C.cpm3_count_oracle(x, 10, 3)
            for p in params:
                ws = C.cpm3_workspace(p, x)
                ok_b &= np.array_equal(ws[:, :n], C.cyclic_shift_workspace_oracle(x))
                ok_b &= np.array_equal(C.cpm3_mlp_eval(ws, n, 10, 3), want)
                checked += 1
    ok_c = C.cpm3_count_oracle([1, 2, 3], 10, 3).tolist() == [3, 3, 3]
    ws = C.cpm3_workspace(C.cpm3_iha_params(3), [1, 2, 3])
    ok_c &= C.cpm3_mlp_eval(ws, 3, 10, 3).tolist() == [3, 3, 3]
    dt = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and dt < 30
    record(4, "CPM-3", ok, f"(a) {ok_a}, (b) {ok_b} over {checked} runs, (c) {ok_c}, {dt:.1f}s")
    return ok


def criterion_5():
    rng = np.random.default_rng(505)
    same, apart = 0.0, math.inf
    for _ in range(20):
        H, d, P, N = int(rng.integers(1, 4)), 2 * int(rng.integers(1, 3)), int(rng.integers(2, 4)), int(rng.integers(2, 7))
        base = MhaParams.random(rng, H, d)
        a = lambda: rng.normal(size=(H, H, P))
        p = IhaParams(base, a(), a(), a(), rng.normal(size=(H, H * P)))
        x = rng.normal(size=(N, H * d))
        cfg = AttentionConfig(H, P)
        same = max(same, float(np.abs(iha_forward(x, p, cfg) - iha_forward(x, p, cfg, "pseudo_major")).max()))
        rot = AttentionConfig(H, P, rotary_theta=10.0)
        apart = min(apart, float(np.abs(iha_forward(x, p, rot) - iha_forward(x, p, rot, "pseudo_major")).max()))
    ok = same <= 1e-10 and apart > 1e-6
    record(5, "ordering equivalence", ok, f"no positions: max diff {same:.2e}; rotary: min diff {apart:.2e}")
    return ok


def criterion_6():
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    worst, runs = 0.0, 0
    for kind in ("mha", "iha"):
        cfg = TR.ModelConfig(kind, heads=2, pseudo=2 if kind == "iha" else 1, d=2, positions=4)
        for t in range(10):
            exs = []
            for _ in range(2):
                m = int(rng.integers(2, 4))
                r = rng.random((m, m)) < 0.4
                exs.append(T.TaskExample(r.reshape(-1), T.bool_compose(r, 2).reshape(-1), np.ones(m * m, bool), {"m": m}))
            rep = TR.model_gradcheck(cfg, T.pad_batch(exs), seed=t, eps=1e-5, tol=1e-4)
            worst = max(worst, rep.max_rel_error)
            runs += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 60
    record(6, "gradients", ok, f"{runs} gradchecks, max rel error {worst:.2e}, {dt:.1f}s")
    return ok


def criterion_7():
    w = analysis.flop_report(8192, 128, 20, 4, "hybrid_4to1")
    ratio = analysis.flop_report(4096, 64, 8, 2, "hybrid_4to1")["ratio"]
    tally_ok = True
    for H, P in [(1, 1), (2, 3), (8, 2), (20, 20)]:
        r = np.zeros((H, H, P))
        p = IhaParams(MhaParams(np.zeros((H, 1, 1)), np.zeros((H, 1, 1)), np.zeros((H, 1, 1))), r, r, r,
                      np.zeros((H, H * P)))
        direct = p.alpha_q.size + p.alpha_k.size + p.alpha_v.size + p.collapse.size
        tally_ok &= analysis.iha_extra_params(H, P) == direct == p.mixing_param_count()
    ok = w["window"] == 256 and abs(w["ratio"] - 0.6) <= 1e-12 and abs(ratio - 0.6) <= 1e-12 and tally_ok
    record(7, "FLOP/param analysis", ok, f"W={w['window']}, hybrid ratio {w['ratio']:.4f}, 4H^2P tally {tally_ok}")
    return ok


# Adam is used here; plain SGD at lr=1e-3 stalls near 0.76x the initial BCE
# after 30 epochs (see the decisions ledger).
DESK_TRAIN = dict(max_epochs=30, patience=10, batch=32, seed=0, optimizer="adam")


def criterion_8():
    t0 = time.perf_counter()
    spec = T.preset_spec("binary", "desk", seed=0)
    data = T.load_or_generate(spec)
    balance = float(np.concatenate([e.targets for e in data["train"]]).mean())
    lines, ok = [], 0.35 <= balance <= 0.65
    for kind in ("mha", "iha"):
        cfg = TR.model_for_task(spec, kind)
        res, _ = TR.train(cfg, data, 1e-3, **DESK_TRAIN)
        again, _ = TR.train(cfg, data, 1e-3, **{**DESK_TRAIN, "max_epochs": 1})
        repro = again.curves[0] == res.curves[0] and again.initial_train_loss == res.initial_train_loss
        ratio = res.final_train_loss / res.initial_train_loss
        ok &= ratio <= 0.7 and res.test_accuracy > 0.55 and res.epochs_run <= 30 and repro
        lines.append(f"{kind}: BCE {res.initial_train_loss:.3f}->{res.final_train_loss:.3f} (x{ratio:.2f}), "
                     f"test acc {res.test_accuracy:.3f}, repro {repro}")
    dt = time.perf_counter() - t0
    ok &= dt < 15 * 60
    record(8, "desk-scale training", ok, f"labels {balance:.3f} positive; " + "; ".join(lines) + f"; {dt:.0f}s")
    return ok


def criterion_9():
    worst_excess, runs = 0, 0
    for N, d, k in [(16, 3, 4), (32, 2, 9), (32, 2, 16), (8, 2, 4)]:
        rep = C.rank_bound_check(N, d, k, trials=20, seed=909, tol=1e-9)
        worst_excess = max(worst_excess, max(rep["ranks"]) - k * d)
        runs += len(rep["ranks"])
    ok = worst_excess <= 0
    record(9, "rank bound", ok, f"{runs} instances, max rank - k*d = {worst_excess}")
    return ok


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9]


@pytest.mark.parametrize("n", range(1, 10))
def test_criterion(n):
    assert CRITERIA[n - 1]()


if __name__ == "__main__":
    import sys

    results = [c() for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
