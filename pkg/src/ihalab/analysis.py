"""Closed-form parameter tallies and attention FLOP accounting."""

from __future__ import annotations

import math

from .errors import ConstraintError

SCHEDULES = ("global", "hybrid_4to1")
GLOBAL_LAYERS = ("mha", "iha")


def _ceil_sqrt(k: int) -> int:
    return math.isqrt(k - 1) + 1


def iha_extra_params(H: int, P: int) -> int:
    """Routers (3 * H*H*P) plus the general collapse (H * H*P)."""
    if H < 1 or P < 1:
        raise ConstraintError("H and P must be >= 1")
    return 4 * H * H * P


def polyfilter_mha_params(N: int, d: int, k: int) -> int:
    return 2 * N * (N + d) * k + d * (N + d) * k


def polyfilter_iha_params(N: int, d: int, k: int) -> int:
    h = _ceil_sqrt(k)
    return 2 * N * (N + d) * h + d * (N + d) * h * h + 4 * h ** 3


def polyfilter_param_counts(N: int, d: int, k: int, scan_max: int | None = None) -> dict:
    """Both tallies at ``k`` plus the smallest ``k`` where IHA is strictly cheaper.

    ``crossover_k`` is ``None`` when no ``k <= scan_max`` (default ``N``) wins.
    """
    if k < 1 or N < 1 or d < 1:
        raise ConstraintError("N, d and k must be >= 1")
    scan_max = N if scan_max is None else scan_max
    crossover = next((j for j in range(1, scan_max + 1)
                      if polyfilter_iha_params(N, d, j) < polyfilter_mha_params(N, d, j)), None)
    return {"mha": polyfilter_mha_params(N, d, k), "iha": polyfilter_iha_params(N, d, k),
            "crossover_k": crossover}


def cpm3_param_bounds(n_max: int) -> dict:
    """IHA upper bound and MHA lower bound; the square root is taken in reals
    and the upper bound rounded up to an integer."""
    if n_max < 1:
        raise ConstraintError("n_max must be >= 1")
    n = n_max
    tail = n * n * (n - 1) + n * n
    return {"iha_upper": math.ceil(37 * n * n * math.sqrt(n)) + tail,
            "mha_lower": 3 * n ** 3 + tail}


def cpm3_threshold(limit: int = 10_000) -> int | None:
    """Smallest ``n`` from which ``iha_upper < mha_lower`` holds up to ``limit``."""
    first = None
    for n in range(1, limit + 1):
        b = cpm3_param_bounds(n)
        if b["iha_upper"] < b["mha_lower"]:
            first = n if first is None else first
        else:
            first = None
    return first


def _layer_flops(H: int, Lq: int, Lk: int, d: int) -> int:
    return 2 * H * Lq * Lk * d


def flop_report(N: int, d: int, H: int, P: int, schedule: str = "global",
                global_layer: str = "mha") -> dict:
    """Attention-score plus weighted-sum FLOPs relative to global MHA (``2 H N^2 d``).

    ``global``: every layer is global IHA over ``N*P`` virtual tokens.
    ``hybrid_4to1``: four local IHA layers with window ``W = floor(N / (2 P^2))``
    (``W*P`` virtual keys per query) and one global layer, which is MHA by
    default or IHA with ``global_layer="iha"``.
    """
    if schedule not in SCHEDULES:
        raise ConstraintError(f"schedule must be one of {SCHEDULES}")
    if global_layer not in GLOBAL_LAYERS:
        raise ConstraintError(f"global_layer must be one of {GLOBAL_LAYERS}")
    if min(N, d, H, P) < 1:
        raise ConstraintError("N, d, H and P must be >= 1")
    W = N // (2 * P * P)
    baseline = _layer_flops(H, N, N, d)
    global_iha = _layer_flops(H, N * P, N * P, d)
    report = {"N": N, "d": d, "H": H, "P": P, "schedule": schedule, "window": W,
              "baseline_flops": baseline}
    if schedule == "global":
        report.update(layers=[{"kind": "iha_global", "flops": global_iha}],
                      average_flops=global_iha, ratio=global_iha / baseline)
        return report
    if W < 1:
        raise ConstraintError(f"window floor(N/(2P^2)) = {W} < 1 for N={N}, P={P}")
    local = _layer_flops(H, N * P, W * P, d)
    top = baseline if global_layer == "mha" else global_iha
    layers = [{"kind": "iha_local", "flops": local}] * 4 + [{"kind": f"{global_layer}_global", "flops": top}]
    avg = (4 * local + top) / 5
    report.update(layers=layers, global_layer=global_layer, average_flops=avg,
                  ratio=avg / baseline, exact_window=(N % (2 * P * P) == 0))
    return report
