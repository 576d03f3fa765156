"""Hot inner loops, each in two flavours: a numba ``@njit`` kernel and a
vectorised numpy twin.

The active backend is chosen once from the ``IHALAB_BACKEND`` environment
variable (``numba`` or ``numpy``; default ``numba`` when importable) and can
be switched at runtime with :func:`use_backend`.  Both paths must agree to
rounding; ``tests/test_kernels.py`` checks that, and
``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


_JIT = dict(cache=True, nogil=True)

# relative slack used to decide argmax ties in hard attention
TIE_RTOL = 1e-12


def _initial_backend() -> str:
    name = os.environ.get("IHALAB_BACKEND", "numba" if HAVE_NUMBA else "numpy").lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"IHALAB_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        name = "numpy"
    return name


_backend = _initial_backend()


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


# ---------------------------------------------------------------------------
# masked softmax over rows
# ---------------------------------------------------------------------------


@njit(**_JIT)
def _softmax_shift_nb(s, mask):
    # row-max shift; masked entries become -inf so exp maps them to 0
    m, n = s.shape
    out = np.empty((m, n))
    for i in range(m):
        mx = -np.inf
        seen = False
        for j in range(n):
            if mask[i, j]:
                seen = True
                # NaN scores must propagate rather than look masked
                if s[i, j] > mx or s[i, j] != s[i, j]:
                    mx = s[i, j]
        if not seen:
            return out, i
        for j in range(n):
            out[i, j] = s[i, j] - mx if mask[i, j] else -np.inf
    return out, -1


@njit(**_JIT)
def _normalise_rows_nb(e):
    m, n = e.shape
    for i in range(m):
        tot = 0.0
        for j in range(n):
            tot += e[i, j]
        inv = 1.0 / tot
        for j in range(n):
            e[i, j] *= inv


def _softmax_rows_nb(s, mask):
    # numba's scalar exp is libm-bound; numpy's vectorised exp is ~5x faster,
    # so only the two reduction passes are compiled
    out, bad = _softmax_shift_nb(s, mask)
    if bad >= 0:
        return out, bad
    np.exp(out, out=out)
    _normalise_rows_nb(out)
    return out, -1


def _softmax_rows_np(s, mask):
    visible = mask.any(axis=1)
    if not visible.all():
        return None, int(np.argmin(visible))
    shifted = np.where(mask, s, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) == 0 exactly on masked entries
    return e / e.sum(axis=1, keepdims=True), -1


def softmax_rows_2d(s: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Row softmax of a 2-D float array restricted to ``mask``.

    Returns ``(probs, bad_row)`` where ``bad_row`` is -1 unless some row is
    fully masked (then ``probs`` is unspecified).
    """
    s = np.ascontiguousarray(s, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _backend == "numba":
        return _softmax_rows_nb(s, mask)
    return _softmax_rows_np(s, mask)


@njit(**_JIT)
def _softmax_backward_nb(y, g):
    m, n = y.shape
    out = np.empty((m, n))
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def _softmax_backward_np(y, g):
    return y * (g - np.sum(g * y, axis=1, keepdims=True))


def softmax_backward_2d(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the row softmax: ``y * (g - <g, y>)``."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _backend == "numba":
        return _softmax_backward_nb(y, g)
    return _softmax_backward_np(y, g)


# ---------------------------------------------------------------------------
# hard attention: uniform over the argmax set
# ---------------------------------------------------------------------------


@njit(**_JIT)
def _hard_rows_nb(s, mask, rtol):
    m, n = s.shape
    out = np.zeros((m, n))
    bad = -1
    for i in range(m):
        mx = -np.inf
        for j in range(n):
            if mask[i, j] and s[i, j] > mx:
                mx = s[i, j]
        if mx == -np.inf:
            bad = i
            break
        thr = mx - rtol * max(1.0, abs(mx))
        cnt = 0
        for j in range(n):
            if mask[i, j] and s[i, j] >= thr:
                cnt += 1
        w = 1.0 / cnt
        for j in range(n):
            if mask[i, j] and s[i, j] >= thr:
                out[i, j] = w
    return out, bad


def _hard_rows_np(s, mask, rtol):
    visible = mask.any(axis=1)
    if not visible.all():
        return None, int(np.argmin(visible))
    masked = np.where(mask, s, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    top = mask & (masked >= mx - rtol * np.maximum(1.0, np.abs(mx)))
    return top / top.sum(axis=1, keepdims=True), -1


def hard_rows_2d(s: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, int]:
    s = np.ascontiguousarray(s, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _backend == "numba":
        return _hard_rows_nb(s, mask, TIE_RTOL)
    return _hard_rows_np(s, mask, TIE_RTOL)


# ---------------------------------------------------------------------------
# rank by row reduction with partial pivoting
# ---------------------------------------------------------------------------


@njit(**_JIT)
def _row_reduce_rank_nb(a, tol):
    a = a.copy()
    m, n = a.shape
    scale = 0.0
    for i in range(m):
        for j in range(n):
            if abs(a[i, j]) > scale:
                scale = abs(a[i, j])
    if scale == 0.0:
        return 0
    thr = tol * scale
    rank = 0
    row = 0
    for col in range(n):
        if row >= m:
            break
        piv = row
        best = abs(a[row, col])
        for r in range(row + 1, m):
            if abs(a[r, col]) > best:
                best = abs(a[r, col])
                piv = r
        if best <= thr:
            continue
        if piv != row:
            for j in range(n):
                tmp = a[row, j]
                a[row, j] = a[piv, j]
                a[piv, j] = tmp
        for r in range(row + 1, m):
            f = a[r, col] / a[row, col]
            if f != 0.0:
                for j in range(col, n):
                    a[r, j] -= f * a[row, j]
        row += 1
        rank += 1
    return rank


def _row_reduce_rank_np(a, tol):
    a = np.array(a, dtype=np.float64, copy=True)
    m, n = a.shape
    scale = np.abs(a).max() if a.size else 0.0
    if scale == 0.0:
        return 0
    thr = tol * scale
    row = 0
    for col in range(n):
        if row >= m:
            break
        piv = row + int(np.argmax(np.abs(a[row:, col])))
        if abs(a[piv, col]) <= thr:
            continue
        if piv != row:
            a[[row, piv]] = a[[piv, row]]
        f = a[row + 1 :, col] / a[row, col]
        a[row + 1 :, col:] -= np.outer(f, a[row, col:])
        row += 1
    return row


def row_reduce_rank(a: np.ndarray, tol: float) -> int:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if _backend == "numba":
        return int(_row_reduce_rank_nb(a, float(tol)))
    return int(_row_reduce_rank_np(a, float(tol)))


# ---------------------------------------------------------------------------
# boolean relation composition
# ---------------------------------------------------------------------------


@njit(**_JIT)
def _bool_compose_nb(r, hops):
    m = r.shape[0]
    cur = r.copy()
    for _ in range(hops - 1):
        nxt = np.zeros((m, m), dtype=np.bool_)
        for i in range(m):
            for j in range(m):
                for k in range(m):
                    if cur[i, k] and r[k, j]:
                        nxt[i, j] = True
                        break
        cur = nxt
    return cur


def _bool_compose_np(r, hops):
    cur = r.copy()
    ri = r.astype(np.int64)
    for _ in range(hops - 1):
        cur = (cur.astype(np.int64) @ ri) > 0
    return cur


def bool_compose_kernel(r: np.ndarray, hops: int) -> np.ndarray:
    r = np.ascontiguousarray(r, dtype=np.bool_)
    if _backend == "numba":
        return _bool_compose_nb(r, int(hops))
    return _bool_compose_np(r, int(hops))


# ---------------------------------------------------------------------------
# CPM-3 counting
# ---------------------------------------------------------------------------


@njit(**_JIT)
def _cpm3_counts_nb(x, g, m):
    n = x.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        c = 0
        for j1 in range(n):
            base = x[i] + g * x[j1]
            for j2 in range(n):
                if (base + x[j2]) % m == 0:
                    c += 1
        out[i] = c
    return out


def _cpm3_counts_np(x, g, m):
    tot = x[:, None, None] + g * x[None, :, None] + x[None, None, :]
    return (tot % m == 0).sum(axis=(1, 2)).astype(np.int64)


def cpm3_counts_kernel(x: np.ndarray, g: int, m: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.int64)
    if _backend == "numba":
        return _cpm3_counts_nb(x, int(g), int(m))
    return _cpm3_counts_np(x, int(g), int(m))
