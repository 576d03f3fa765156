"""Dense float64 tensor primitives.

Tensors are plain C-ordered ``numpy.ndarray`` objects of dtype float64.
Functions here validate shapes up front so callers get an error naming the
offending shapes instead of a numpy broadcasting message.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DegenerateRowError, ShapeError

# name -> (einsum subscripts, operand ranks)
CONTRACTIONS: dict[str, tuple[str, tuple[int, ...]]] = {
    # alpha[m,h,p], per-head projections[n,m,d] -> pseudo tensors[h,p,n,d]
    "mix_heads": ("mhp,nmd->hpnd", (3, 3)),
    # block-diagonal collapse R[h,p] over P[h,n,p,d] -> O[h,n,d]
    "collapse": ("hp,hnpd->hnd", (2, 4)),
    # general collapse R[h, q] with q = h'*P + p over P[h',n,p,d] -> O[h,n,d]
    "collapse_general": ("hq,qnd->hnd", (2, 3)),
}


def as_tensor(a) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim and 0 in arr.shape:
        raise ShapeError(f"tensor shape entries must be >= 1, got {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(s, mask=None) -> np.ndarray:
    """Row-wise softmax over the unmasked entries; masked entries are exactly 0.

    ``s`` may have leading batch axes; rows are taken along the last axis.
    """
    s = as_tensor(s)
    if mask is None:
        mask = np.ones(s.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    n = s.shape[-1]
    out, bad = kernels.softmax_rows_2d(s.reshape(-1, n), mask.reshape(-1, n))
    if bad >= 0:
        raise DegenerateRowError(f"softmax_rows: row {bad} has every entry masked")
    return out.reshape(s.shape)


def contract(name: str, *operands) -> np.ndarray:
    """Evaluate one of the named contractions in :data:`CONTRACTIONS`."""
    try:
        subscripts, ranks = CONTRACTIONS[name]
    except KeyError:
        raise ShapeError(f"unknown contraction {name!r}; known: {sorted(CONTRACTIONS)}") from None
    ops = [as_tensor(o) for o in operands]
    if len(ops) != len(ranks) or any(o.ndim != r for o, r in zip(ops, ranks)):
        raise ShapeError(f"{name}: expected ranks {ranks}, got shapes {[o.shape for o in ops]}")
    lhs = subscripts.split("->")[0].split(",")
    sizes: dict[str, int] = {}
    for sub, op in zip(lhs, ops):
        for ch, size in zip(sub, op.shape):
            if sizes.setdefault(ch, size) != size:
                raise ShapeError(
                    f"{name}: index {ch!r} has conflicting sizes in shapes {[o.shape for o in ops]}"
                )
    return np.einsum(subscripts, *ops)


def numerical_rank(a, tol: float = 1e-9) -> int:
    """Number of pivots accepted by row reduction with partial pivoting.

    A pivot counts iff its magnitude exceeds ``tol * max|a|``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"numerical_rank expects a matrix, got shape {a.shape}")
    return kernels.row_reduce_rank(a, tol)
