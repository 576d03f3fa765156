"""Multi-head attention and its score variants (softmax, linear, hard),
causal / sliding-window masks and rotary positions.

Per-head projections are stored stacked: ``W_Q`` has shape ``(H, D_in, d_k)``
and ``W_V`` shape ``(H, D_in, d_v)``.  Trained models use ``D_in = H*d`` and
``d_k = d_v = d``; the theorem constructions need other widths (e.g. an
``N + d`` input and wide value heads) and no output projection, which is
why ``W_O`` may be ``None``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConstraintError, DegenerateRowError, ShapeError

SCORE_MODES = ("softmax", "linear", "hard")
MASK_MODES = ("none", "causal")


@dataclass(frozen=True)
class AttentionConfig:
    """Mode switches shared by MHA and IHA.

    ``window`` is measured in original tokens; IHA multiplies it by ``P``
    to get the window over virtual tokens.  ``rotary_theta`` of ``None``
    disables rotary positions.
    """

    heads: int
    pseudo: int = 1
    score_mode: str = "softmax"
    mask_mode: str = "none"
    window: int | None = None
    rotary_theta: float | None = None

    def __post_init__(self):
        if self.heads < 1 or self.pseudo < 1:
            raise ConstraintError("heads and pseudo must be >= 1")
        if self.score_mode not in SCORE_MODES:
            raise ConstraintError(f"score_mode must be one of {SCORE_MODES}")
        if self.mask_mode not in MASK_MODES:
            raise ConstraintError(f"mask_mode must be one of {MASK_MODES}")
        if self.window is not None and self.window < 1:
            raise ConstraintError("window must be a positive integer")
        if self.rotary_theta is not None and self.rotary_theta <= 0:
            raise ConstraintError("rotary theta must be positive")

    def check_length(self, n: int) -> None:
        if self.window is not None and self.window > n:
            raise ConstraintError(f"window {self.window} exceeds sequence length {n}")


@dataclass
class MhaParams:
    W_Q: np.ndarray  # (H, D_in, d_k)
    W_K: np.ndarray  # (H, D_in, d_k)
    W_V: np.ndarray  # (H, D_in, d_v)
    W_O: np.ndarray | None = None  # (H*d_v, D_out)

    def __post_init__(self):
        self.W_Q = np.asarray(self.W_Q, dtype=np.float64)
        self.W_K = np.asarray(self.W_K, dtype=np.float64)
        self.W_V = np.asarray(self.W_V, dtype=np.float64)
        if self.W_O is not None:
            self.W_O = np.asarray(self.W_O, dtype=np.float64)
        if not (self.W_Q.ndim == self.W_K.ndim == self.W_V.ndim == 3):
            raise ShapeError("W_Q, W_K, W_V must be stacked (H, D_in, width) arrays")
        if self.W_Q.shape != self.W_K.shape:
            raise ShapeError(f"W_Q {self.W_Q.shape} and W_K {self.W_K.shape} differ")
        if self.W_V.shape[:2] != self.W_Q.shape[:2]:
            raise ShapeError(f"W_V {self.W_V.shape} does not match W_Q {self.W_Q.shape}")
        if self.W_O is not None and self.W_O.shape[0] != self.heads * self.d_v:
            raise ShapeError(f"W_O {self.W_O.shape} needs {self.heads * self.d_v} rows")

    @property
    def heads(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_Q.shape[1]

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[2]

    @property
    def d_v(self) -> int:
        return self.W_V.shape[2]

    def num_params(self) -> int:
        n = self.W_Q.size + self.W_K.size + self.W_V.size
        return n + (0 if self.W_O is None else self.W_O.size)

    def named(self) -> dict[str, np.ndarray]:
        out = {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}
        if self.W_O is not None:
            out["W_O"] = self.W_O
        return out

    @classmethod
    def random(cls, rng: np.random.Generator, heads: int, d: int, d_in: int | None = None,
               out_proj: bool = True) -> "MhaParams":
        d_in = heads * d if d_in is None else d_in
        s = 1.0 / math.sqrt(d_in)
        return cls(
            rng.normal(0, s, (heads, d_in, d)),
            rng.normal(0, s, (heads, d_in, d)),
            rng.normal(0, s, (heads, d_in, d)),
            rng.normal(0, 1.0 / math.sqrt(heads * d), (heads * d, heads * d)) if out_proj else None,
        )


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def hard_attention_rows(s, mask=None) -> np.ndarray:
    """Zero-temperature attention: each row is uniform over its argmax set."""
    s = np.asarray(s, dtype=np.float64)
    mask = np.ones(s.shape, dtype=bool) if mask is None else np.broadcast_to(mask, s.shape)
    n = s.shape[-1]
    out, bad = kernels.hard_rows_2d(s.reshape(-1, n), mask.reshape(-1, n))
    if bad >= 0:
        raise DegenerateRowError(f"hard_attention_rows: row {bad} is fully masked")
    return out.reshape(s.shape)


def linear_attention_matrix(x_hat, Wq, Wk) -> np.ndarray:
    """``x_hat Wq Wk^T x_hat^T`` with no normalisation and no scaling."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    Wq = np.asarray(Wq, dtype=np.float64)
    Wk = np.asarray(Wk, dtype=np.float64)
    if Wq.shape != Wk.shape or x_hat.shape[1] != Wq.shape[0]:
        raise ShapeError(f"linear_attention_matrix: x_hat {x_hat.shape}, Wq {Wq.shape}, Wk {Wk.shape}")
    return (x_hat @ Wq) @ (x_hat @ Wk).T


def rotary_positions(t, theta: float, positions) -> np.ndarray:
    """Rotate consecutive coordinate pairs ``(2j, 2j+1)`` by ``pos * theta**(-2j/d)``."""
    t = np.asarray(t, dtype=np.float64)
    L, d = t.shape[-2:]
    if d % 2:
        raise ShapeError(f"rotary positions need an even width, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (L,):
        raise ShapeError(f"expected {L} positions, got shape {pos.shape}")
    freq = theta ** (-2.0 * np.arange(d // 2) / d)
    ang = pos[:, None] * freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x0, x1 = t[..., 0::2], t[..., 1::2]
    out = np.empty_like(t)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def sliding_window_mask(Lq: int, Lk: int, window_virtual: int | None, causal: bool) -> np.ndarray:
    """Visibility of key ``j`` from query ``i``: ``j <= i`` if causal, and ``i - j < window``."""
    if window_virtual is not None and window_virtual < 1:
        raise ConstraintError("window must be >= 1")
    i = np.arange(Lq)[:, None]
    j = np.arange(Lk)[None, :]
    vis = np.ones((Lq, Lk), dtype=bool)
    if causal:
        vis &= j <= i
    if window_virtual is not None:
        vis &= (i - j) < window_virtual
    return vis


def attend(q, k, v, score_mode: str, mask=None, scale: float | None = None) -> np.ndarray:
    """One head (or a stack of heads on leading axes) of attention."""
    s = q @ np.swapaxes(k, -1, -2)
    if score_mode == "linear":
        if mask is not None:
            s = np.where(mask, s, 0.0)
        return s @ v
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    s = s * scale
    if score_mode == "softmax":
        mask_ = np.ones(s.shape, dtype=bool) if mask is None else np.broadcast_to(mask, s.shape)
        n = s.shape[-1]
        w, bad = kernels.softmax_rows_2d(s.reshape(-1, n), mask_.reshape(-1, n))
        if bad >= 0:
            raise DegenerateRowError(f"attention row {bad} is fully masked")
        w = w.reshape(s.shape)
    elif score_mode == "hard":
        w = hard_attention_rows(s, mask)
    else:
        raise ConstraintError(f"unknown score mode {score_mode!r}")
    return w @ v


def project_heads(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``x (N, D_in)`` times stacked ``W (H, D_in, w)`` -> ``(H, N, w)``."""
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"input {x.shape} does not match projection {W.shape}")
    return np.einsum("nD,hDw->hnw", x, W)


def concat_heads(o: np.ndarray) -> np.ndarray:
    """``(H, N, w)`` -> ``(N, H*w)`` with head-major column blocks."""
    H, N, w = o.shape
    return np.transpose(o, (1, 0, 2)).reshape(N, H * w)


def mha_forward(x, params: MhaParams, cfg: AttentionConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.pseudo != 1:
        raise ConstraintError("mha_forward needs pseudo == 1; use iha_forward")
    if cfg.heads != params.heads:
        raise ShapeError(f"config has {cfg.heads} heads, params have {params.heads}")
    N = x.shape[0]
    cfg.check_length(N)
    q = project_heads(x, params.W_Q)
    k = project_heads(x, params.W_K)
    v = project_heads(x, params.W_V)
    if cfg.rotary_theta is not None:
        pos = np.arange(N)
        q = rotary_positions(q, cfg.rotary_theta, pos)
        k = rotary_positions(k, cfg.rotary_theta, pos)
    mask = None
    if cfg.mask_mode == "causal" or cfg.window is not None:
        mask = sliding_window_mask(N, N, cfg.window, cfg.mask_mode == "causal")
    o = concat_heads(attend(q, k, v, cfg.score_mode, mask))
    return o if params.W_O is None else o @ params.W_O
