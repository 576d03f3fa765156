"""Interleaved head attention.

Each head builds ``P`` pseudo-queries/keys/values as learned combinations of
all ``H`` heads' projections, runs ordinary attention over the ``N*P``
virtual tokens, and a collapse map folds the ``H*P`` pseudo outputs back to
``H`` heads.

Two orderings of the virtual sequence are supported:

* ``"interleaved"``: virtual index ``n*P + p`` (token-major, the layout used
  with rotary positions);
* ``"pseudo_major"``: virtual index ``p*N + n`` (all of pseudo 0, then
  pseudo 1, ...).

Masks are defined on token/pseudo pairs through the interleaved index and
carried along with the permutation, so without positional phases the two
orderings produce the same collapsed output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import (AttentionConfig, MhaParams, attend, concat_heads,
                        project_heads, rotary_positions, sliding_window_mask)
from .errors import ConstraintError, ShapeError
from .tensor import contract

ORDERINGS = ("interleaved", "pseudo_major")


@dataclass
class IhaParams:
    base: MhaParams
    alpha_q: np.ndarray  # (H, H, P): source head m, target head h, pseudo j
    alpha_k: np.ndarray
    alpha_v: np.ndarray
    collapse: np.ndarray  # (H, H*P); column h'*P + j reads pseudo j of head h'

    def __post_init__(self):
        H = self.base.heads
        for name in ("alpha_q", "alpha_k", "alpha_v", "collapse"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        P = self.alpha_q.shape[-1] if self.alpha_q.ndim == 3 else 0
        if P < 1:
            raise ShapeError(f"alpha_q must be (H, H, P), got {self.alpha_q.shape}")
        for name in ("alpha_q", "alpha_k", "alpha_v"):
            if getattr(self, name).shape != (H, H, P):
                raise ShapeError(f"{name} must have shape {(H, H, P)}, got {getattr(self, name).shape}")
        if self.collapse.shape != (H, H * P):
            raise ShapeError(f"collapse must have shape {(H, H * P)}, got {self.collapse.shape}")

    @property
    def heads(self) -> int:
        return self.base.heads

    @property
    def pseudo(self) -> int:
        return self.alpha_q.shape[-1]

    def mixing_param_count(self) -> int:
        return self.alpha_q.size + self.alpha_k.size + self.alpha_v.size + self.collapse.size

    def num_params(self) -> int:
        return self.base.num_params() + self.mixing_param_count()

    def named(self) -> dict[str, np.ndarray]:
        out = self.base.named()
        out.update(alpha_q=self.alpha_q, alpha_k=self.alpha_k, alpha_v=self.alpha_v,
                   collapse=self.collapse)
        return out


def identity_router(heads: int, pseudo: int) -> np.ndarray:
    """``alpha[m, h, j] = 1[m == h]`` for every pseudo ``j``."""
    eye = np.eye(heads)
    return np.repeat(eye[:, :, None], pseudo, axis=2)


def block_diagonal_collapse(r) -> np.ndarray:
    """Lift a per-head ``(H, P)`` collapse to the general ``(H, H*P)`` form.

    Head ``h`` reads only its own pseudo block.
    """
    r = np.asarray(r, dtype=np.float64)
    H, P = r.shape
    out = np.zeros((H, H * P))
    for h in range(H):
        out[h, h * P:(h + 1) * P] = r[h]
    return out


def select_pseudo(heads: int, pseudo: int, index: int = 0) -> np.ndarray:
    """General collapse in which every head reads only its own pseudo ``index``."""
    r = np.zeros((heads, pseudo))
    r[:, index] = 1.0
    return block_diagonal_collapse(r)


# ---------------------------------------------------------------------------
# pseudo-head mixing and orderings
# ---------------------------------------------------------------------------


def mix_pseudo(x, params: IhaParams, which: str) -> np.ndarray:
    """Pseudo tensors ``(H, P, N, w)``: entry ``(h, j) = sum_m alpha[m,h,j] x W^(m)``."""
    W, alpha = {
        "Q": (params.base.W_Q, params.alpha_q),
        "K": (params.base.W_K, params.alpha_k),
        "V": (params.base.W_V, params.alpha_v),
    }[which]
    per_head = project_heads(np.asarray(x, dtype=np.float64), W)  # (H, N, w)
    return contract("mix_heads", alpha, np.transpose(per_head, (1, 0, 2)))


def merge_interleaved(t) -> np.ndarray:
    """``(H, P, N, w)`` -> ``(H, N*P, w)``; virtual token ``n*P + p`` is pseudo ``p`` of token ``n``."""
    H, P, N, w = t.shape
    return np.ascontiguousarray(np.transpose(t, (0, 2, 1, 3))).reshape(H, N * P, w)


def unmerge_interleaved(t, pseudo: int) -> np.ndarray:
    H, L, w = t.shape
    if L % pseudo:
        raise ShapeError(f"length {L} is not a multiple of P={pseudo}")
    return np.ascontiguousarray(np.transpose(t.reshape(H, L // pseudo, pseudo, w), (0, 2, 1, 3)))


def stack_pseudo_major(t) -> np.ndarray:
    """``(H, P, N, w)`` -> ``(H, P*N, w)``; virtual token ``p*N + n`` is pseudo ``p`` of token ``n``."""
    H, P, N, w = t.shape
    return np.ascontiguousarray(t).reshape(H, P * N, w)


def unstack_pseudo_major(t, pseudo: int) -> np.ndarray:
    H, L, w = t.shape
    if L % pseudo:
        raise ShapeError(f"length {L} is not a multiple of P={pseudo}")
    return t.reshape(H, pseudo, L // pseudo, w)


def pseudo_major_to_interleaved(n: int, pseudo: int) -> np.ndarray:
    """``perm[s]`` = interleaved index of the virtual token at pseudo-major index ``s``."""
    s = np.arange(n * pseudo)
    p, tok = np.divmod(s, n)
    return tok * pseudo + p


def virtual_mask(n: int, pseudo: int, cfg: AttentionConfig, ordering: str) -> np.ndarray | None:
    if cfg.mask_mode != "causal" and cfg.window is None:
        return None
    win = None if cfg.window is None else cfg.window * pseudo
    mask = sliding_window_mask(n * pseudo, n * pseudo, win, cfg.mask_mode == "causal")
    if ordering == "pseudo_major":
        perm = pseudo_major_to_interleaved(n, pseudo)
        mask = mask[np.ix_(perm, perm)]
    return mask


def iha_forward(x, params: IhaParams, cfg: AttentionConfig, ordering: str = "interleaved") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if ordering not in ORDERINGS:
        raise ConstraintError(f"ordering must be one of {ORDERINGS}")
    H, P = params.heads, params.pseudo
    if cfg.heads != H or cfg.pseudo != P:
        raise ShapeError(f"config (H={cfg.heads}, P={cfg.pseudo}) does not match params (H={H}, P={P})")
    N = x.shape[0]
    cfg.check_length(N)
    order = merge_interleaved if ordering == "interleaved" else stack_pseudo_major
    q = order(mix_pseudo(x, params, "Q"))
    k = order(mix_pseudo(x, params, "K"))
    v = order(mix_pseudo(x, params, "V"))
    if cfg.rotary_theta is not None:
        pos = np.arange(N * P)
        q = rotary_positions(q, cfg.rotary_theta, pos)
        k = rotary_positions(k, cfg.rotary_theta, pos)
    o = attend(q, k, v, cfg.score_mode, virtual_mask(N, P, cfg, ordering))
    pseudo_out = (unmerge_interleaved(o, P) if ordering == "interleaved"
                  else unstack_pseudo_major(o, P))  # (H, P, N, d_v)
    collapsed = contract("collapse_general", params.collapse,
                         pseudo_out.reshape(H * P, N, pseudo_out.shape[-1]))
    out = concat_heads(collapsed)
    return out if params.base.W_O is None else out @ params.base.W_O


# ---------------------------------------------------------------------------
# MHA embedding and the strictness witness
# ---------------------------------------------------------------------------


def embed_mha_as_iha(m: MhaParams, pseudo: int, read: int | None = None) -> IhaParams:
    """IHA parameters that reproduce ``m`` exactly.

    Routers are the identity and each head's collapse reads a single pseudo
    channel, by default the last one.  Without masks any channel works; under
    a causal or windowed mask only the last pseudo of token ``n`` sees every
    visible token with all ``P`` copies, so its softmax weights match MHA.
    """
    if pseudo < 1:
        raise ConstraintError("pseudo must be >= 1")
    read = pseudo - 1 if read is None else read
    if not 0 <= read < pseudo:
        raise ConstraintError(f"read must lie in [0, {pseudo})")
    H = m.heads
    router = identity_router(H, pseudo)
    return IhaParams(m, router, router.copy(), router.copy(), select_pseudo(H, pseudo, read))


def strictness_witness(heads: int, d: int, base: MhaParams | None = None, seed: int = 0) -> IhaParams:
    """A ``P = 2`` configuration that is nonlinear on repeated-token inputs.

    Pseudo 1 carries ``(Q, K, V)`` and pseudo 2 carries ``(-Q, -K, -V)``; the
    collapse keeps pseudo 1 only.  On ``X = 1 x^T`` each head then returns
    ``tanh(<q, k>/sqrt(d)) v`` per row, which no MHA can produce there.
    """
    if heads < 1 or d < 1:
        raise ConstraintError("heads and d must be >= 1")
    if base is None:
        base = MhaParams.random(np.random.default_rng(seed), heads, d)
    eye = np.eye(heads)
    sign = np.stack([eye, -eye], axis=2)
    return IhaParams(base, sign, sign.copy(), sign.copy(), select_pseudo(heads, 2, 0))


# ---------------------------------------------------------------------------
# parameter files: <stem>.json manifest + <stem>.bin little-endian float64
# ---------------------------------------------------------------------------


def save_tensors(tensors: dict[str, np.ndarray], stem) -> tuple[Path, Path]:
    stem = Path(stem)
    manifest = {"dtype": "<f8", "tensors": {k: list(np.shape(v)) for k, v in tensors.items()}}
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    with open(bin_path, "wb") as fh:
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    json_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return json_path, bin_path


def load_tensors(stem) -> dict[str, np.ndarray]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("dtype") != "<f8":
        raise ValueError(f"unsupported dtype {manifest.get('dtype')!r}")
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    out, pos = {}, 0
    for name, shape in manifest["tensors"].items():
        size = math.prod(shape)
        if pos + size > raw.size:
            raise ValueError(f"binary payload too short for tensor {name!r}")
        out[name] = raw[pos:pos + size].reshape(shape).astype(np.float64)
        pos += size
    if pos != raw.size:
        raise ValueError(f"{raw.size - pos} trailing values in payload")
    return out


def save_iha_params(params: IhaParams, stem) -> tuple[Path, Path]:
    return save_tensors(params.named(), stem)


def load_iha_params(stem) -> IhaParams:
    t = load_tensors(stem)
    base = MhaParams(t["W_Q"], t["W_K"], t["W_V"], t.get("W_O"))
    return IhaParams(base, t["alpha_q"], t["alpha_k"], t["alpha_v"], t["collapse"])
