"""Single-layer MHA / IHA sequence labeller and its training loop.

The model embeds each token, adds 2-D (row, column) position embeddings for
the composition grids or 1-D positions for CPM-3, applies one attention layer
with a residual connection, and maps every position through a two-layer ReLU
MLP to a logit (composition) or a count (CPM-3).  Padding is zero-embedded
and masked both as an attention key and in the loss.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConstraintError, NonFiniteError
from .iha import block_diagonal_collapse, identity_router
from .tasks import SPLITS, Batch, DatasetSpec, TaskExample, load_or_generate, pad_batch

KINDS = ("mha", "iha")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mha"
    heads: int = 8
    pseudo: int = 1
    d: int = 4
    vocab: int = 2
    positions: int = 10
    output: str = "binary"  # "binary" logit or "count" regression
    mlp_width: int | None = None
    layers: int = 1
    score_mode: str = "softmax"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConstraintError(f"kind must be one of {KINDS}")
        if self.layers != 1:
            raise ConstraintError("only single-layer models are supported")
        if self.score_mode != "softmax":
            raise ConstraintError("training needs differentiable (softmax) attention")
        if self.kind == "mha" and self.pseudo != 1:
            raise ConstraintError("MHA models have pseudo == 1")
        if min(self.heads, self.pseudo, self.d, self.vocab, self.positions) < 1:
            raise ConstraintError("heads, pseudo, d, vocab and positions must be >= 1")
        if self.output not in ("binary", "count"):
            raise ConstraintError("output must be 'binary' or 'count'")

    @property
    def D(self) -> int:
        return self.heads * self.d

    @property
    def width(self) -> int:
        return self.D if self.mlp_width is None else self.mlp_width


def model_for_task(spec: DatasetSpec, kind: str, heads: int = 8, d: int = 4, pseudo: int | None = None) -> ModelConfig:
    if pseudo is None:
        pseudo = 2 if kind == "iha" else 1
    if spec.task == "cpm3":
        return ModelConfig(kind, heads, pseudo, d, vocab=spec.vocab_max, positions=spec.n_max, output="count")
    return ModelConfig(kind, heads, pseudo, d, vocab=2, positions=spec.m_max, output="binary")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic initialisation.  IHA routers start near the identity and
    the collapse near a per-head average, so step 0 is close to MHA."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    D, H, P, w = cfg.D, cfg.heads, cfg.pseudo, cfg.width
    s = 1.0 / math.sqrt(D)
    p = {
        # row 0 is the pad embedding; it is never updated and stays zero
        "tok_emb": np.vstack([np.zeros((1, D)), rng.normal(0, 1.0, (cfg.vocab, D))]),
        "row_emb": rng.normal(0, 1.0, (cfg.positions, D)),
        "W_Q": rng.normal(0, s, (D, D)),
        "W_K": rng.normal(0, s, (D, D)),
        "W_V": rng.normal(0, s, (D, D)),
        "W_O": rng.normal(0, s, (D, D)),
        "W_1": rng.normal(0, s, (D, w)),
        "b_1": np.zeros(w),
        "W_2": rng.normal(0, 1.0 / math.sqrt(w), (w, 1)),
        "b_2": np.zeros(1),
    }
    if cfg.output == "binary":
        p["col_emb"] = rng.normal(0, 1.0, (cfg.positions, D))
    if cfg.kind == "iha":
        noise = 0.1 / math.sqrt(H)
        for name in ("alpha_q", "alpha_k", "alpha_v"):
            p[name] = identity_router(H, P) + rng.normal(0, noise, (H, H, P))
        p["collapse"] = block_diagonal_collapse(np.full((H, P), 1.0 / P)) + rng.normal(0, noise, (H, H * P))
    return p


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for k, v in params.items() if k != "tok_emb") + params["tok_emb"][1:].size)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _positions(batch: Batch, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray | None]:
    B, L = batch.tokens.shape
    pos = np.broadcast_to(np.arange(L), (B, L))
    if cfg.output == "count":
        return np.minimum(pos, cfg.positions - 1), None
    m = np.maximum(batch.side, 1)[:, None]
    rows = np.minimum(pos // m, cfg.positions - 1)
    cols = np.minimum(pos % m, cfg.positions - 1)
    return rows, cols


def forward(params: dict[str, ad.Var], batch: Batch, cfg: ModelConfig) -> ad.Var:
    """Per-position outputs of shape ``(B, L)``."""
    B, L = batch.tokens.shape
    H, P, d, D = cfg.heads, cfg.pseudo, cfg.d, cfg.D
    valid = batch.valid_mask
    tok_idx = np.where(valid, batch.tokens + 1, 0)
    rows, cols = _positions(batch, cfg)
    keep = valid[..., None].astype(np.float64)
    x = ad.take_rows(params["tok_emb"], tok_idx) + ad.take_rows(params["row_emb"], rows)
    if cols is not None:
        x = x + ad.take_rows(params["col_emb"], cols)
    x = x * keep  # pads carry exactly zero

    def heads_of(W):
        return ad.transpose(ad.reshape(x @ W, (B, L, H, d)), (0, 2, 1, 3))  # (B, H, L, d)

    q, k, v = heads_of(params["W_Q"]), heads_of(params["W_K"]), heads_of(params["W_V"])
    if cfg.kind == "iha":
        def pseudo_seq(t, alpha):
            mixed = ad.einsum("mhp,bmld->bhpld", alpha, t)  # (B, H, P, L, d)
            return ad.reshape(ad.transpose(mixed, (0, 1, 3, 2, 4)), (B, H, L * P, d))

        q, k, v = (pseudo_seq(q, params["alpha_q"]), pseudo_seq(k, params["alpha_k"]),
                   pseudo_seq(v, params["alpha_v"]))
        key_ok = np.repeat(valid, P, axis=1)
    else:
        key_ok = valid
    scores = (q * (1.0 / math.sqrt(d))) @ ad.transpose(k, (0, 1, 3, 2))
    att = ad.softmax(scores, key_ok[:, None, None, :]) @ v  # (B, H, L*P, d)
    if cfg.kind == "iha":
        att = ad.reshape(ad.transpose(ad.reshape(att, (B, H, L, P, d)), (0, 1, 3, 2, 4)), (B, H * P, L, d))
        att = ad.einsum("hq,bqld->bhld", params["collapse"], att)
    att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, L, D))
    z = x + att @ params["W_O"]
    hidden = ad.relu(z @ params["W_1"] + params["b_1"])
    return ad.reshape(hidden @ params["W_2"] + params["b_2"], (B, L))


def loss_fn(out: ad.Var, batch: Batch, cfg: ModelConfig) -> ad.Var:
    w = batch.valid_mask.astype(np.float64)
    if cfg.output == "binary":
        return ad.masked_bce_with_logits(out, batch.targets, w)
    return ad.masked_mse(out, batch.targets, w)


def _correct(out: np.ndarray, batch: Batch, cfg: ModelConfig) -> tuple[int, int]:
    pred = (out > 0).astype(np.int64) if cfg.output == "binary" else np.rint(out).astype(np.int64)
    v = batch.valid_mask
    return int(((pred == batch.targets) & v).sum()), int(v.sum())


def _wrap(params, trainable=True):
    return {k: (ad.param(v, k) if trainable else ad.Var(v)) for k, v in params.items()}


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


class Optimizer:
    def __init__(self, kind: str, lr: float, betas=(0.9, 0.999), eps=1e-8):
        if kind not in OPTIMIZERS:
            raise ConstraintError(f"optimizer must be one of {OPTIMIZERS}")
        if lr < 0:
            raise ConstraintError("learning rate must be >= 0")
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            if name not in params:
                continue
            if name == "tok_emb":
                g = g.copy()
                g[0] = 0.0
            if self.kind == "sgd":
                params[name] = params[name] - self.lr * g
                continue
            b1, b2 = self.betas
            m = self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            mh = m / (1 - b1 ** self.t)
            vh = v / (1 - b2 ** self.t)
            params[name] = params[name] - self.lr * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    kind: str
    lr: float
    seed: int
    curves: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    initial_train_loss: float = float("nan")
    final_train_loss: float = float("nan")
    test_loss: float = float("nan")
    test_accuracy: float = float("nan")
    param_count: int = 0
    wall_seconds: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        out = asdict(self)
        if not timing:
            out.pop("wall_seconds")
        return out

    def curve_rows(self) -> list[tuple]:
        rows = []
        for c in self.curves:
            rows.append((c["epoch"], "train", c["train_loss"], c["train_acc"]))
            rows.append((c["epoch"], "val", c["val_loss"], c["val_acc"]))
        return rows


def make_batches(examples: list[TaskExample], batch: int, rng: np.random.Generator | None = None) -> list[Batch]:
    """Length-bucketed batches: examples are shuffled, stably sorted by length
    and cut into batches, whose order is then shuffled.  Padding stays
    minimal because attention cost grows with the square of the padded length."""
    n = len(examples)
    order = np.arange(n) if rng is None else rng.permutation(n)
    lengths = np.array([len(examples[i]) for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    chunks = [order[s:s + batch] for s in range(0, n, batch)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [pad_batch([examples[i] for i in c]) for c in chunks]


def evaluate_batches(params: dict[str, np.ndarray], batches: list[Batch], cfg: ModelConfig) -> tuple[float, float]:
    """Mean loss and accuracy over valid positions; empty batches are skipped."""
    wparams = _wrap(params, trainable=False)
    loss_sum = correct = total = 0.0
    for b in batches:
        n_valid = int(b.valid_mask.sum())
        if n_valid == 0:
            continue
        out = forward(wparams, b, cfg)
        loss_sum += float(loss_fn(out, b, cfg).value) * n_valid
        c, n = _correct(out.value, b, cfg)
        correct += c
        total += n
    if total == 0:
        return float("nan"), float("nan")
    return loss_sum / total, correct / total


def evaluate(params: dict[str, np.ndarray], examples: list[TaskExample], cfg: ModelConfig, batch: int = 64) -> float:
    return evaluate_batches(params, make_batches(examples, batch), cfg)[1]


def train(cfg: ModelConfig, data: dict[str, list[TaskExample]], lr: float, max_epochs: int = 30,
          patience: int = 10, batch: int = 32, seed: int = 0, optimizer: str = "sgd",
          log=None) -> tuple[TrainResult, dict[str, np.ndarray]]:
    """Fit on ``data['train']`` with early stopping on ``data['val']``.

    The best-validation parameters are restored before the test evaluation.
    """
    if lr < 0:
        raise ConstraintError("learning rate must be >= 0")
    if patience < 1 or max_epochs < 0 or batch < 1:
        raise ConstraintError("need patience >= 1, max_epochs >= 0, batch >= 1")
    t0 = time.perf_counter()
    params = init_params(cfg, seed)
    opt = Optimizer(optimizer, lr)
    train_eval = make_batches(data["train"], 64)
    val_batches = make_batches(data["val"], 64)
    result = TrainResult(cfg.kind, lr, seed, param_count=count_params(params))
    result.initial_train_loss = evaluate_batches(params, train_eval, cfg)[0]
    best = (math.inf, {k: v.copy() for k, v in params.items()}, 0)
    stale = 0
    for epoch in range(1, max_epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11, epoch]))
        loss_sum = correct = total = 0.0
        for bi, b in enumerate(make_batches(data["train"], batch, rng)):
            n_valid = int(b.valid_mask.sum())
            if n_valid == 0:
                continue
            if not all(np.isfinite(v).all() for v in params.values()):
                raise NonFiniteError(f"non-finite parameters at epoch {epoch}, batch {bi}")
            wparams = _wrap(params)
            with np.errstate(over="ignore", invalid="ignore"):
                out = forward(wparams, b, cfg)
                loss = loss_fn(out, b, cfg)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {bi}")
            with np.errstate(over="ignore", invalid="ignore"):
                grads = ad.backward(loss)
                opt.step(params, grads)
            loss_sum += lv * n_valid
            c, n = _correct(out.value, b, cfg)
            correct += c
            total += n
        val_loss, val_acc = evaluate_batches(params, val_batches, cfg)
        result.curves.append({"epoch": epoch, "train_loss": loss_sum / total, "train_acc": correct / total,
                              "val_loss": val_loss, "val_acc": val_acc})
        if log is not None:
            log(result.curves[-1])
        if val_loss < best[0]:
            best = (val_loss, {k: v.copy() for k, v in params.items()}, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    result.epochs_run = len(result.curves)
    params = best[1]
    result.best_epoch = best[2]
    result.final_train_loss = evaluate_batches(params, train_eval, cfg)[0]
    result.test_loss, result.test_accuracy = evaluate_batches(params, make_batches(data["test"], 64), cfg)
    result.wall_seconds = time.perf_counter() - t0
    return result, params


def model_gradcheck(cfg: ModelConfig, batch: Batch, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4):
    params = init_params(cfg, seed)
    params.pop("tok_emb")
    tok = init_params(cfg, seed)["tok_emb"]

    def fn(vars_):
        vars_ = dict(vars_)
        vars_["tok_emb"] = ad.Var(tok)
        return loss_fn(forward(vars_, batch, cfg), batch, cfg)

    return ad.gradcheck(fn, params, eps, tol, score_mode=cfg.score_mode)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_FIELDS = ("task", "kind", "lr", "seed", "test_accuracy", "test_loss", "epochs", "best_epoch",
                "initial_train_loss", "final_train_loss", "param_count")


def _sweep_cell(args):
    spec, kind, lr, seed, train_kw = args
    data = load_or_generate(spec)
    cfg = model_for_task(spec, kind, pseudo=train_kw.pop("pseudo", None))
    res, _ = train(cfg, data, lr, seed=seed, **train_kw)
    return {"task": spec.task, "kind": kind, "lr": repr(lr), "seed": seed,
            "test_accuracy": repr(res.test_accuracy), "test_loss": repr(res.test_loss),
            "epochs": res.epochs_run, "best_epoch": res.best_epoch,
            "initial_train_loss": repr(res.initial_train_loss),
            "final_train_loss": repr(res.final_train_loss), "param_count": res.param_count}


def sweep(spec: DatasetSpec, csv_path, kinds=KINDS, lrs=(1e-3, 1e-4), seed: int = 0,
          workers: int = 1, **train_kw) -> list[dict]:
    """Train every (kind, lr) cell and write one CSV row per cell.

    Cells already present in ``csv_path`` are reused, so an interrupted sweep
    resumes where it stopped.  Rows are always written in grid order.
    """
    grid = [(k, lr) for k in kinds for lr in lrs]
    if not grid:
        raise ConstraintError("sweep grid is empty")
    path = Path(csv_path)
    done: dict[tuple, dict] = {}
    if path.exists():
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                done[(row["task"], row["kind"], float(row["lr"]), int(row["seed"]))] = row
    key = lambda k, lr: (spec.task, k, float(lr), seed)
    todo = [(k, lr) for k, lr in grid if key(k, lr) not in done]

    def flush():
        rows = [done[key(k, lr)] for k, lr in grid if key(k, lr) in done]
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({f: r[f] for f in SWEEP_FIELDS})
        tmp.replace(path)
        return rows

    jobs = [(spec, k, lr, seed, dict(train_kw)) for k, lr in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for (k, lr), row in zip(todo, ex.map(_sweep_cell, jobs)):
                done[key(k, lr)] = row
                flush()
    else:
        for (k, lr), job in zip(todo, jobs):
            done[key(k, lr)] = _sweep_cell(job)
            flush()
    return flush()


def save_result(result: TrainResult, out_dir) -> dict[str, Path]:
    """``result.json`` (deterministic), ``curves.csv`` and a ``timing.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"result": out / "result.json", "curves": out / "curves.csv", "timing": out / "timing.json"}
    paths["result"].write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(paths["curves"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "split", "loss", "acc"))
        for r in result.curve_rows():
            w.writerow((r[0], r[1], repr(r[2]), repr(r[3])))
    paths["timing"].write_text(json.dumps({"wall_seconds": result.wall_seconds}) + "\n")
    return paths


__all__ = ["ModelConfig", "TrainResult", "model_for_task", "init_params", "count_params", "forward",
           "loss_fn", "train", "evaluate", "evaluate_batches", "make_batches", "model_gradcheck",
           "sweep", "save_result", "Optimizer", "SPLITS"]
