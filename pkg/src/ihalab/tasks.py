"""Seeded generators for the synthetic reasoning tasks.

Every example draws from its own Philox substream keyed by
``(seed, task, split, index)``, so any example can be regenerated on its own
and the three splits never share random state.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import kernels
from .errors import ConstraintError, ShapeError

TASKS = ("binary", "ternary", "cpm3")
SPLITS = ("train", "val", "test")
_TASK_ID = {t: i for i, t in enumerate(TASKS)}
_SPLIT_ID = {s: i for i, s in enumerate(SPLITS)}

PRESET_COUNTS = {
    "paper": {"train": 40_000, "val": 5_000, "test": 5_000},
    "desk": {"train": 4_000, "val": 500, "test": 500},
}
PAD = 0


@dataclass
class TaskExample:
    tokens: np.ndarray
    targets: np.ndarray
    valid_mask: np.ndarray
    meta: dict

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if not (self.tokens.shape == self.targets.shape == self.valid_mask.shape) or self.tokens.ndim != 1:
            raise ShapeError("tokens, targets and valid_mask must be 1-D and equally long")

    def __len__(self):
        return self.tokens.shape[0]

    def to_json(self) -> dict:
        return {"tokens": self.tokens.tolist(), "targets": self.targets.tolist(), "meta": self.meta}

    @classmethod
    def from_json(cls, obj: dict) -> "TaskExample":
        n = len(obj["tokens"])
        return cls(obj["tokens"], obj["targets"], np.ones(n, dtype=bool), obj["meta"])


@dataclass
class DatasetSpec:
    task: str = "binary"
    m_min: int = 6
    m_max: int = 10
    bernoulli_p: float = 0.325
    counts: dict = field(default_factory=lambda: dict(PRESET_COUNTS["desk"]))
    seed: int = 0
    n_min: int = 1
    n_max: int = 10
    G: int = 10
    M: int = 3
    vocab_max: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConstraintError(f"task must be one of {TASKS}")
        # p = 1 is kept legal for the degenerate all-ones sanity check
        if not 0.0 < self.bernoulli_p <= 1.0:
            raise ConstraintError("bernoulli_p must lie in (0, 1]")
        if not 1 <= self.m_min <= self.m_max:
            raise ConstraintError("need 1 <= m_min <= m_max")
        if not 1 <= self.n_min <= self.n_max:
            raise ConstraintError("need 1 <= n_min <= n_max")
        if self.G <= 2 * self.M or self.M < 1:
            raise ConstraintError(f"need M >= 1 and G > 2M (got G={self.G}, M={self.M})")
        if self.vocab_max is None:
            self.vocab_max = self.n_max
        if self.vocab_max < 1:
            raise ConstraintError("vocab_max must be >= 1")
        if set(self.counts) != set(SPLITS) or min(self.counts.values()) < 0:
            raise ConstraintError(f"counts must give non-negative sizes for {SPLITS}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConstraintError("seed must be a 64-bit unsigned integer")

    @property
    def hops(self) -> int:
        return 3 if self.task == "ternary" else 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetSpec":
        return cls(**obj)


def preset_spec(task: str, preset: str = "desk", seed: int = 0, **overrides) -> DatasetSpec:
    if preset not in PRESET_COUNTS:
        raise ConstraintError(f"preset must be one of {tuple(PRESET_COUNTS)}")
    base = {
        "binary": dict(m_min=6, m_max=10, bernoulli_p=0.325),
        "ternary": dict(m_min=5, m_max=8, bernoulli_p=0.264),
        "cpm3": dict(n_min=1, n_max=10, G=10, M=3),
    }[task]
    base.update(overrides)
    return DatasetSpec(task=task, counts=dict(PRESET_COUNTS[preset]), seed=seed, **base)


def example_rng(seed: int, task: str, split: str, index: int) -> np.random.Generator:
    """Counter-based stream for one example (Philox keyed by a SeedSequence)."""
    ss = np.random.SeedSequence([seed, _TASK_ID[task], _SPLIT_ID[split], index])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def bool_compose(r, hops: int) -> np.ndarray:
    """Relation composed with itself ``hops`` times (2 or 3), by exhaustive loops."""
    r = np.asarray(r)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ShapeError(f"bool_compose needs a square matrix, got {r.shape}")
    if hops not in (2, 3):
        raise ConstraintError("hops must be 2 or 3")
    return kernels.bool_compose_kernel(r.astype(bool), hops)


def cpm3_counts(x, G: int, M: int) -> np.ndarray:
    if G <= 2 * M or M < 1:
        raise ConstraintError(f"need M >= 1 and G > 2M (got G={G}, M={M})")
    return kernels.cpm3_counts_kernel(np.asarray(x, dtype=np.int64), G, M)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def make_example(spec: DatasetSpec, split: str, index: int) -> TaskExample:
    rng = example_rng(spec.seed, spec.task, split, index)
    meta = {"task": spec.task, "seed": spec.seed, "split": split, "index": index}
    if spec.task == "cpm3":
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        x = rng.integers(0, spec.vocab_max, n)
        meta["n"] = n
        return TaskExample(x, cpm3_counts(x, spec.G, spec.M), np.ones(n, dtype=bool), meta)
    m = int(rng.integers(spec.m_min, spec.m_max + 1))
    r = rng.random((m, m)) < spec.bernoulli_p
    meta["m"] = m
    return TaskExample(r.reshape(-1), bool_compose(r, spec.hops).reshape(-1),
                       np.ones(m * m, dtype=bool), meta)


def gen_split(spec: DatasetSpec, split: str, count: int | None = None) -> Iterator[TaskExample]:
    count = spec.counts[split] if count is None else count
    for i in range(count):
        yield make_example(spec, split, i)


def gen_composition(spec: DatasetSpec, split: str = "train", count: int | None = None) -> Iterator[TaskExample]:
    if spec.task not in ("binary", "ternary"):
        raise ConstraintError("gen_composition needs a binary or ternary spec")
    return gen_split(spec, split, count)


def gen_cpm3(spec: DatasetSpec, split: str = "train", count: int | None = None) -> Iterator[TaskExample]:
    if spec.task != "cpm3":
        raise ConstraintError("gen_cpm3 needs a cpm3 spec")
    return gen_split(spec, split, count)


@dataclass
class Batch:
    tokens: np.ndarray  # (B, L) int, PAD on padding
    targets: np.ndarray  # (B, L)
    valid_mask: np.ndarray  # (B, L) bool
    side: np.ndarray  # (B,) grid side m (composition) or length n (cpm3)


def pad_batch(examples, to_length: int | None = None) -> Batch:
    """Right-pad to ``to_length`` (default: the longest example)."""
    examples = list(examples)
    if not examples:
        raise ShapeError("pad_batch needs at least one example")
    longest = max(len(e) for e in examples)
    L = longest if to_length is None else to_length
    if L < longest:
        raise ShapeError(f"to_length {L} is shorter than the longest example ({longest})")
    B = len(examples)
    tokens = np.full((B, L), PAD, dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    side = np.zeros(B, dtype=np.int64)
    for b, e in enumerate(examples):
        n = len(e)
        tokens[b, :n] = e.tokens
        targets[b, :n] = e.targets
        valid[b, :n] = e.valid_mask
        side[b] = e.meta.get("m", e.meta.get("n", n))
    return Batch(tokens, targets, valid, side)


# ---------------------------------------------------------------------------
# files: <split>.jsonl[.gz] + manifest.json
# ---------------------------------------------------------------------------


def _open(path: Path, mode: str):
    return gzip.open(path, mode + "t", encoding="utf-8") if path.suffix == ".gz" else open(path, mode, encoding="utf-8")


def write_jsonl(examples, path) -> int:
    path = Path(path)
    n = 0
    # mtime=0 keeps gzip output byte-stable
    if path.suffix == ".gz":
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
            for e in examples:
                gz.write((json.dumps(e.to_json(), separators=(",", ":")) + "\n").encode())
                n += 1
        return n
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(e.to_json(), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[TaskExample]:
    with _open(Path(path), "r") as fh:
        return [TaskExample.from_json(json.loads(line)) for line in fh if line.strip()]


def write_dataset(spec: DatasetSpec, out_dir, compress: bool = False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split in SPLITS:
        name = f"{split}.jsonl" + (".gz" if compress else "")
        files[split] = {"file": name, "count": write_jsonl(gen_split(spec, split), out / name)}
    manifest = {"spec": spec.to_dict(), "files": files, "rng": "Philox4x64 via SeedSequence([seed, task, split, index])"}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(out_dir) -> tuple[DatasetSpec, dict[str, list[TaskExample]]]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    spec = DatasetSpec.from_dict(manifest["spec"])
    return spec, {s: read_jsonl(out / manifest["files"][s]["file"]) for s in SPLITS}


def load_or_generate(spec: DatasetSpec) -> dict[str, list[TaskExample]]:
    return {s: list(gen_split(spec, s)) for s in SPLITS}


def with_counts(spec: DatasetSpec, **counts) -> DatasetSpec:
    return replace(spec, counts={**spec.counts, **counts})
