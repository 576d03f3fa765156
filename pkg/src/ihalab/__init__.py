"""Multi-head and interleaved head attention from scratch, with constructive
checks of their expressivity and small synthetic reasoning benchmarks."""

from .attention import AttentionConfig, MhaParams, mha_forward
from .errors import ConstraintError, DegenerateRowError, NonFiniteError, ShapeError
from .iha import IhaParams, embed_mha_as_iha, iha_forward

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "MhaParams", "IhaParams", "mha_forward", "iha_forward", "embed_mha_as_iha",
    "ShapeError", "DegenerateRowError", "ConstraintError", "NonFiniteError",
]
