from . import ops
from .linalg import NotSPDError, cholesky_logdet, solve
from .ops import RunningStats
from .tensor import Tape, TapeError, TensorND, active_tape, as_tensor, no_grad

__all__ = [
    "NotSPDError",
    "RunningStats",
    "Tape",
    "TapeError",
    "TensorND",
    "active_tape",
    "as_tensor",
    "cholesky_logdet",
    "no_grad",
    "ops",
    "solve",
]
