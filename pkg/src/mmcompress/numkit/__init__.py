"""Dense float64 tensors, reverse-mode autodiff, Jacobi SVD and a seeded RNG."""

from . import functional
from ._backend import COMPILED
from .linalg import low_rank_reconstruct, svd
from .optim import Adam
from .rng import Rng
from .tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    concat,
    exp,
    grad_enabled,
    log,
    matmul,
    mean,
    no_grad,
    reshape,
    split,
    sqrt,
    square,
    swapaxes,
    tanh,
    transpose,
)

__all__ = [
    "COMPILED",
    "Adam",
    "NonFiniteError",
    "Rng",
    "Tensor",
    "as_tensor",
    "concat",
    "exp",
    "functional",
    "grad_enabled",
    "log",
    "low_rank_reconstruct",
    "matmul",
    "mean",
    "no_grad",
    "reshape",
    "split",
    "sqrt",
    "square",
    "svd",
    "swapaxes",
    "tanh",
    "transpose",
]
