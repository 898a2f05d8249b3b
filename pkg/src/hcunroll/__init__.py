"""History-cognizant unrolled optimization networks for multi-coil MRI."""

from .autodiff import Graph, Tensor, backward, finite_diff_check, gradients
from .errors import ContractError, NumericalError, ShapeError
from .mri import Encoder, make_coil_maps, make_phantom, make_random_mask, make_uniform_mask
from .unroll import Algorithm, UnrollConfig, UnrolledNet, UnrollParams, unroll

__all__ = [
    "Algorithm",
    "ContractError",
    "Encoder",
    "Graph",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "UnrollConfig",
    "UnrollParams",
    "UnrolledNet",
    "backward",
    "finite_diff_check",
    "gradients",
    "make_coil_maps",
    "make_phantom",
    "make_random_mask",
    "make_uniform_mask",
    "unroll",
]

__version__ = "0.1.0"
