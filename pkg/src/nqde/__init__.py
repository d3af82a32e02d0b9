"""Neural controlled differential equations with a wave-function hidden state.

The hidden state is a pair of complex amplitudes, the vector field keeps its
core weights orthogonal (by projection or by the exponential map), and class
probabilities come from the squared amplitudes.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward
from .model import (
    ModelParams,
    Variant,
    collapse_g1,
    collapse_g2,
    collapse_g3,
    count_params,
    init_params,
    integrate,
)
from .paths import fit_natural_cubic, generate_spirals
from .solvers import SolverConfig
from .training import TrainConfig, Trainer, aggregate, run_experiment

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "ModelParams",
    "Variant",
    "collapse_g1",
    "collapse_g2",
    "collapse_g3",
    "count_params",
    "init_params",
    "integrate",
    "fit_natural_cubic",
    "generate_spirals",
    "SolverConfig",
    "TrainConfig",
    "Trainer",
    "aggregate",
    "run_experiment",
]
