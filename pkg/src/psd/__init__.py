"""Predictive sparse decomposition: jointly learned dictionary and feed-forward sparse encoder."""

from .errors import (
    DegenerateColumnError,
    FormatError,
    InputError,
    NumericalError,
    PreconditionError,
    PSDError,
    ShapeError,
)
from .model import (
    Hyperparams,
    Mode,
    ModelGradients,
    Predictor,
    bpdn_loss,
    compound_loss,
    grad_params,
    grad_z_smooth,
    init_model,
    normalize_columns,
    predictor_forward,
)
from .solvers import (
    Bpdn,
    Compound,
    SolveOptions,
    SolveResult,
    StepRule,
    infer_approx,
    infer_optimal,
    soft_threshold,
    solve_bpdn_cd,
    solve_oracle,
)
from .training import TrainConfig, TrainState, train, train_regressor_posthoc, train_step

__version__ = "0.1.0"
