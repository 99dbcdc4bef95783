"""Model parameters, losses and analytic gradients.

Notation used throughout the package:

    y : input patch, shape (n,)
    z : code, shape (m,)
    B : dictionary, shape (n, m), unit-norm columns
    F(y) = gain * tanh(filters @ y + bias)     (the feed-forward predictor)

Two objectives live here.  ``bpdn_loss`` is the basis pursuit denoising
objective ``0.5*||y - Bz||^2 + lam*||z||_1``.  ``compound_loss`` adds the
prediction term and drops the 0.5 factor::

    ||y - Bz||^2 + lam*||z||_1 + alpha*||z - F(y)||^2

Both are kept exactly in that form, so with ``alpha = 0`` the compound
minimizer coincides with the BPDN minimizer at ``lam / 2``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateColumnError, PreconditionError, ShapeError

UNIT_NORM_TOL = 1e-10


class Mode(str, enum.Enum):
    """How the prediction term couples to learning.

    JOINT        codes are inferred with the prediction term (alpha > 0)
    SEPARATE     codes are inferred with alpha = 0; the regressor is fit to them
    AUTOENCODER  codes are the prediction itself, no code optimization
    """

    JOINT = "joint"
    SEPARATE = "separate"
    AUTOENCODER = "autoencoder"


@dataclass(frozen=True)
class Hyperparams:
    lam: float = 0.5
    alpha: float = 1.0
    eta: float = 0.02
    mode: Mode = Mode.JOINT

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.lam >= 0:
            raise PreconditionError(f"lambda must be >= 0, got {self.lam}")
        if not self.alpha >= 0:
            raise PreconditionError(f"alpha must be >= 0, got {self.alpha}")
        if not self.eta > 0:
            raise PreconditionError(f"eta must be > 0, got {self.eta}")

    @property
    def inference_alpha(self) -> float:
        """Weight of the prediction term while inferring codes."""
        return 0.0 if self.mode is Mode.SEPARATE else self.alpha

    def for_inference(self) -> "Hyperparams":
        return replace(self, alpha=self.inference_alpha, mode=Mode.JOINT)


@dataclass
class Predictor:
    """Parameters of ``F(y) = gain * tanh(filters @ y + bias)``.

    ``gain`` holds the diagonal of the gain matrix; off-diagonal entries
    are structurally zero.
    """

    gain: np.ndarray
    filters: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.filters = np.atleast_2d(np.asarray(self.filters, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64)
        m, _ = self.filters.shape
        if self.gain.shape != (m,) or self.bias.shape != (m,):
            raise ShapeError(
                f"gain {self.gain.shape} and bias {self.bias.shape} must both be ({m},) "
                f"to match filters {self.filters.shape}"
            )

    @property
    def n(self) -> int:
        return self.filters.shape[1]

    @property
    def m(self) -> int:
        return self.filters.shape[0]

    def copy(self) -> "Predictor":
        return Predictor(self.gain.copy(), self.filters.copy(), self.bias.copy())

    def __eq__(self, other):
        if not isinstance(other, Predictor):
            return NotImplemented
        return (
            np.array_equal(self.gain, other.gain)
            and np.array_equal(self.filters, other.filters)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass
class ModelGradients:
    d_basis: np.ndarray
    d_gain: np.ndarray
    d_filters: np.ndarray
    d_bias: np.ndarray

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.d_basis, self.d_gain, self.d_filters, self.d_bias)
        )


def _check_signal(y, n):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1:] != (n,) or y.ndim > 2:
        raise ShapeError(f"signal of shape {y.shape} does not match input size {n}")
    return y


def _check_pair(y, z, b):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"dictionary must be 2-D, got shape {b.shape}")
    n, m = b.shape
    y = _check_signal(y, n)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (m,):
        raise ShapeError(f"code of shape {z.shape} does not match dictionary {b.shape}")
    if y.ndim != 1:
        raise ShapeError(f"expected a single signal, got shape {y.shape}")
    return y, z, b


def check_dictionary(b, tol=UNIT_NORM_TOL):
    """Raise ``PreconditionError`` unless every column of ``b`` has unit norm."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"dictionary must be 2-D, got shape {b.shape}")
    norms = np.linalg.norm(b, axis=0)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise PreconditionError(
            f"dictionary columns {bad[:5].tolist()} are not unit norm "
            f"(norms {norms[bad[:5]].tolist()})"
        )
    return b


def predictor_forward(y, p: Predictor) -> np.ndarray:
    """Evaluate ``gain * tanh(filters @ y + bias)``.

    Accepts one signal of shape (n,) or a batch of shape (N, n); batches
    are returned as (N, m).
    """
    y = _check_signal(y, p.n)
    if y.ndim == 1:
        return p.gain * np.tanh(p.filters @ y + p.bias)
    return p.gain * np.tanh(y @ p.filters.T + p.bias)


def bpdn_loss(y, z, b, lam: float) -> float:
    y, z, b = _check_pair(y, z, b)
    r = y - b @ z
    return 0.5 * float(r @ r) + lam * float(np.abs(z).sum())


def compound_loss(y, z, b, p: Predictor, h: Hyperparams) -> float:
    y, z, b = _check_pair(y, z, b)
    r = y - b @ z
    e = z - predictor_forward(y, p)
    return float(r @ r) + h.lam * float(np.abs(z).sum()) + h.alpha * float(e @ e)


def grad_z_smooth(y, z, b, p: Predictor, h: Hyperparams) -> np.ndarray:
    """Gradient in z of the differentiable part of the compound loss.

    The l1 term is left to the proximal step of the solver.
    """
    y, z, b = _check_pair(y, z, b)
    return 2.0 * (b.T @ (b @ z - y)) + 2.0 * h.alpha * (z - predictor_forward(y, p))


def grad_params(y, z, b, p: Predictor, h: Hyperparams) -> ModelGradients:
    """Gradients of the compound loss in (B, gain, filters, bias), z held fixed.

    In autoencoder mode z is replaced by F(y) and the gradient is taken
    through that substitution, so the reconstruction and l1 terms reach
    the predictor parameters.
    """
    y, z, b = _check_pair(y, z, b)
    pre = p.filters @ y + p.bias
    t = np.tanh(pre)
    f = p.gain * t

    if h.mode is Mode.AUTOENCODER:
        r = b @ f - y
        d_basis = 2.0 * np.outer(r, f)
        d_f = 2.0 * (b.T @ r) + h.lam * np.sign(f)
    else:
        r = b @ z - y
        d_basis = 2.0 * np.outer(r, z)
        d_f = 2.0 * h.alpha * (f - z)

    d_gain, d_filters, d_bias = _backprop_predictor(y, t, p, d_f)
    return ModelGradients(d_basis, d_gain, d_filters, d_bias)


def _backprop_predictor(y, t, p, d_f):
    d_pre = d_f * p.gain * (1.0 - t * t)
    return d_f * t, np.outer(d_pre, y), d_pre


def grad_prediction_error(y, z, p: Predictor):
    """Gradients of ``||z - F(y)||^2`` in (gain, filters, bias)."""
    y = _check_signal(y, p.n)
    t = np.tanh(p.filters @ y + p.bias)
    return _backprop_predictor(y, t, p, 2.0 * (p.gain * t - z))


def normalize_columns(b) -> np.ndarray:
    """Rescale every column of ``b`` to unit Euclidean norm."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"dictionary must be 2-D, got shape {b.shape}")
    norms = np.linalg.norm(b, axis=0)
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        raise DegenerateColumnError(f"columns {bad.tolist()} have zero or non-finite norm")
    return b / norms


def random_columns(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """Draw ``k`` unit-norm columns from the initialization distribution."""
    while True:
        cols = rng.uniform(-1.0, 1.0, size=(n, k))
        if np.all(np.linalg.norm(cols, axis=0) > 0):
            return normalize_columns(cols)


def init_model(n: int, m: int, seed: int) -> tuple[np.ndarray, Predictor]:
    if n < 1 or m < 1:
        raise PreconditionError(f"n and m must be >= 1, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    b = random_columns(rng, n, m)
    bound = 1.0 / np.sqrt(n)
    filters = rng.uniform(-bound, bound, size=(m, n))
    return b, Predictor(gain=np.ones(m), filters=filters, bias=np.zeros(m))

