"""Online block-coordinate learning of the dictionary and the predictor.

Each sample goes through two steps: infer the code with the parameters
frozen, then take one SGD step on all parameters with the code frozen and
rescale the dictionary columns to unit norm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import InputError, PreconditionError, ShapeError
from .model import (
    Hyperparams,
    Mode,
    Predictor,
    compound_loss,
    grad_params,
    grad_prediction_error,
    init_model,
    random_columns,
)
from .solvers import SolveOptions, infer_approx, infer_optimal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    code_size: int = 64
    epochs: int = 1
    seed: int = 0
    infer_opts: SolveOptions = field(default_factory=SolveOptions)
    eta_decay: float = 1e-4
    eta_floor: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise PreconditionError(f"epochs must be >= 1, got {self.epochs}")
        if self.code_size < 1:
            raise PreconditionError(f"code_size must be >= 1, got {self.code_size}")
        if not 0 <= self.eta_decay < 1:
            raise PreconditionError(f"eta_decay must be in [0, 1), got {self.eta_decay}")
        if not 0 < self.eta_floor <= self.hyper.eta:
            raise PreconditionError(
                f"eta_floor must be in (0, eta={self.hyper.eta}], got {self.eta_floor}"
            )


@dataclass
class TrainState:
    basis: np.ndarray
    predictor: Predictor
    samples_seen: int = 0
    current_eta: float = 0.02
    rejected_steps: int = 0
    last_loss: float = float("nan")
    last_l1: float = float("nan")

    def copy(self) -> "TrainState":
        return replace(self, basis=self.basis.copy(), predictor=self.predictor.copy())


def initial_state(n: int, cfg: TrainConfig) -> TrainState:
    basis, pred = init_model(n, cfg.code_size, cfg.seed)
    return TrainState(basis, pred, current_eta=cfg.hyper.eta)


def next_eta(eta: float, cfg: TrainConfig) -> float:
    """Multiplicative decay that never pushes the rate up to the floor."""
    if eta <= cfg.eta_floor:
        return eta
    return max(cfg.eta_floor, eta * (1.0 - cfg.eta_decay))


def infer_code(y, basis, pred: Predictor, cfg: TrainConfig) -> np.ndarray:
    """Step one of a training step: the code the parameter update is made against."""
    h = cfg.hyper
    if h.mode is Mode.AUTOENCODER:
        return infer_approx(y, pred)
    return infer_optimal(y, basis, pred, h, cfg.infer_opts).code


def train_step(y, state: TrainState, cfg: TrainConfig) -> TrainState:
    y = np.asarray(y, dtype=np.float64)
    n, m = state.basis.shape
    if y.shape != (n,):
        raise ShapeError(f"sample of shape {y.shape} does not match dictionary {state.basis.shape}")
    if not np.all(np.isfinite(y)):
        log.warning("non-finite sample at step %d; step rejected", state.samples_seen)
        return replace(state, rejected_steps=state.rejected_steps + 1)
    h = cfg.hyper
    basis, pred = state.basis, state.predictor

    z = infer_code(y, basis, pred, cfg)
    loss = compound_loss(y, z, basis, pred, h)

    if h.mode is Mode.SEPARATE:
        # dictionary sees only the reconstruction term; predictor regresses onto z
        g = grad_params(y, z, basis, pred, replace(h, alpha=0.0, mode=Mode.JOINT))
        g.d_gain, g.d_filters, g.d_bias = grad_prediction_error(y, z, pred)
    else:
        g = grad_params(y, z, basis, pred, h)

    if not (g.is_finite() and np.isfinite(loss)):
        log.warning("non-finite gradient at sample %d; step rejected", state.samples_seen)
        return replace(state, rejected_steps=state.rejected_steps + 1)

    eta = state.current_eta
    new_basis = basis - eta * g.d_basis
    new_pred = Predictor(
        gain=pred.gain - eta * g.d_gain,
        filters=pred.filters - eta * g.d_filters,
        bias=pred.bias - eta * g.d_bias,
    )
    norms = np.linalg.norm(new_basis, axis=0)
    dead = np.flatnonzero(~(norms > 0))
    if dead.size:
        rng = np.random.default_rng([cfg.seed, 2, state.samples_seen])
        new_basis[:, dead] = random_columns(rng, n, dead.size)
        norms[dead] = 1.0
    new_basis /= norms

    return replace(
        state,
        basis=new_basis,
        predictor=new_pred,
        samples_seen=state.samples_seen + 1,
        current_eta=next_eta(eta, cfg),
        last_loss=loss,
        last_l1=float(np.abs(z).sum()),
    )


LogHook = Callable[[int, float, float, float], None]


def _as_patches(patches):
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InputError(f"need a non-empty (N, n) patch array, got shape {arr.shape}")
    return arr


def train(
    patches,
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    log_every: int = 0,
    on_log: Optional[LogHook] = None,
) -> TrainState:
    """Run ``cfg.epochs`` passes of ``train_step`` over seeded shuffles of ``patches``.

    ``on_log(samples, avg_loss, avg_l1, eta)`` is called every ``log_every``
    samples with averages over the samples since the previous call.
    """
    patches = _as_patches(patches)
    if state is None:
        state = initial_state(patches.shape[1], cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    losses, l1s = [], []
    for _ in range(cfg.epochs):
        for idx in rng.permutation(len(patches)):
            state = train_step(patches[idx], state, cfg)
            losses.append(state.last_loss)
            l1s.append(state.last_l1)
            if log_every and on_log is not None and len(losses) == log_every:
                on_log(state.samples_seen, float(np.mean(losses)), float(np.mean(l1s)), state.current_eta)
                losses, l1s = [], []
    return state


def train_regressor_posthoc(pairs, pred_init: Predictor, cfg: TrainConfig) -> Predictor:
    """Fit the predictor to fixed (signal, code) pairs by SGD on ``||z - F(y)||^2``.

    ``pairs`` is a tuple of arrays ``(signals, codes)`` with matching rows.
    """
    signals, codes = pairs
    signals = _as_patches(signals)
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape != (signals.shape[0], pred_init.m):
        raise ShapeError(f"codes of shape {codes.shape} do not match {signals.shape[0]} signals")
    pred = pred_init.copy()
    eta = cfg.hyper.eta
    rng = np.random.default_rng([cfg.seed, 3])
    for _ in range(cfg.epochs):
        for idx in rng.permutation(len(signals)):
            dg, dw, db = grad_prediction_error(signals[idx], codes[idx], pred)
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(dg))):
                continue
            pred.gain -= eta * dg
            pred.filters -= eta * dw
            pred.bias -= eta * db
            eta = next_eta(eta, cfg)
    return pred


def average_loss(patches, state: TrainState, cfg: TrainConfig) -> float:
    """Mean compound loss over ``patches`` at codes inferred with the current model."""
    patches = _as_patches(patches)
    total = 0.0
    for y in patches:
        z = infer_code(y, state.basis, state.predictor, cfg)
        total += compound_loss(y, z, state.basis, state.predictor, cfg.hyper)
    return total / len(patches)
