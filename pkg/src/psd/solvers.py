"""Sparse inference: exact BPDN, compound-loss minimization and a brute-force oracle.

Every iterative solver works on a batch of signals stored as rows of a
(N, n) array; the single-signal entry points wrap the batch versions.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, ShapeError
from .model import (
    Hyperparams,
    Mode,
    Predictor,
    check_dictionary,
    predictor_forward,
)

POWER_ITERATIONS = 50
POWER_TOL = 1e-10
ORACLE_MAX_M = 12
TIE_TOL = 1e-12
POLISH_EVERY = 10
POLISH_MAX_DROP = 3


class StepRule(str, enum.Enum):
    FIXED = "fixed"
    BACKTRACKING = "backtracking"


@dataclass(frozen=True)
class SolveOptions:
    """Stopping rule and step policy shared by the iterative solvers.

    A row is converged once both its relative loss decrease and its largest
    coordinate change over one iteration fall below ``tol`` (the latter
    scaled by ``max(1, max|z|)``).
    """

    tol: float = 1e-8
    max_iter: int = 1000
    step_rule: StepRule = StepRule.FIXED

    def __post_init__(self):
        object.__setattr__(self, "step_rule", StepRule(self.step_rule))
        if not self.tol > 0:
            raise PreconditionError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise PreconditionError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class SolveResult:
    code: np.ndarray
    final_loss: np.ndarray | float
    iterations: int
    converged: bool
    losses: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class Bpdn:
    """Objective ``0.5*||y - Bz||^2 + lam*||z||_1``."""

    lam: float


@dataclass(frozen=True)
class Compound:
    """Compound objective with the predictor term, as seen during inference."""

    predictor: Predictor
    hyper: Hyperparams


def soft_threshold(x, t):
    """Proximal operator of ``t*|.|``, elementwise."""
    if np.any(np.asarray(t) < 0):
        raise PreconditionError(f"threshold must be >= 0, got {t}")
    out = np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def spectral_norm(b, n_iter=POWER_ITERATIONS, tol=POWER_TOL) -> float:
    """Largest singular value of ``b`` by power iteration on ``b.T @ b``."""
    b = np.asarray(b, dtype=np.float64)
    gram = b.T @ b
    v = np.random.default_rng(0).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(n_iter):
        w = gram @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        new = float(v @ gram @ v)
        if abs(new - est) <= tol * max(new, 1.0):
            est = new
            break
        est = new
    return float(np.sqrt(max(est, 0.0)))


def _as_batch(y, n):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim not in (1, 2) or y.shape[-1] != n:
        raise ShapeError(f"signals of shape {y.shape} do not match input size {n}")
    return np.atleast_2d(y), y.ndim == 1


def _converged(prev_loss, loss, prev_z, z, tol):
    rel = (prev_loss - loss) / np.maximum(np.abs(prev_loss), np.finfo(float).tiny)
    scale = np.maximum(1.0, np.abs(z).max(axis=1))
    step = np.abs(z - prev_z).max(axis=1)
    return (rel <= tol) & (step <= tol * scale)


def _unbatch(res: SolveResult, single: bool) -> SolveResult:
    if single:
        res.code = res.code[0]
        res.final_loss = float(res.final_loss[0])
        res.losses = res.losses[:, 0]
    return res


def _polish(z, gram, corr, lam, rank, max_drop=POLISH_MAX_DROP):
    """Solve the stationarity system on a guessed support and verify KKT.

    The guesses are the support of ``z`` and the same support with up to
    ``max_drop`` of its smallest-magnitude entries removed (a coordinate
    creeping toward zero is the usual reason coordinate descent stalls).
    Returns the refined code, or None if no guess passes.
    """
    order = np.argsort(-np.abs(z), kind="stable")
    nnz = int(np.count_nonzero(z))
    top = min(nnz, rank)
    for size in range(top, max(top - max_drop, 1) - 1, -1):
        support = np.sort(order[:size])
        signs = np.sign(z[support])
        try:
            zs = np.linalg.solve(gram[np.ix_(support, support)], corr[support] - lam * signs)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(zs)) or np.any(zs * signs <= 0):
            continue
        out = np.zeros_like(z)
        out[support] = zs
        g = corr - gram @ out
        off = np.ones(z.size, dtype=bool)
        off[support] = False
        if np.all(np.abs(g[off]) <= lam + 1e-10 * max(1.0, lam)):
            return out
    return None


def solve_bpdn_cd_batch(y, b, lam: float, opts: SolveOptions = SolveOptions()) -> SolveResult:
    """Cyclic coordinate descent on ``0.5*||y - Bz||^2 + lam*||z||_1``.

    Columns of ``b`` must be unit norm so each coordinate step is a plain
    soft threshold of the partial correlation.  Every ``POLISH_EVERY``
    sweeps, and whenever a row meets the stopping rule, the current support
    and signs are refined by an exact restricted solve that is kept only
    if it satisfies the optimality conditions and does not raise the loss.
    Converged rows are frozen.
    """
    b = check_dictionary(b)
    if lam < 0:
        raise PreconditionError(f"lambda must be >= 0, got {lam}")
    n, m = b.shape
    Y, _ = _as_batch(y, n)
    N = Y.shape[0]
    gram = b.T @ b
    rank = np.linalg.matrix_rank(gram)
    corr = Y @ b
    Z = np.zeros((N, m))
    loss = 0.5 * np.einsum("ij,ij->i", Y, Y)
    history = [loss.copy()]
    done = np.zeros(N, dtype=bool)

    def row_loss(rows, Zr):
        r = Y[rows] - Zr @ b.T
        return 0.5 * np.einsum("ij,ij->i", r, r) + lam * np.abs(Zr).sum(axis=1)

    it = 0
    for it in range(1, opts.max_iter + 1):
        active = np.flatnonzero(~done)
        Za = Z[active]
        prev = Za.copy()
        # q = B^T (y - Bz), refreshed each sweep to stop drift
        q = corr[active] - Za @ gram
        for j in range(m):
            zj = soft_threshold(q[:, j] + Za[:, j], lam)
            d = zj - Za[:, j]
            if d.any():
                q -= np.outer(d, gram[j])
                Za[:, j] = zj
        new_loss = row_loss(active, Za)
        stop = _converged(loss[active], new_loss, prev, Za, opts.tol)
        check = stop if it % POLISH_EVERY and it < opts.max_iter else np.ones_like(stop)
        for i in np.flatnonzero(check):
            refined = _polish(Za[i], gram, corr[active[i]], lam, rank)
            if refined is not None:
                val = row_loss(active[i : i + 1], refined[None])[0]
                if val <= new_loss[i] + 1e-12 * max(1.0, abs(new_loss[i])):
                    Za[i], new_loss[i], stop[i] = refined, min(val, new_loss[i]), True
        Z[active] = Za
        loss[active] = new_loss
        done[active] = stop
        history.append(loss.copy())
        if done.all():
            break
    return SolveResult(Z, loss, it, bool(done.all()), np.array(history))


def solve_bpdn_cd(y, b, lam: float, opts: SolveOptions = SolveOptions()) -> SolveResult:
    """Exact BPDN solve for one signal (or a batch; see ``solve_bpdn_cd_batch``)."""
    b = np.asarray(b, dtype=np.float64)
    _, single = _as_batch(y, b.shape[0])
    return _unbatch(solve_bpdn_cd_batch(y, b, lam, opts), single)


def _compound_rows(Y, Z, b, F, lam, alpha):
    r = Y - Z @ b.T
    e = Z - F
    return (
        np.einsum("ij,ij->i", r, r)
        + lam * np.abs(Z).sum(axis=1)
        + alpha * np.einsum("ij,ij->i", e, e)
    )


def infer_optimal_batch(
    y, b, p: Predictor, h: Hyperparams, opts: SolveOptions = SolveOptions()
) -> SolveResult:
    """Minimize the compound loss in z by proximal gradient, starting at F(y).

    In separate mode the prediction term is dropped (alpha = 0); in
    autoencoder mode the prediction is returned unchanged.
    """
    b = np.asarray(b, dtype=np.float64)
    n, m = b.shape
    if p.filters.shape != (m, n):
        raise ShapeError(f"predictor filters {p.filters.shape} do not match dictionary {b.shape}")
    Y, _ = _as_batch(y, n)
    F = predictor_forward(Y, p)
    lam = h.lam
    alpha = h.inference_alpha
    loss = _compound_rows(Y, F, b, F, lam, alpha)
    if h.mode is Mode.AUTOENCODER:
        return SolveResult(F, loss, 0, True, loss[None, :])

    lipschitz = 2.0 * (spectral_norm(b) ** 2 + alpha)
    step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    Z = F.copy()
    history = [loss]
    done = np.zeros(Y.shape[0], dtype=bool)

    it = 0
    for it in range(1, opts.max_iter + 1):
        r = Z @ b.T - Y
        grad = 2.0 * (r @ b) + 2.0 * alpha * (Z - F)
        if opts.step_rule is StepRule.FIXED:
            new = soft_threshold(Z - step * grad, step * lam)
        else:
            new, step = _backtrack(Z, grad, b, lam, alpha, step)
        new_loss = _compound_rows(Y, new, b, F, lam, alpha)
        done = _converged(loss, new_loss, Z, new, opts.tol)
        Z, loss = new, new_loss
        history.append(loss)
        if done.all():
            break
    return SolveResult(Z, loss, it, bool(done.all()), np.array(history))


def _backtrack(Z, grad, b, lam, alpha, step):
    # grow once, then halve until the quadratic upper bound holds on every row.
    # The smooth part is quadratic, so f(z + d) - f(z) - <grad, d> equals
    # ||B d||^2 + alpha ||d||^2 exactly; testing that directly avoids the
    # cancellation of differencing two nearly equal losses.
    step *= 2.0
    while True:
        new = soft_threshold(Z - step * grad, step * lam)
        d = new - Z
        bd = d @ b.T
        curv = np.einsum("ij,ij->i", bd, bd) + alpha * np.einsum("ij,ij->i", d, d)
        if np.all(curv <= np.einsum("ij,ij->i", d, d) / (2 * step)):
            return new, step
        step *= 0.5


def infer_optimal(
    y, b, p: Predictor, h: Hyperparams, opts: SolveOptions = SolveOptions()
) -> SolveResult:
    b = np.asarray(b, dtype=np.float64)
    _, single = _as_batch(y, b.shape[0])
    return _unbatch(infer_optimal_batch(y, b, p, h, opts), single)


def infer_approx(y, p: Predictor) -> np.ndarray:
    """Single forward pass through the predictor; the dictionary is not used."""
    return predictor_forward(y, p)


_SIGN_TABLES: dict[int, np.ndarray] = {}


def _sign_patterns(k):
    if k not in _SIGN_TABLES:
        _SIGN_TABLES[k] = np.array(list(itertools.product((-1.0, 1.0), repeat=k))).reshape(-1, k)
    return _SIGN_TABLES[k]


def solve_oracle(y, b, objective: Bpdn | Compound) -> np.ndarray:
    """Exact minimizer by enumerating every support and sign pattern.

    For each candidate the stationarity system restricted to the support
    is solved; the candidate is kept if its signs match the pattern and
    every off-support gradient magnitude is at most lambda.  Among the
    survivors the smallest objective wins, ties going to the smaller
    support and then to the lexicographically smallest sign vector.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"dictionary must be 2-D, got shape {b.shape}")
    n, m = b.shape
    if m > ORACLE_MAX_M:
        raise PreconditionError(f"oracle enumeration limited to m <= {ORACLE_MAX_M}, got m={m}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n,):
        raise ShapeError(f"signal of shape {y.shape} does not match dictionary {b.shape}")

    if isinstance(objective, Bpdn):
        scale, alpha, lam, f = 0.5, 0.0, objective.lam, np.zeros(m)
    elif isinstance(objective, Compound):
        h = objective.hyper
        if h.mode is Mode.AUTOENCODER:
            return predictor_forward(y, objective.predictor)
        scale, alpha, lam = 1.0, h.inference_alpha, h.lam
        f = predictor_forward(y, objective.predictor)
    else:
        raise TypeError(f"unknown objective {objective!r}")

    # smooth part: scale*(||y - Bz||^2 + alpha*||z - f||^2), gradient A z - r
    A = 2.0 * scale * (b.T @ b + alpha * np.eye(m))
    r = 2.0 * scale * (b.T @ y + alpha * f)
    slack = 1e-9 * max(1.0, lam)

    def value(Z):
        res = y[:, None] - b @ Z
        e = Z - f[:, None]
        return scale * ((res * res).sum(0) + alpha * (e * e).sum(0)) + lam * np.abs(Z).sum(0)

    best = None  # (objective, support size, sign tuple, code)
    for mask in range(1 << m):
        support = [j for j in range(m) if mask >> j & 1]
        k = len(support)
        if k == 0:
            Z = np.zeros((m, 1))
            signs = np.zeros((1, 0))
        else:
            A_ss = A[np.ix_(support, support)]
            eig = np.linalg.eigvalsh(A_ss)
            if eig[0] <= 1e-12 * max(eig[-1], 1.0):
                continue
            signs = _sign_patterns(k)
            zs = np.linalg.solve(A_ss, r[support][:, None] - lam * signs.T)
            keep = np.all(signs.T * zs > 0, axis=0)
            if not keep.any():
                continue
            zs, signs = zs[:, keep], signs[keep]
            Z = np.zeros((m, zs.shape[1]))
            Z[support] = zs
        grad = A @ Z - r[:, None]
        off = np.ones(m, dtype=bool)
        off[support] = False
        feasible = np.all(np.abs(grad[off]) <= lam + slack, axis=0)
        if not feasible.any():
            continue
        vals = value(Z)
        for idx in np.flatnonzero(feasible):
            full_signs = np.zeros(m)
            full_signs[support] = signs[idx]
            cand = (float(vals[idx]), k, tuple(full_signs), Z[:, idx].copy())
            if best is None or _better(cand, best):
                best = cand
    if best is None:
        raise PreconditionError("no feasible support/sign pattern found")
    return best[3]


def _better(cand, best):
    if cand[0] < best[0] - TIE_TOL:
        return True
    if cand[0] > best[0] + TIE_TOL:
        return False
    return (cand[1], cand[2]) < (best[1], best[2])
