"""Measurements: SNR between code sets, sparsity, stability, timing and recognition features.

Code sets are (N, m) arrays whose rows are aligned across the sets being
compared (row i of every set comes from the same patch).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import InputError, PreconditionError, ShapeError
from .model import Hyperparams, Predictor
from .solvers import (
    SolveOptions,
    infer_approx,
    infer_optimal,
    infer_optimal_batch,
    solve_bpdn_cd,
    solve_bpdn_cd_batch,
)

EXACT_ZERO = 1e-12
STATES = ("-", "0", "+")


def exact_lambda(h: Hyperparams) -> float:
    """BPDN weight whose minimizer matches the compound loss at alpha = 0.

    The compound loss has no 0.5 on the reconstruction term, so its
    lambda corresponds to half that value in the BPDN objective.
    """
    return h.lam / 2.0


def _codes(c):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        c = c[None, :]
    if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] == 0:
        raise InputError(f"need a non-empty (N, m) code set, got shape {c.shape}")
    return c


@dataclass
class SnrReport:
    mean_db: float
    pooled_db: float
    n_pairs: int
    n_zero_noise: int
    n_zero_signal: int


def snr_report(reference, approximation) -> SnrReport:
    """Per-pair SNR in dB averaged over pairs, plus the pooled-variance SNR.

    Pairs with zero noise variance are excluded from the mean and counted;
    so are pairs whose reference has zero variance (their SNR is -inf).
    """
    ref, approx = _codes(reference), _codes(approximation)
    if ref.shape != approx.shape:
        raise InputError(f"misaligned code sets: {ref.shape} vs {approx.shape}")
    sig = ref.var(axis=1)
    noise = (ref - approx).var(axis=1)
    zero_noise = noise == 0
    zero_sig = (sig == 0) & ~zero_noise
    keep = ~(zero_noise | zero_sig)
    mean_db = float(np.mean(10.0 * np.log10(sig[keep] / noise[keep]))) if keep.any() else np.inf
    total_noise = noise.sum()
    pooled = np.inf if total_noise == 0 else 10.0 * np.log10(sig.sum() / total_noise)
    return SnrReport(mean_db, float(pooled), len(ref), int(zero_noise.sum()), int(zero_sig.sum()))


def snr(reference, approximation) -> float:
    """Average per-pair SNR in dB; ``inf`` when no pair has any noise."""
    return snr_report(reference, approximation).mean_db


def avg_l1(codes) -> float:
    return float(np.abs(_codes(codes)).sum(axis=1).mean())


def zero_fraction(codes, threshold: float = EXACT_ZERO) -> float:
    return float(np.mean(np.abs(_codes(codes)) <= threshold))


def calibrate_threshold(codes, target_zero_fraction: float) -> float:
    """Smallest threshold whose zero fraction is closest to the target.

    Entries with ``|z| <= threshold`` count as zero.
    """
    if not 0.0 <= target_zero_fraction <= 1.0:
        raise PreconditionError(f"target fraction must be in [0, 1], got {target_zero_fraction}")
    mags = np.sort(np.abs(_codes(codes)).ravel())
    candidates = np.unique(np.concatenate([[0.0], mags]))
    fractions = np.searchsorted(mags, candidates, side="right") / mags.size
    return float(candidates[np.argmin(np.abs(fractions - target_zero_fraction))])


@dataclass
class TransitionStats:
    """Sign-state transitions, rows = previous state, columns = next, order (-, 0, +)."""

    counts: np.ndarray
    probs: np.ndarray = field(init=False)

    def __post_init__(self):
        totals = self.counts.sum(axis=1, keepdims=True)
        self.probs = np.divide(
            self.counts, totals, out=np.zeros((3, 3)), where=totals > 0
        )

    @property
    def change_probability(self) -> float:
        """Fraction of all transitions in which the state changed."""
        return 1.0 - np.trace(self.counts) / self.counts.sum()

    @property
    def marginal(self) -> np.ndarray:
        """Distribution of the next state over all transitions."""
        return self.counts.sum(axis=0) / self.counts.sum()

    def row_tv_from_marginal(self) -> np.ndarray:
        """Total-variation distance of each conditional row from the marginal."""
        return 0.5 * np.abs(self.probs - self.marginal).sum(axis=1)

    def table(self) -> list[list[str]]:
        """3x3 labeled table of P(next | previous) with a header row."""
        rows = [["prev\\next", *STATES]]
        for label, row in zip(STATES, self.probs):
            rows.append([label, *(f"{v:.6f}" for v in row)])
        return rows


def sign_states(codes, threshold: float) -> np.ndarray:
    """0, 1, 2 for negative, zero (``|z| <= threshold``), positive."""
    codes = np.asarray(codes, dtype=np.float64)
    return np.where(np.abs(codes) <= threshold, 1, np.where(codes > 0, 2, 0))


def sign_transition_matrix(frames: Sequence, threshold: float) -> TransitionStats:
    """Pooled transition counts over all units, patches and consecutive frame pairs."""
    if len(frames) < 2:
        raise InputError(f"need at least 2 frames, got {len(frames)}")
    states = np.stack([sign_states(_codes(f), threshold) for f in frames])
    if states.ndim != 3:
        raise InputError("frames must share one (patches, units) shape")
    pairs = states[:-1] * 3 + states[1:]
    counts = np.bincount(pairs.ravel(), minlength=9).reshape(3, 3)
    return TransitionStats(counts)


def random_pair_transition_matrix(frames: Sequence, threshold: float, seed: int) -> TransitionStats:
    """Transition statistics over a random reordering of the frames."""
    order = np.random.default_rng(seed).permutation(len(frames))
    return sign_transition_matrix([frames[i] for i in order], threshold)


@dataclass
class BenchReport:
    timings: dict  # algorithm name -> list of seconds, one per repetition
    batch_size: int
    m: int
    n: int
    fast: str = "approx"
    slow: str = "exact_cd"

    def median(self, name):
        return float(np.median(self.timings[name]))

    def mean(self, name):
        return float(np.mean(self.timings[name]))

    def std(self, name):
        return float(np.std(self.timings[name]))

    @property
    def speedup(self) -> float:
        return self.median(self.slow) / self.median(self.fast)

    def summary_rows(self):
        header = ["algorithm", "median_s", "mean_s", "std_s", "batch_size", "m", "n"]
        rows = [
            [k, self.median(k), self.mean(k), self.std(k), self.batch_size, self.m, self.n]
            for k in self.timings
        ]
        return header, rows

    def raw_rows(self):
        names = list(self.timings)
        reps = len(self.timings[names[0]])
        header = ["repetition", *(f"{k}_s" for k in names)]
        return header, [[i, *(self.timings[k][i] for k in names)] for i in range(reps)]


def time_call(fn, repetitions: int) -> list[float]:
    fn()  # untimed warm-up
    out = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def bench_inference(
    patches,
    model,
    h: Hyperparams,
    opts: SolveOptions = SolveOptions(),
    repetitions: int = 5,
    include_optimal: bool = False,
    exact_lam: float | None = None,
) -> BenchReport:
    """Time the predictor against the exact solver on one batch, single-threaded."""
    if repetitions < 3:
        raise PreconditionError(f"need at least 3 repetitions, got {repetitions}")
    basis, pred = model
    Y = _codes(patches)
    lam = exact_lambda(h) if exact_lam is None else exact_lam

    def check(arr):
        if not np.all(np.isfinite(arr)):
            raise InputError("benchmarked encoder produced non-finite codes")

    algos = {
        "approx": lambda: check(infer_approx(Y, pred)),
        "exact_cd": lambda: check(solve_bpdn_cd_batch(Y, basis, lam, opts).code),
    }
    if include_optimal:
        algos["optimal"] = lambda: check(infer_optimal_batch(Y, basis, pred, h, opts).code)
    with threadpool_limits(limits=1):
        timings = {name: time_call(fn, repetitions) for name, fn in algos.items()}
    return BenchReport(timings, batch_size=len(Y), m=basis.shape[1], n=basis.shape[0])


@dataclass(frozen=True)
class ApproxEncoder:
    predictor: Predictor

    @property
    def n(self):
        return self.predictor.n

    @property
    def m(self):
        return self.predictor.m

    def encode(self, y):
        return infer_approx(y, self.predictor)


@dataclass(frozen=True)
class ExactEncoder:
    basis: np.ndarray
    lam: float
    opts: SolveOptions = SolveOptions()

    @property
    def n(self):
        return self.basis.shape[0]

    @property
    def m(self):
        return self.basis.shape[1]

    def encode(self, y):
        return solve_bpdn_cd(y, self.basis, self.lam, self.opts).code


@dataclass(frozen=True)
class OptimalEncoder:
    basis: np.ndarray
    predictor: Predictor
    hyper: Hyperparams
    opts: SolveOptions = SolveOptions()

    @property
    def n(self):
        return self.basis.shape[0]

    @property
    def m(self):
        return self.basis.shape[1]

    def encode(self, y):
        return infer_optimal(y, self.basis, self.predictor, self.hyper, self.opts).code


Encoder = Union[ApproxEncoder, ExactEncoder, OptimalEncoder]


def encode_convolutional(img, encoder: Encoder, k: int) -> np.ndarray:
    """Encode every stride-1 k-by-k window; returns maps of shape (m, H-k+1, W-k+1).

    Windows are flattened row-major and passed to the encoder as they are,
    without per-window normalization.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if k > min(h, w):
        raise PreconditionError(f"window {k} does not fit image of shape {img.shape}")
    if encoder.n != k * k:
        raise ShapeError(f"encoder expects inputs of size {encoder.n}, window has {k * k}")
    windows = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    out_h, out_w = windows.shape[:2]
    maps = np.empty((encoder.m, out_h, out_w))
    for r in range(out_h):
        for c in range(out_w):
            maps[:, r, c] = encoder.encode(windows[r, c].reshape(-1))
    return maps


def abs_rectify(t) -> np.ndarray:
    return np.abs(np.asarray(t, dtype=np.float64))


def _cell_edges(size, cells):
    return np.floor(np.arange(cells + 1) * size / cells + 0.5).astype(int)


def avg_downsample(t, out_h: int, out_w: int) -> np.ndarray:
    """Mean over a near-uniform out_h x out_w grid of cells of each (..., H, W) map."""
    t = np.asarray(t, dtype=np.float64)
    h, w = t.shape[-2:]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise PreconditionError(f"cannot downsample {h}x{w} to {out_h}x{out_w}")
    re, ce = _cell_edges(h, out_h), _cell_edges(w, out_w)
    sums = np.add.reduceat(np.add.reduceat(t, re[:-1], axis=-2), ce[:-1], axis=-1)
    return sums / np.outer(np.diff(re), np.diff(ce))


def extract_features(img, encoder: Encoder, k: int, grid: int = 30) -> np.ndarray:
    """Convolutional encoding, absolute rectification and average pooling, flattened."""
    maps = encode_convolutional(img, encoder, k)
    size = min(grid, maps.shape[1], maps.shape[2])
    return avg_downsample(abs_rectify(maps), size, size).ravel()


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (classes, features)
    bias: np.ndarray
    l2_weight: float
    classes: np.ndarray

    def scores(self, features):
        return np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weights.T + self.bias

    def predict(self, features) -> np.ndarray:
        return self.classes[np.argmax(self.scores(features), axis=1)]

    def accuracy(self, features, labels) -> float:
        return float(np.mean(self.predict(features) == np.asarray(labels)))


def train_linear_classifier(
    features, labels, l2_weight: float = 1e-4, epochs: int = 50, seed: int = 0
) -> LinearClassifier:
    """Multinomial logistic regression with an L2 penalty, fitted by seeded SGD.

    The base step is ``1 / max ||x||^2`` and decays as 1/(1 + epoch).  The
    penalty is applied as an implicit shrink so that very large weights
    stay stable.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise InputError(f"features {X.shape} and labels {y.shape} are inconsistent")
    if l2_weight < 0:
        raise PreconditionError(f"l2_weight must be >= 0, got {l2_weight}")
    classes, idx = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise InputError("need at least two classes")
    n_cls, d = len(classes), X.shape[1]
    W = np.zeros((n_cls, d))
    b = np.zeros(n_cls)
    onehot = np.eye(n_cls)[idx]
    base = 1.0 / max(float(np.max(np.einsum("ij,ij->i", X, X))), 1e-12)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        lr = base / (1.0 + epoch)
        for i in rng.permutation(len(X)):
            s = W @ X[i] + b
            p = np.exp(s - s.max())
            p /= p.sum()
            g = p - onehot[i]
            W = (W - lr * np.outer(g, X[i])) / (1.0 + lr * l2_weight)
            b -= lr * g
    return LinearClassifier(W, b, l2_weight, classes)


def compare_representations(signals, basis, pred: Predictor, h: Hyperparams, opts: SolveOptions,
                            posthoc: Predictor | None = None, exact_lam: float | None = None) -> dict:
    """Encode ``signals`` every way and compute the pairwise SNR table.

    Keys of the result: the SNR comparisons ``optimal/predictor``,
    ``exact/optimal``, ``exact/predictor`` and (with ``posthoc``)
    ``exact/regressor``; plus ``codes`` with every code set and
    ``sparsity`` with their average l1 norms.
    """
    Y = _codes(signals)
    lam = exact_lambda(h) if exact_lam is None else exact_lam
    codes = {
        "exact": solve_bpdn_cd_batch(Y, basis, lam, opts).code,
        "optimal": infer_optimal_batch(Y, basis, pred, h, opts).code,
        "predictor": infer_approx(Y, pred),
    }
    if posthoc is not None:
        codes["regressor"] = infer_approx(Y, posthoc)
    table = {
        "optimal/predictor": snr_report(codes["optimal"], codes["predictor"]),
        "exact/optimal": snr_report(codes["exact"], codes["optimal"]),
        "exact/predictor": snr_report(codes["exact"], codes["predictor"]),
    }
    if posthoc is not None:
        table["exact/regressor"] = snr_report(codes["exact"], codes["regressor"])
    return {
        "snr": table,
        "codes": codes,
        "sparsity": {k: avg_l1(v) for k, v in codes.items()},
    }
