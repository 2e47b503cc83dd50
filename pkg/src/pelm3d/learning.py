"""Linear readout: ridge regression, thresholding and the random-projection baseline."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

DEFAULT_LAMBDA = 1e-4
DEFAULT_TRAIN_FRACTION = 0.67
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2)


class RidgeError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int
    n_train: int
    n_test: int
    train_idx: np.ndarray = field(repr=False, compare=False)
    test_idx: np.ndarray = field(repr=False, compare=False)


def make_split(n: int, train_fraction: float = DEFAULT_TRAIN_FRACTION, seed: int = 0) -> SplitSpec:
    """Random train/test partition of ``range(n)``."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(train_fraction * n))
    if not 0 < n_train < n:
        raise ValueError(f"split of {n} rows at {train_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitSpec(train_fraction, seed, n_train, n - n_train, np.sort(perm[:n_train]), np.sort(perm[n_train:]))


@dataclass(frozen=True)
class ReadoutModel:
    beta: np.ndarray
    lam: float
    channel_subset: np.ndarray
    bias: bool = False
    form: str = "primal"
    seeds: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.channel_subset)


@dataclass(frozen=True)
class EvalReport:
    train_accuracy: float
    test_accuracy: float
    M: int
    n_train: int

    @property
    def regime(self) -> str:
        if self.M == self.n_train:
            return "interpolation"
        return "under" if self.M < self.n_train else "over"

    def to_dict(self):
        return {
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "M": self.M,
            "n_train": self.n_train,
            "regime": self.regime,
        }


def choose_channels(m_total: int, M: int, seed) -> np.ndarray:
    """``M`` distinct column indices drawn uniformly without replacement."""
    if not 1 <= M <= m_total:
        raise ValueError(f"M={M} outside [1, {m_total}]")
    return np.random.default_rng(seed).choice(m_total, size=M, replace=False)


def select_channels(H, M: int, seed):
    """Restrict ``H`` to ``M`` random columns; returns ``(values, columns)``."""
    values = getattr(H, "values", H)
    cols = choose_channels(values.shape[1], M, seed)
    return values[:, cols], cols


def _design(H, bias):
    H = np.asarray(H, dtype=np.float64)
    if bias:
        H = np.hstack([H, np.ones((H.shape[0], 1))])
    return H


def _spd_solve(A, b, lam):
    if not np.all(np.isfinite(A)):
        raise RidgeError("Gram matrix overflowed; rescale the features")
    try:
        c = sla.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise RidgeError(
            f"regularized system is numerically singular at lambda={lam:g}; try a larger lambda"
        ) from None
    return sla.cho_solve(c, b, check_finite=False)


def ridge_primal(H, y, lam):
    """``(H^T H + lam I)^{-1} H^T y`` via Cholesky."""
    with np.errstate(over="ignore"):
        A = H.T @ H
    A[np.diag_indices_from(A)] += lam
    return _spd_solve(A, H.T @ y, lam)


def ridge_dual(H, y, lam):
    """``H^T (H H^T + lam I)^{-1} y`` via Cholesky."""
    with np.errstate(over="ignore"):
        K = H @ H.T
    K[np.diag_indices_from(K)] += lam
    return H.T @ _spd_solve(K, y, lam)


def fit_ridge(H, y, lam: float = DEFAULT_LAMBDA, bias: bool = False, form: str = "auto", channel_subset=None) -> ReadoutModel:
    """Closed-form ridge readout minimizing ``||H b - y||^2 + lam ||b||^2``.

    ``form="auto"`` solves the ``M x M`` primal system when ``M <= N`` and the
    ``N x N`` dual system otherwise. With ``bias`` a constant column is
    appended (and regularized like the others).
    """
    if not lam > 0:
        raise RidgeError("lambda must be positive")
    X = _design(H, bias)
    if not np.all(np.isfinite(X)):
        raise RidgeError("feature matrix has non-finite entries")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise RidgeError(f"{len(y)} labels for {X.shape[0]} rows")
    n, m = X.shape
    if form == "auto":
        form = "primal" if m <= n else "dual"
    if form == "primal":
        beta = ridge_primal(X, y, lam)
    elif form == "dual":
        beta = ridge_dual(X, y, lam)
    else:
        raise ValueError(f"unknown ridge form {form!r}")
    if not np.all(np.isfinite(beta)):
        raise RidgeError(f"non-finite weights at lambda={lam:g}; try a larger lambda")
    subset = np.arange(H.shape[1]) if channel_subset is None else np.asarray(channel_subset)
    return ReadoutModel(beta, float(lam), subset, bias, form)


def decision_function(model: ReadoutModel, H) -> np.ndarray:
    X = _design(H, model.bias)
    if X.shape[1] != len(model.beta):
        raise ValueError(f"expected {len(model.beta) - model.bias} feature columns, got {np.shape(H)[1]}")
    return X @ model.beta


def threshold(scores) -> np.ndarray:
    """Heaviside step at 0.5, with a score of exactly 0.5 mapped to class 1."""
    return (np.asarray(scores) >= 0.5).astype(np.int64)


def predict(model: ReadoutModel, H) -> np.ndarray:
    return threshold(decision_function(model, H))


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("label vectors differ in length")
    if y_true.size == 0:
        raise ValueError("accuracy of an empty label vector")
    return float(np.mean(y_true == y_pred))


def evaluate(H, y, train_idx, test_idx, M=None, seed=0, lam=DEFAULT_LAMBDA, n_train=None, bias=False,
             lambda_grid=None, folds: int = 5):
    """Fit on (a subsample of) ``train_idx`` using ``M`` random channels.

    Returns ``(EvalReport, ReadoutModel)``. ``n_train`` rows are drawn from
    ``train_idx`` without replacement using ``seed``; ``M=None`` uses every
    column. ``lam="cv"`` picks lambda from ``lambda_grid`` with
    :func:`select_lambda` on the training rows; ``model.lam`` holds the pick.
    """
    values = getattr(H, "values", H)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    train_idx = np.asarray(train_idx)
    if n_train is not None:
        if not 1 <= n_train <= len(train_idx):
            raise ValueError(f"n_train={n_train} outside [1, {len(train_idx)}]")
        train_idx = np.sort(rng.choice(train_idx, size=n_train, replace=False))
    m_total = values.shape[1]
    cols = np.arange(m_total) if M is None else choose_channels(m_total, M, rng)
    Htr = values[np.ix_(train_idx, cols)]
    Hte = values[np.ix_(np.asarray(test_idx), cols)]
    if lam == "cv":
        lam, _ = select_lambda(Htr, y[train_idx], lambda_grid or LAMBDA_GRID, folds, rng, bias)
    model = fit_ridge(Htr, y[train_idx], lam, bias=bias, channel_subset=cols)
    report = EvalReport(
        accuracy(y[train_idx], predict(model, Htr)),
        accuracy(y[test_idx], predict(model, Hte)),
        len(cols),
        len(train_idx),
    )
    return report, model


def select_lambda(H, y, grid=LAMBDA_GRID, folds: int = 5, seed=0, bias: bool = False):
    """Pick ``lambda`` from ``grid`` by k-fold validation accuracy on ``(H, y)``.

    Only the rows passed in are used, so call it with the training rows.
    Each fold takes one eigendecomposition of its Gram matrix, after which
    every grid value costs a matrix-vector product. Ties go to the larger
    lambda. Returns ``(best_lambda, {lambda: mean_accuracy})``.
    """
    X = _design(H, bias)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if not 2 <= folds <= n:
        raise ValueError(f"folds={folds} needs 2 <= folds <= {n}")
    grid = sorted(float(g) for g in grid)
    if not grid or grid[0] <= 0:
        raise RidgeError("lambda grid must be non-empty and positive")
    order = np.random.default_rng(seed).permutation(n)
    K = X @ X.T
    hits = np.zeros(len(grid))
    for part in np.array_split(order, folds):
        fit = np.setdiff1d(order, part)
        evals, U = np.linalg.eigh(K[np.ix_(fit, fit)])
        evals = np.maximum(evals, 0.0)
        proj = U.T @ y[fit]
        K_val = K[np.ix_(part, fit)] @ U
        for i, lam in enumerate(grid):
            scores = K_val @ (proj / (evals + lam))
            hits[i] += np.sum(threshold(scores) == y[part])
    acc = hits / n
    best = max(range(len(grid)), key=lambda i: (acc[i], grid[i]))
    return grid[best], dict(zip(grid, acc.tolist()))


def quantize_unit(a, bits: int, scale: float):
    """Round ``a / scale`` (clamped to [0, 1]) to ``2**bits`` levels, in units of ``scale``."""
    levels = (1 << bits) - 1
    return np.round(np.clip(np.asarray(a) / scale, 0.0, 1.0) * levels) * (scale / levels)


def rp_matrix(L: int, M: int, seed) -> np.ndarray:
    """Uniform random projection on ``[-1, 1]``, shape ``(L, M)``."""
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(L, M))


def rp_features(X, R) -> np.ndarray:
    """Quadratic random features ``(X R)**2``."""
    P = X @ R
    return np.asarray(P) ** 2


def rp_baseline(X, y, M: int, seed=0, lam=DEFAULT_LAMBDA, train_idx=None, test_idx=None, n_train=None, bits=0) -> EvalReport:
    """Digital random-projection ELM on tf-idf rows, trained like the optical path.

    With ``bits > 0`` both the inputs and the readout features are discretized
    to ``2**bits`` levels, scaled by the maximum over the training rows.
    """
    y = np.asarray(y)
    if train_idx is None or test_idx is None:
        split = make_split(X.shape[0], seed=seed)
        train_idx, test_idx = split.train_idx, split.test_idx
    rng = np.random.default_rng(seed)
    if n_train is not None:
        train_idx = np.sort(rng.choice(train_idx, size=n_train, replace=False))
    X = sp.csr_matrix(X, dtype=np.float64) if sp.issparse(X) else np.asarray(X, dtype=np.float64)
    if bits:
        top = X[train_idx].max()
        if top > 0:
            X = X.copy()
            if sp.issparse(X):
                X.data = quantize_unit(X.data, bits, top)
            else:
                X = quantize_unit(X, bits, top)
    R = rp_matrix(X.shape[1], M, rng)
    F = rp_features(X, R)
    if bits:
        F = quantize_unit(F, bits, float(F[train_idx].max()))
    report, _ = evaluate(F, y, train_idx, test_idx, None, rng, lam)
    return report


_MODEL_MAGIC = b"PELMRIDG"


def write_model(path, model: ReadoutModel) -> None:
    """JSON header then the float64 weights.

    Layout: 8-byte magic, uint64 header length ``h``, ``h`` bytes of UTF-8
    JSON, then ``len(beta)`` little-endian float64 values.
    """
    header = json.dumps({
        "lambda": model.lam,
        "bias": model.bias,
        "form": model.form,
        "seeds": model.seeds,
        "n_beta": len(model.beta),
        "channel_subset": [int(c) for c in model.channel_subset],
    }).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(_MODEL_MAGIC + struct.pack("<Q", len(header)) + header)
        fh.write(np.ascontiguousarray(model.beta, dtype="<f8").tobytes())
    tmp.replace(path)


def read_model(path) -> ReadoutModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    (h,) = struct.unpack_from("<Q", raw, 8)
    meta = json.loads(raw[16:16 + h])
    beta = np.frombuffer(raw, dtype="<f8", offset=16 + h)
    if len(beta) != meta["n_beta"]:
        raise ValueError(f"{path}: truncated weights")
    return ReadoutModel(beta.copy(), meta["lambda"], np.asarray(meta["channel_subset"], dtype=np.int64),
                        meta["bias"], meta["form"], meta["seeds"])
