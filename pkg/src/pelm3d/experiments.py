"""Studies built on the feature map: double descent, saturation, split ratio,
capacity and plane decorrelation, plus their CSV/JSON persistence."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import learning
from .optics import EmbeddingMatrix, Geometry, PlaneSpec, intensity_planes


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class SweepGrid:
    M_values: tuple[int, ...]
    n_train_values: tuple[int, ...]
    repeats: int = 5
    seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.repeats < 1:
            raise ExperimentError("repeats must be >= 1")
        if min(self.M_values) < 1 or min(self.n_train_values) < 1:
            raise ExperimentError("grid values must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.repeats:
            raise ExperimentError("need one seed per repeat")

    @property
    def repeat_seeds(self) -> tuple[int, ...]:
        return tuple(self.seeds) if self.seeds is not None else tuple(range(self.repeats))


RECORD_FIELDS = ("n_train", "M", "repeat", "seed", "train_accuracy", "test_accuracy", "regime")


@dataclass
class SweepResult:
    records: list[dict]
    fingerprint: str = ""
    lam: float = learning.DEFAULT_LAMBDA

    def summary(self):
        """Mean/std/count of both accuracies per ``(n_train, M)`` cell."""
        cells: dict[tuple[int, int], list[dict]] = {}
        for r in self.records:
            cells.setdefault((r["n_train"], r["M"]), []).append(r)
        out = []
        for (n, m), rs in sorted(cells.items()):
            tr = np.array([r["train_accuracy"] for r in rs])
            te = np.array([r["test_accuracy"] for r in rs])
            out.append({
                "n_train": n, "M": m, "count": len(rs),
                "train_mean": float(tr.mean()), "train_std": float(tr.std()),
                "test_mean": float(te.mean()), "test_std": float(te.std()),
            })
        return out


def _cell(H, y, train_idx, test_idx, M, n_train, repeat, seed, lam):
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, n_train, M])
    report, _ = learning.evaluate(H, y, train_idx, test_idx, M, rng, lam, n_train=n_train)
    rec = {
        "n_train": n_train, "M": M, "repeat": repeat, "seed": seed,
        "train_accuracy": report.train_accuracy, "test_accuracy": report.test_accuracy,
        "regime": report.regime,
    }
    rec["wall_time"] = time.perf_counter() - t0
    return rec


def run_double_descent(
    H, labels, grid: SweepGrid, train_idx, test_idx,
    lam: float = learning.DEFAULT_LAMBDA, n_jobs: int = 1, fingerprint: str = "",
) -> SweepResult:
    """Test/train accuracy over every ``(n_train, M, repeat)`` cell.

    Each cell subsamples ``n_train`` rows from ``train_idx`` and ``M``
    channels, both drawn from a generator keyed by ``(seed, n_train, M)``, so
    results do not depend on execution order. The test set is fixed.
    """
    values = getattr(H, "values", H)
    if max(grid.M_values) > values.shape[1]:
        raise ExperimentError(f"M up to {max(grid.M_values)} requested, only {values.shape[1]} channels")
    if max(grid.n_train_values) > len(train_idx):
        raise ExperimentError(f"n_train up to {max(grid.n_train_values)} requested, {len(train_idx)} available")
    jobs = [
        (M, n, r, s)
        for n in grid.n_train_values
        for M in grid.M_values
        for r, s in enumerate(grid.repeat_seeds)
    ]

    def run(job):
        M, n, r, s = job
        return _cell(values, labels, train_idx, test_idx, M, n, r, s, lam)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]
    records.sort(key=lambda r: (r["n_train"], r["M"], r["repeat"]))
    return SweepResult(records, fingerprint, lam)


def locate_interpolation_dip(result: SweepResult, min_points: int = 5, flat_tol: float = 1e-12) -> dict[int, int | None]:
    """Per ``n_train``, the ``M`` minimizing mean test accuracy.

    ``None`` marks an absent dip: the profile is flat or its minimum sits at
    either end of the ``M`` grid (monotone profiles).
    """
    by_n: dict[int, list[tuple[int, float]]] = {}
    for row in result.summary():
        by_n.setdefault(row["n_train"], []).append((row["M"], row["test_mean"]))
    out = {}
    for n, pts in by_n.items():
        pts.sort()
        if len(pts) < min_points:
            raise ExperimentError(f"n_train={n}: {len(pts)} M values, need at least {min_points}")
        acc = np.array([a for _, a in pts])
        k = int(np.argmin(acc))
        if acc.max() - acc.min() <= flat_tol or k in (0, len(acc) - 1):
            out[n] = None
        else:
            out[n] = pts[k][0]
    return out


@dataclass
class SaturationFit:
    slope: float
    intercept: float
    plateau: float
    onset_M: int | None
    M_values: list[int] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def saturation_fit(M_values, acc, epsilon: float = 1e-3, window: int = 1) -> SaturationFit:
    """Linear fit of accuracy vs ``M`` before the plateau.

    The onset is the first grid point whose moving-average gain over the next
    ``window`` steps falls below ``epsilon``; the fit covers every point up to
    and including it. The plateau level is the mean accuracy over the top
    decile of ``M``.
    """
    M = np.asarray(M_values, dtype=np.float64)
    a = np.asarray(acc, dtype=np.float64)
    if len(M) < 2:
        raise ExperimentError("saturation fit needs at least two M values")
    order = np.argsort(M)
    M, a = M[order], a[order]
    gains = np.diff(a)
    onset = None
    for i in range(len(gains)):
        if gains[i:i + window].mean() < epsilon:
            onset = i
            break
    last = len(M) - 1 if onset is None else onset
    if last < 1:
        raise ExperimentError("too few points before the plateau for a linear fit")
    slope, intercept = np.polyfit(M[: last + 1], a[: last + 1], 1)
    k = max(1, math.ceil(0.1 * len(M)))
    return SaturationFit(
        float(slope), float(intercept), float(a[-k:].mean()),
        None if onset is None else int(M[onset]),
        [int(m) for m in M], [float(x) for x in a],
    )


def run_saturation_study(
    H_by_L: Mapping[int, object], labels, M_values: Sequence[int], train_idx, test_idx,
    n_train: int | None = None, repeats: int = 1, lam: float = learning.DEFAULT_LAMBDA,
    epsilon: float = 1e-3, window: int = 1,
) -> dict[int, SaturationFit]:
    """Accuracy-vs-``M`` curves and saturation fits for several input sizes ``L``."""
    if len(H_by_L) < 2:
        raise ExperimentError("saturation study needs at least two input sizes")
    if len(M_values) < 2:
        raise ExperimentError("saturation study needs at least two M values")
    fits = {}
    for L, H in sorted(H_by_L.items()):
        curve = []
        for M in M_values:
            accs = []
            for r in range(repeats):
                rng = np.random.default_rng([r, L, M])
                rep, _ = learning.evaluate(H, labels, train_idx, test_idx, M, rng, lam, n_train=n_train)
                accs.append(rep.test_accuracy)
            curve.append(float(np.mean(accs)))
        fits[L] = saturation_fit(M_values, curve, epsilon, window)
    return fits


@dataclass
class SplitStudy:
    records: list[dict]
    tolerance: float

    def summary(self):
        cells: dict[tuple[int, float], list[float]] = {}
        for r in self.records:
            cells.setdefault((r["M"], r["fraction"]), []).append(r["test_accuracy"])
        return [
            {"M": m, "fraction": f, "count": len(v), "test_mean": float(np.mean(v)), "test_std": float(np.std(v))}
            for (m, f), v in sorted(cells.items())
        ]

    def smallest_sufficient_fraction(self) -> dict[int, float]:
        """Per ``M``, the smallest fraction whose mean accuracy is within ``tolerance`` of the best."""
        by_m: dict[int, list[tuple[float, float]]] = {}
        for row in self.summary():
            by_m.setdefault(row["M"], []).append((row["fraction"], row["test_mean"]))
        out = {}
        for m, pts in by_m.items():
            best = max(a for _, a in pts)
            out[m] = min(f for f, a in pts if a >= best - self.tolerance)
        return out


def run_split_study(
    H, labels, fractions: Sequence[float], M_values: Sequence[int], repeats: int = 5,
    lam: float = learning.DEFAULT_LAMBDA, tolerance: float = 0.02, seeds: Sequence[int] | None = None,
) -> SplitStudy:
    """Test accuracy as the train/test split ratio varies, per ``M``."""
    values = getattr(H, "values", H)
    if any(not 0 < f < 1 for f in fractions):
        raise ExperimentError("fractions must lie in (0, 1)")
    seeds = list(seeds) if seeds is not None else list(range(repeats))
    records = []
    for M in M_values:
        for f in fractions:
            for r, s in enumerate(seeds):
                split = learning.make_split(values.shape[0], f, s)
                rng = np.random.default_rng([s, M])
                rep, _ = learning.evaluate(values, labels, split.train_idx, split.test_idx, M, rng, lam)
                records.append({
                    "M": M, "fraction": f, "repeat": r, "seed": s, "n_train": split.n_train,
                    "train_accuracy": rep.train_accuracy, "test_accuracy": rep.test_accuracy,
                })
    return SplitStudy(records, tolerance)


@dataclass(frozen=True)
class CapacityReport:
    L: int
    M_total: int
    capacity: int


def capacity(L: int, M_total: int) -> CapacityReport:
    """Network capacity ``L * M_total`` in exact integer arithmetic."""
    for name, v in (("L", L), ("M_total", M_total)):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
            raise ExperimentError(f"{name} must be a positive integer, got {v!r}")
    return CapacityReport(int(L), int(M_total), int(L) * int(M_total))


@dataclass
class CorrelationReport:
    mean: np.ndarray
    mean_abs: np.ndarray
    undefined: list[tuple[int, int]]

    def max_off_diagonal(self) -> float:
        off = ~np.eye(len(self.mean_abs), dtype=bool)
        return float(np.nanmax(self.mean_abs[off])) if off.any() else 0.0


def _pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, (a * b).sum(axis=1) / den, np.nan)


def plane_correlation_diagnostic(
    masks, w: EmbeddingMatrix, planes: Sequence[PlaneSpec], geometry: Geometry | None = None,
) -> CorrelationReport:
    """Pearson correlation of plane intensity patterns, averaged over a mask batch.

    Pairs for which some pattern is constant have no defined correlation; they
    are reported in ``undefined`` and averaged over the remaining masks.
    """
    masks = np.asarray(masks)
    if len(planes) < 2:
        raise ExperimentError("need at least two planes")
    if len(masks) < 16:
        raise ExperimentError("need at least 16 masks")
    g = geometry or Geometry()
    flat = [i.reshape(len(masks), -1) for i in intensity_planes(masks, w, planes, g)]
    p = len(planes)
    mean = np.empty((p, p))
    mean_abs = np.empty((p, p))
    undefined = []
    for i in range(p):
        for j in range(p):
            r = _pearson(flat[i], flat[j])
            if np.isnan(r).any():
                undefined.append((planes[i].plane_id, planes[j].plane_id))
            if np.isnan(r).all():
                mean[i, j] = mean_abs[i, j] = np.nan
            else:
                mean[i, j] = np.nanmean(r)
                mean_abs[i, j] = np.nanmean(np.abs(r))
    return CorrelationReport(mean, mean_abs, undefined)


def synthetic_task(n: int, m_max: int, d: int = 32, noise: float = 0.3, seed: int = 0):
    """Binary task with a planted linear rule on Gaussian inputs and ReLU random features.

    Returns ``(H, y)`` with ``H`` of shape ``(n, m_max)``.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    teacher = rng.standard_normal(d)
    y = (X @ teacher / np.sqrt(d) + noise * rng.standard_normal(n) > 0).astype(np.int64)
    R = rng.standard_normal((d, m_max)) / np.sqrt(d)
    return np.maximum(X @ R, 0.0), y


def write_records_csv(path, records: Sequence[dict], fields: Sequence[str]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)


def write_json(path, payload) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))
    tmp.replace(path)


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


PLOT_FIELDS = ("figure", "series", "M", "n_train", "fraction", "L", "mean", "std", "count")


def plot_rows_double_descent(result: SweepResult) -> list[dict]:
    """Long-format rows for accuracy-vs-M curves and the (M, n_train) heatmap."""
    rows = []
    for c in result.summary():
        base = {"M": c["M"], "n_train": c["n_train"], "fraction": "", "L": "", "count": c["count"]}
        rows.append({"figure": "accuracy_vs_M", "series": "train", "mean": c["train_mean"], "std": c["train_std"], **base})
        rows.append({"figure": "accuracy_vs_M", "series": "test", "mean": c["test_mean"], "std": c["test_std"], **base})
        rows.append({"figure": "heatmap", "series": "test", "mean": c["test_mean"], "std": c["test_std"], **base})
    return rows


def plot_rows_split(study: SplitStudy) -> list[dict]:
    return [
        {"figure": "accuracy_vs_fraction", "series": "test", "M": c["M"], "n_train": "", "fraction": c["fraction"],
         "L": "", "mean": c["test_mean"], "std": c["test_std"], "count": c["count"]}
        for c in study.summary()
    ]


def plot_rows_saturation(fits: Mapping[int, SaturationFit]) -> list[dict]:
    rows = []
    for L, fit in sorted(fits.items()):
        for m, a in zip(fit.M_values, fit.accuracy):
            rows.append({"figure": "accuracy_vs_M_by_L", "series": "test", "M": m, "n_train": "", "fraction": "",
                         "L": L, "mean": a, "std": "", "count": ""})
    return rows
