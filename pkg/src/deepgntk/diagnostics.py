"""Trainability diagnostics for node kernels.

Convergence traces track how far the diagonally normalized kernel is from a
constant matrix as depth grows; :func:`fit_rate` fits the exponential envelope
of that spread. :func:`condition_number`, :func:`simulate_dynamics` and
:func:`kernel_regression` work on the train block of a finished kernel.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DataError, NumericalError
from .graph import DatasetSplit, LabelVector

SINGULAR_RTOL = 1e-10
KAPPA_FLOOR = 1e-300
PSD_RTOL = 1e-8


# ---------------------------------------------------------------------------
# convergence traces

def normalized_kernel(theta: np.ndarray) -> np.ndarray:
    """Divide ``theta`` by the geometric mean of its diagonal."""
    diag = np.diag(theta)
    if np.any(diag <= 0):
        raise NumericalError("kernel has a non-positive diagonal entry")
    return theta / np.exp(np.mean(np.log(diag)))


def kernel_stats(theta: np.ndarray) -> tuple[float, float, float, float]:
    """``(min, max, mean, spread)`` of the normalized kernel entries."""
    t = normalized_kernel(np.asarray(theta, dtype=np.float64))
    lo, hi = float(t.min()), float(t.max())
    return lo, hi, float(t.mean()), hi - lo


@dataclass
class ConvergenceTrace:
    depth: np.ndarray
    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    spread: np.ndarray
    unit: np.ndarray | None = None
    layer: np.ndarray | None = None
    sigma_spread: np.ndarray | None = None

    def __post_init__(self):
        if len(self.depth) == 0:
            raise DataError("empty trace")
        if np.any(np.diff(self.depth) <= 0):
            raise DataError("trace depth indices must be strictly increasing")

    def __len__(self):
        return len(self.depth)

    def at(self, depth: int) -> int:
        """Row index for ``depth``."""
        hit = np.nonzero(self.depth == depth)[0]
        if len(hit) == 0:
            raise KeyError(depth)
        return int(hit[0])

    def rows(self):
        for i in range(len(self.depth)):
            yield (int(self.depth[i]), self.min[i], self.max[i], self.mean[i], self.spread[i])


class TraceRecorder:
    """Accumulates per-depth statistics without keeping the kernels."""

    def __init__(self, with_sigma: bool = False):
        self.with_sigma = with_sigma
        self._rows = []

    def add(self, depth, unit, layer, theta, sigma=None):
        row = (depth, unit, layer) + kernel_stats(theta)
        if self.with_sigma:
            row = row + (kernel_stats(sigma)[3],)
        self._rows.append(row)

    def finish(self) -> ConvergenceTrace:
        a = np.array(self._rows, dtype=np.float64)
        return ConvergenceTrace(
            depth=a[:, 0].astype(np.int64), min=a[:, 3], max=a[:, 4], mean=a[:, 5],
            spread=a[:, 6], unit=a[:, 1].astype(np.int64), layer=a[:, 2].astype(np.int64),
            sigma_spread=a[:, 7] if self.with_sigma else None)


def trace_convergence(trace_input) -> ConvergenceTrace:
    """Build a trace from an engine trace, a ``{depth: kernel}`` mapping, or
    a sequence of kernels (depth = position) or ``(depth, kernel)`` pairs."""
    if isinstance(trace_input, ConvergenceTrace):
        return trace_input
    if isinstance(trace_input, dict):
        items = sorted(trace_input.items())
    else:
        items = list(trace_input)
        if items and not (isinstance(items[0], tuple) and len(items[0]) == 2):
            items = list(enumerate(items))
    if not items:
        raise DataError("empty trace")
    rec = TraceRecorder()
    for d, theta in items:
        rec.add(int(d), 0, 0, np.atleast_2d(np.asarray(theta, dtype=np.float64)))
    return rec.finish()


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    fit_range: tuple[int, int]
    n_points: int
    truncated: bool = False

    def to_json(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept,
                "r_squared": self.r_squared, "fit_range": list(self.fit_range),
                "n_points": self.n_points, "truncated": self.truncated}


def fit_rate(trace: ConvergenceTrace, fit_range: tuple[int, int] | None = None,
             min_points: int = 10) -> RateFit:
    """Least-squares line through ``(depth, log spread)``.

    Depths whose spread is at the rounding floor (``1e3·eps·|mean|``) are
    dropped; if that shortens the requested range, ``truncated`` is set.
    """
    d = np.asarray(trace.depth, dtype=np.float64)
    s = np.asarray(trace.spread, dtype=np.float64)
    in_range = np.ones(len(d), dtype=bool)
    if fit_range is not None:
        in_range = (d >= fit_range[0]) & (d <= fit_range[1])
    floor = 1e3 * np.finfo(float).eps * np.abs(np.asarray(trace.mean))
    usable = in_range & (s > floor) & (s > 0)
    n = int(usable.sum())
    if n < min_points:
        raise NumericalError(f"only {n} depths with resolvable spread in range "
                             f"(need {min_points})")
    x, y = d[usable], np.log(s[usable])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - float(np.sum(resid ** 2)) / ss_tot)
    return RateFit(float(slope), float(intercept), r2, (int(x[0]), int(x[-1])), n,
                   truncated=bool(n < in_range.sum()))


# ---------------------------------------------------------------------------
# spectra and dynamics

@dataclass(frozen=True)
class ConditionEntry:
    lambda_min: float
    lambda_max: float
    kappa: float
    singular: bool
    depth: int | None = None


@dataclass
class TrainabilityReport:
    entries: list[ConditionEntry] = field(default_factory=list)

    def add(self, entry: ConditionEntry):
        self.entries.append(entry)

    def rows(self):
        for e in self.entries:
            yield (e.depth, e.lambda_min, e.lambda_max, e.kappa)


def _principal(theta: np.ndarray, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise DataError("empty index set")
    return theta[np.ix_(idx, idx)]


def condition_number(theta: np.ndarray, indices=None, depth: int | None = None
                     ) -> ConditionEntry:
    theta = np.asarray(theta, dtype=np.float64)
    sub = theta if indices is None else _principal(theta, indices)
    evals = np.linalg.eigvalsh(0.5 * (sub + sub.T))
    lo, hi = float(evals[0]), float(evals[-1])
    kappa = hi / max(lo, KAPPA_FLOOR)
    return ConditionEntry(lo, hi, kappa, bool(lo < SINGULAR_RTOL * hi), depth)


@dataclass
class DynamicsResult:
    t: np.ndarray
    residual: np.ndarray
    test_predictions: np.ndarray
    eta: float
    train_predictions: np.ndarray | None = None

    def rows(self):
        for t, r in zip(self.t, self.residual):
            yield (t, r)


def _train_test_targets(labels: LabelVector, split: DatasetSplit):
    train = np.asarray(split.train, dtype=np.int64)
    if train.size == 0:
        raise DataError("split has no training nodes")
    return train, np.asarray(split.test, dtype=np.int64), labels.one_hot(train)


def simulate_dynamics(theta: np.ndarray, labels: LabelVector, split: DatasetSplit,
                      eta: float, times: Sequence[float]) -> DynamicsResult:
    """Closed-form MSE gradient flow from ``f0 = 0`` under a fixed kernel."""
    if eta <= 0:
        raise DataError("learning rate must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    train, test, y = _train_test_targets(labels, split)
    lam, q = np.linalg.eigh(_principal(theta, train))
    top = max(float(lam[-1]), 0.0)
    if lam[0] < -PSD_RTOL * max(top, 1.0):
        raise NumericalError(f"train kernel block is not PSD (lambda_min={lam[0]:.3e})")
    lam = np.clip(lam, 0.0, None)
    keep = lam >= SINGULAR_RTOL * top if top > 0 else np.zeros_like(lam, dtype=bool)
    # eigenvalues below the floor are rounding noise on a null direction
    lam = np.where(keep, lam, 0.0)
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    qy = q.T @ y
    cross = theta[np.ix_(test, train)] @ q if test.size else np.zeros((0, len(train)))
    times = np.asarray(times, dtype=np.float64)
    resid = np.empty(len(times))
    test_pred = np.empty((len(times), test.size, y.shape[1]))
    train_pred = np.empty((len(times), train.size, y.shape[1]))
    for k, t in enumerate(times):
        decay = np.exp(-eta * lam * t)
        resid[k] = np.linalg.norm(decay[:, None] * qy)
        grown = (1.0 - decay)[:, None] * qy
        train_pred[k] = q @ grown
        test_pred[k] = cross @ (inv[:, None] * grown)
    return DynamicsResult(times, resid, test_pred, float(eta), train_pred)


def default_ridge(theta_train: np.ndarray) -> float:
    return 1e-6 * float(np.trace(theta_train)) / theta_train.shape[0]


def kernel_regression(theta: np.ndarray, labels: LabelVector, split: DatasetSplit,
                      ridge: float | None = None, eval_nodes=None):
    """Ridge-stabilized kernel regression on one-hot targets.

    Returns ``(predicted classes, accuracy)`` on ``eval_nodes`` (the test
    nodes by default).
    """
    theta = np.asarray(theta, dtype=np.float64)
    train, test, y = _train_test_targets(labels, split)
    nodes = test if eval_nodes is None else np.asarray(eval_nodes, dtype=np.int64)
    k_tr = _principal(theta, train)
    eps = default_ridge(k_tr) if ridge is None else float(ridge)
    if eps < 0:
        raise DataError("ridge must be non-negative")
    a = k_tr + eps * np.eye(len(train))
    try:
        factor = sla.cho_factor(a, lower=True)
        alpha = sla.cho_solve(factor, y)
    except np.linalg.LinAlgError:
        entry = condition_number(a)
        raise NumericalError(f"train block is not positive definite after ridge "
                             f"{eps:.3e} (kappa={entry.kappa:.3e})") from None
    if not np.all(np.isfinite(alpha)):
        raise NumericalError(f"kernel solve produced non-finite weights "
                             f"(kappa={condition_number(a).kappa:.3e})")
    scores = theta[np.ix_(nodes, train)] @ alpha
    pred = np.argmax(scores, axis=1)
    truth = labels.labels[nodes]
    acc = float(np.mean(pred == truth)) if nodes.size else float("nan")
    return pred, acc


# ---------------------------------------------------------------------------
# output

def _cell(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def write_trace_csv(path, trace: ConvergenceTrace) -> None:
    write_csv(path, ("depth", "min", "max", "mean", "spread"), trace.rows())


def write_report_csv(path, report: TrainabilityReport) -> None:
    write_csv(path, ("depth", "lambda_min", "lambda_max", "kappa"), report.rows())


def write_dynamics_csv(path, result: DynamicsResult) -> None:
    write_csv(path, ("t", "residual"), result.rows())


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")
