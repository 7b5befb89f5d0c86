"""Evaluation metrics for predicted vs. subjective quality scores.

Correlations are implemented from first principles: Pearson directly,
Spearman as Pearson on average ranks, and Kendall tau-b with the
merge-sort pair-counting method so large score lists stay O(n log n).
Before computing Pearson/RMSE/MAE the predictions are passed through a
four-parameter logistic fitted by damped Gauss-Newton, the customary
nonlinearity compensation for subjective studies; rank correlations use
the raw predictions since the logistic is monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedCorrelationError

GAUSS_NEWTON_MAX_ITERS = 200
GAUSS_NEWTON_STEP_TOL = 1e-10


def _pair(pred, gt, minimum: int):
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(gt, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"score lists differ in length: {x.size} vs {y.size}")
    if x.size < minimum:
        raise UndefinedCorrelationError(
            f"need at least {minimum} observations, got {x.size}"
        )
    return x, y


def _check_varies(values: np.ndarray, name: str):
    if values.min() == values.max():
        raise UndefinedCorrelationError(f"{name} values are constant")


def plcc(pred, gt) -> float:
    """Pearson linear correlation coefficient."""
    x, y = _pair(pred, gt, 2)
    _check_varies(x, "prediction")
    _check_varies(y, "ground-truth")
    dx = x - x.mean()
    dy = y - y.mean()
    return float((dx @ dy) / math.sqrt((dx @ dx) * (dy @ dy)))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srocc(pred, gt) -> float:
    """Spearman rank-order correlation: Pearson on average ranks."""
    x, y = _pair(pred, gt, 2)
    _check_varies(x, "prediction")
    _check_varies(y, "ground-truth")
    return plcc(average_ranks(x), average_ranks(y))


def _count_inversions(values: list) -> int:
    """Strict inversions (i < j with v[i] > v[j]) via merge sort."""
    n = len(values)
    work = list(values)
    buffer = [0.0] * n
    inversions = 0
    width = 1
    while width < n:
        for lo in range(0, n - width, 2 * width):
            mid = lo + width
            hi = min(lo + 2 * width, n)
            a, b, k = lo, mid, lo
            while a < mid and b < hi:
                if work[b] < work[a]:
                    buffer[k] = work[b]
                    inversions += mid - a
                    b += 1
                else:
                    buffer[k] = work[a]
                    a += 1
                k += 1
            buffer[k:hi] = work[a:mid] if a < mid else work[b:hi]
            work[lo:hi] = buffer[lo:hi]
        width *= 2
    return inversions


def _tie_pairs(sorted_values) -> int:
    total = 0
    run = 1
    for i in range(1, len(sorted_values)):
        if sorted_values[i] == sorted_values[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    total += run * (run - 1) // 2
    return total


def krocc(pred, gt) -> float:
    """Kendall tau-b by pair counting on merge-sorted sequences.

    Equivalent to the quadratic definition: (concordant - discordant)
    over the geometric mean of pair counts adjusted for ties.
    """
    x, y = _pair(pred, gt, 2)
    _check_varies(x, "prediction")
    _check_varies(y, "ground-truth")
    n = x.size
    order = sorted(range(n), key=lambda i: (x[i], y[i]))
    xs = [x[i] for i in order]
    ys = [y[i] for i in order]

    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(xs)
    n2 = _tie_pairs(sorted(ys))
    n3 = _tie_pairs(list(zip(xs, ys)))
    swaps = _count_inversions(ys)

    d = swaps
    c = n0 - n1 - n2 + n3 - d
    return (c - d) / math.sqrt((n0 - n1) * (n0 - n2))


def rmse(pred, gt) -> float:
    x, y = _pair(pred, gt, 1)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def mae(pred, gt) -> float:
    x, y = _pair(pred, gt, 1)
    return float(np.mean(np.abs(x - y)))


# ---------------------------------------------------------------------------
# logistic compensation


@dataclass
class LogisticFit:
    """Fitted x -> beta2 + (beta1 - beta2) / (1 + exp(-(x - beta3)/|beta4|))."""

    params: np.ndarray
    converged: bool
    identity: bool = False

    def apply(self, values) -> np.ndarray:
        x = np.asarray(values, dtype=np.float64).reshape(-1)
        if self.identity:
            return x.copy()
        b1, b2, b3, b4 = self.params
        u = (x - b3) / abs(b4)
        return b2 + (b1 - b2) / (1.0 + np.exp(-u))


def _identity_fit() -> LogisticFit:
    return LogisticFit(params=np.zeros(4), converged=False, identity=True)


def logistic_curve(params, x) -> np.ndarray:
    b1, b2, b3, b4 = params
    u = (np.asarray(x, dtype=np.float64) - b3) / abs(b4)
    return b2 + (b1 - b2) / (1.0 + np.exp(-u))


def logistic_fit(pred, gt) -> LogisticFit:
    """Damped Gauss-Newton fit of the 4-parameter logistic.

    Falls back to the identity map (converged=False) when the system is
    degenerate or the iteration fails to settle.
    """
    x, y = _pair(pred, gt, 1)
    if x.size < 5 or x.std() == 0.0 or y.min() == y.max():
        return _identity_fit()

    beta = np.array([y.max(), y.min(), float(np.median(x)), float(x.std())])
    lam = 1e-3

    def sse(b):
        r = logistic_curve(b, x) - y
        return float(r @ r)

    current = sse(beta)
    converged = False
    for _ in range(GAUSS_NEWTON_MAX_ITERS):
        b1, b2, b3, b4 = beta
        s = abs(b4)
        u = (x - b3) / s
        g = 1.0 / (1.0 + np.exp(-u))
        resid = (b2 + (b1 - b2) * g) - y
        gg = g * (1.0 - g)
        jac = np.stack([
            g,
            1.0 - g,
            (b1 - b2) * gg * (-1.0 / s),
            (b1 - b2) * gg * (-u / s) * np.sign(b4),
        ], axis=1)
        jtj = jac.T @ jac
        jtr = jac.T @ resid
        step = None
        for _ in range(24):
            try:
                trial = np.linalg.solve(jtj + lam * np.eye(4), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = beta + trial
            if cand[3] == 0.0 or not np.all(np.isfinite(cand)):
                lam *= 10.0
                continue
            cost = sse(cand)
            if cost <= current and np.isfinite(cost):
                step = trial
                beta = cand
                current = cost
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 10.0
        if step is None:
            break
        if float(np.linalg.norm(step)) < GAUSS_NEWTON_STEP_TOL:
            converged = True
            break
    if not converged:
        return _identity_fit()
    return LogisticFit(params=beta, converged=True)


# ---------------------------------------------------------------------------
# aggregate evaluation


@dataclass
class MetricReport:
    count: int
    rmse: float
    mae: float
    plcc: float | None = None
    srocc: float | None = None
    krocc: float | None = None
    logistic_converged: bool = False
    notes: list = field(default_factory=list)


def evaluate_scores(pred, gt):
    """Full metric battery.  Returns (report, fitted predictions)."""
    x, y = _pair(pred, gt, 1)
    fit = logistic_fit(x, y)
    fitted = fit.apply(x)
    report = MetricReport(
        count=int(x.size),
        rmse=rmse(fitted, y),
        mae=mae(fitted, y),
        logistic_converged=fit.converged,
    )
    if not fit.converged:
        report.notes.append("logistic fit fell back to identity")
    for name, fn, values in (
        ("plcc", plcc, fitted),
        ("srocc", srocc, x),
        ("krocc", krocc, x),
    ):
        try:
            setattr(report, name, fn(values, y))
        except UndefinedCorrelationError as exc:
            report.notes.append(f"{name} undefined: {exc}")
    return report, fitted


def write_report(path: str, report: MetricReport, ids, pred, fitted, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    fitted = np.asarray(fitted, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"videos: {report.count}\n")
        for name in ("plcc", "srocc", "krocc"):
            value = getattr(report, name)
            fh.write(f"{name}: {'undefined' if value is None else f'{value:.6f}'}\n")
        fh.write(f"rmse: {report.rmse:.6f}\n")
        fh.write(f"mae: {report.mae:.6f}\n")
        fh.write(f"logistic_converged: {'true' if report.logistic_converged else 'false'}\n")
        for note in report.notes:
            fh.write(f"note: {note}\n")
        fh.write("# id predicted fitted subjective\n")
        for vid, p, f, g in zip(ids, pred, fitted, gt):
            fh.write(f"{vid} {p:.6f} {f:.6f} {g:.6f}\n")


def write_scatter(path: str, pred, fitted, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    fitted = np.asarray(fitted, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# predicted fitted subjective\n")
        for p, f, g in zip(pred, fitted, gt):
            fh.write(f"{p:.9g} {f:.9g} {g:.9g}\n")
