"""Regression and hypothesis-testing machinery.

OLS is solved through a QR decomposition of the design matrix for stability
under near-collinear diversity features; the explicit normal-equations path
exists only in the test suite as an independent oracle.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import special
from scipy import stats as sps

from .errors import InputError, NumericalError

P_VALUE_PRINT_FLOOR = 1e-12


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Affine rescale to [0, 1]; both endpoints are attained."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        raise NumericalError("cannot min-max normalize a constant vector")
    return (v - lo) / (hi - lo)


@dataclass
class RegressionReport:
    """One fitted linear model; coefficient order is intercept first."""

    names: list[str]
    beta: np.ndarray
    se: np.ndarray
    p_values: np.ndarray
    r2: float
    r2_adj: float
    dw: float
    n: int
    residuals: np.ndarray
    rss: float
    tss: float

    @property
    def aic(self) -> float:
        # an RSS at rounding-dust level relative to the response is a perfect
        # fit; clamping makes exact fits compare equal instead of by ln() of
        # float noise
        rss = max(self.rss, 1e-24 * self.tss, 1e-300)
        k = len(self.names)  # includes the intercept
        return self.n * math.log(rss / self.n) + 2.0 * k

    def coefficient(self, name: str) -> tuple[float, float, float]:
        i = self.names.index(name)
        return float(self.beta[i]), float(self.se[i]), float(self.p_values[i])

    def to_text(self, title: str = "") -> str:
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'feature':<28}{'beta':>12}{'SE':>12}{'p':>10}")
        for i, name in enumerate(self.names):
            p = self.p_values[i]
            p_str = "0.000" if p < P_VALUE_PRINT_FLOOR else f"{p:.3f}"
            lines.append(
                f"{name:<28}{self.beta[i]:>12.4f}{self.se[i]:>12.4f}{p_str:>10}"
            )
        dw_str = "n/a" if math.isnan(self.dw) else f"{self.dw:.3f}"
        lines.append(
            f"Durbin-Watson stat. = {dw_str}    R2_adj = {self.r2_adj:.2f}    n = {self.n}"
        )
        return "\n".join(lines)


def ols_fit(
    X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None
) -> RegressionReport:
    """Least squares with an intercept, coefficient standard errors, t-based
    two-sided p-values, adjusted R2, and the Durbin-Watson statistic over the
    given row order."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if y.shape != (n,):
        raise InputError("response length does not match design rows")
    if names is None:
        names = [f"x{i}" for i in range(p)]
    if len(names) != p:
        raise InputError("one name per design column required")
    if n <= p + 1:
        raise InputError(f"need n > p + 1 rows (got n={n}, p={p})")

    design = np.column_stack([np.ones(n), X])
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= max(n, p + 1) * np.finfo(np.float64).eps * max(diag.max(), 1.0):
        raise NumericalError("design matrix is rank deficient")
    beta = np.linalg.solve(r, q.T @ y)
    residuals = y - design @ beta
    rss = float(residuals @ residuals)
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss <= 0:
        raise NumericalError("response is constant")
    df = n - p - 1
    sigma2 = rss / df
    r_inv = np.linalg.solve(r, np.eye(p + 1))
    cov = sigma2 * (r_inv @ r_inv.T)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = np.where(se > 0, beta / se, np.where(beta == 0, np.nan, np.inf))
        p_values = 2.0 * sps.t.sf(np.abs(t_stats), df)
    r2 = 1.0 - rss / tss
    r2_adj = 1.0 - (1.0 - r2) * (n - 1) / df
    return RegressionReport(
        names=["intercept"] + list(names),
        beta=beta,
        se=se,
        p_values=p_values,
        r2=r2,
        r2_adj=r2_adj,
        dw=durbin_watson(residuals),
        n=n,
        residuals=residuals,
        rss=rss,
        tss=tss,
    )


def durbin_watson(residuals: np.ndarray) -> float:
    """Sum of squared successive differences over the residual sum of
    squares; NaN when the residuals are all zero."""
    e = np.asarray(residuals, dtype=np.float64)
    if e.size < 2:
        raise InputError("Durbin-Watson needs at least 2 residuals")
    denom = float(e @ e)
    if denom == 0.0:
        return math.nan
    diffs = np.diff(e)
    return float(diffs @ diffs) / denom


@dataclass
class KSResult:
    statistic: float
    p_value: float


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> KSResult:
    """Exact sup-distance between the two empirical CDFs, with the asymptotic
    Kolmogorov p-value at effective size n*m/(n+m)."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise InputError("both samples must be nonempty")
    merged = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, merged, side="right") / n
    cdf_b = np.searchsorted(b, merged, side="right") / m
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    effective = math.sqrt(n * m / (n + m))
    p = float(np.clip(special.kolmogorov(effective * d), 0.0, 1.0))
    return KSResult(statistic=d, p_value=p)


@dataclass
class CorrelationMatrix:
    names: list[str]
    values: np.ndarray
    constant_columns: list[str]


def spearman_matrix(
    scores: np.ndarray, names: Sequence[str] | None = None
) -> CorrelationMatrix:
    """Spearman rank correlation (average ranks on ties) for every column
    pair. Entries involving a constant column are NaN and the column is
    reported; the diagonal is 1 by convention."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2:
        raise InputError("need a 2-D table with at least 2 rows")
    n, d = scores.shape
    if names is None:
        names = [f"c{i}" for i in range(d)]
    ranks = np.empty_like(scores)
    constant = []
    for j in range(d):
        ranks[:, j] = sps.rankdata(scores[:, j], method="average")
        if np.ptp(scores[:, j]) == 0:
            constant.append(names[j])
    centered = ranks - ranks.mean(axis=0)
    norms = np.sqrt(np.sum(centered**2, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (centered.T @ centered) / np.outer(norms, norms)
    corr = np.asarray(corr)
    for j in range(d):
        if norms[j] == 0:
            corr[j, :] = np.nan
            corr[:, j] = np.nan
    np.fill_diagonal(corr, 1.0)
    return CorrelationMatrix(list(names), corr, constant)


def step_aic_backward(
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    forced: Iterable[str] = (),
) -> tuple[RegressionReport, list[str]]:
    """Backward stepwise selection under the Gaussian information criterion
    n*ln(RSS/n) + 2k, k counting the intercept.

    Removes one non-forced feature at a time, the one whose removal lowers
    the criterion the most (lowest original index wins exact ties), until no
    single removal improves. Forced features are never dropped.
    """
    X = np.asarray(X, dtype=np.float64)
    names = list(names)
    forced_set = set(forced)
    unknown = forced_set - set(names)
    if unknown:
        raise InputError(f"forced features not present: {sorted(unknown)}")
    current = list(range(len(names)))
    report = ols_fit(X[:, current], y, [names[i] for i in current])
    while True:
        candidates = [i for i in current if names[i] not in forced_set]
        if not candidates:
            break
        best: tuple[float, int] | None = None
        for i in candidates:
            trial = [j for j in current if j != i]
            if trial:
                trial_report = ols_fit(X[:, trial], y, [names[j] for j in trial])
                trial_aic = trial_report.aic
            else:
                trial_aic = _intercept_only_aic(y)
            if best is None or (trial_aic, i) < best:
                best = (trial_aic, i)
        assert best is not None
        if best[0] < report.aic:
            current = [j for j in current if j != best[1]]
            if current:
                report = ols_fit(X[:, current], y, [names[j] for j in current])
            else:
                report = _intercept_only_report(y)
        else:
            break
    return report, [names[i] for i in current]


def _intercept_only_aic(y: np.ndarray) -> float:
    tss = float(np.sum((y - y.mean()) ** 2))
    rss = max(tss, 1e-24 * tss, 1e-300)
    return y.size * math.log(rss / y.size) + 2.0


def _intercept_only_report(y: np.ndarray) -> RegressionReport:
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    residuals = y - y.mean()
    rss = float(residuals @ residuals)
    se = math.sqrt(rss / (n - 1) / n) if n > 1 else math.nan
    with np.errstate(divide="ignore", invalid="ignore"):
        t = y.mean() / se if se > 0 else math.inf
    return RegressionReport(
        names=["intercept"],
        beta=np.array([y.mean()]),
        se=np.array([se]),
        p_values=np.array([2.0 * sps.t.sf(abs(t), n - 1)]),
        r2=0.0,
        r2_adj=0.0,
        dw=durbin_watson(residuals) if n >= 2 else math.nan,
        n=n,
        residuals=residuals,
        rss=rss,
        tss=rss,
    )


def write_regressions_csv(reports: dict[str, RegressionReport], path: str) -> None:
    """Machine-readable coefficients; model-level stats repeat on each row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "feature", "beta", "se", "p_value", "r2_adj", "dw", "n"]
        )
        for model in sorted(reports):
            rep = reports[model]
            for i, name in enumerate(rep.names):
                writer.writerow(
                    [model, name, repr(float(rep.beta[i])), repr(float(rep.se[i])),
                     repr(float(rep.p_values[i])), repr(float(rep.r2_adj)),
                     "" if math.isnan(rep.dw) else repr(float(rep.dw)), rep.n]
                )


def write_regressions_text(reports: dict[str, RegressionReport], path: str) -> None:
    blocks = [reports[model].to_text(title=model) for model in sorted(reports)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n\n".join(blocks) + "\n")


def write_correlation_csv(corr: CorrelationMatrix, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + corr.names)
        for i, name in enumerate(corr.names):
            row = [name]
            for j in range(len(corr.names)):
                v = corr.values[i, j]
                row.append("" if math.isnan(v) else repr(float(v)))
            writer.writerow(row)
