"""Accuracy (AvgRelMSE, Friedman/MCB-Nemenyi) and decision-cost scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

__all__ = [
    "EvaluationError",
    "AccuracyTable",
    "FriedmanResult",
    "mse",
    "mse_matrix",
    "accuracy_table",
    "avg_rel_mse",
    "geometric_mean",
    "friedman_mcb",
    "ranking_blocks",
    "classify_events",
    "decision_costs",
    "sweep_delta",
    "DECISION_LEVEL_MINUTES",
]

log = logging.getLogger(__name__)

DECISION_LEVEL_MINUTES = (10, 60, 480)


class EvaluationError(ValueError):
    pass


def geometric_mean(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return float("nan")
    return float(np.exp(np.mean(np.log(x))))


def _pair(forecasts, actuals, i: int, k: int):
    f, a = forecasts.select(i, k), actuals.select(i, k)
    if f.shape != a.shape:
        raise EvaluationError(f"forecast {f.shape} and actual {a.shape} blocks differ")
    if f.size == 0:
        raise EvaluationError("empty test span")
    return f, a


def mse(forecasts, actuals, i: int, k: int) -> float:
    """Mean over origins and the ``m/k`` horizons of the squared error."""
    f, a = _pair(forecasts, actuals, i, k)
    return float(np.mean((f - a) ** 2))


def mse_matrix(forecasts, actuals) -> np.ndarray:
    """``(n, p)`` MSE for every series and level (levels in descending ``k``)."""
    s = forecasts.structure
    return np.array(
        [[mse(forecasts, actuals, i, k) for k in s.temporal.factors] for i in range(s.n)]
    )


@dataclass(frozen=True)
class AccuracyTable:
    """Per-approach ``(n, p)`` MSE arrays plus the labels needed to read them."""

    mse: dict
    series: tuple[str, ...]
    orders: tuple[int, ...]
    level_minutes: tuple[int, ...]

    def avg_rel(self, benchmark: str) -> pd.DataFrame:
        """AvgRelMSE table: rows approaches, columns level minutes then ``All``."""
        rows = {}
        for name in self.mse:
            vals = [avg_rel_mse(self, name, k, benchmark) for k in self.orders]
            vals.append(avg_rel_mse(self, name, None, benchmark))
            rows[name] = vals
        cols = [str(mm) for mm in self.level_minutes] + ["All"]
        df = pd.DataFrame.from_dict(rows, orient="index", columns=cols)
        df.index.name = "approach"
        return df


def accuracy_table(
    forecasts: Mapping[str, object], actuals, step_minutes: int = 10
) -> AccuracyTable:
    s = actuals.structure
    return AccuracyTable(
        {name: mse_matrix(f, actuals) for name, f in forecasts.items()},
        tuple(s.hierarchy.labels),
        tuple(s.temporal.factors),
        tuple(k * step_minutes for k in s.temporal.factors),
    )


def avg_rel_mse(table: AccuracyTable, approach: str, k: int | None, benchmark: str) -> float:
    """Geometric mean over series of ``MSE_j / MSE_benchmark`` at order ``k``.

    ``k=None`` pools every (series, level) ratio.  Series whose benchmark MSE
    is zero are left out.
    """
    try:
        num, den = table.mse[approach], table.mse[benchmark]
    except KeyError as exc:
        raise EvaluationError(f"no MSEs for approach {exc.args[0]!r}") from None
    if k is not None:
        col = table.orders.index(k)
        num, den = num[:, col], den[:, col]
    num, den = np.ravel(num), np.ravel(den)
    ok = den > 0
    if not np.all(ok):
        log.warning("AvgRelMSE: %d series with zero benchmark MSE excluded", int((~ok).sum()))
    if approach == benchmark:
        return 1.0
    return geometric_mean(num[ok] / den[ok])


@dataclass(frozen=True)
class FriedmanResult:
    approaches: tuple[str, ...]
    statistic: float
    p_value: float
    mean_ranks: np.ndarray
    critical_distance: float
    n_blocks: int

    @property
    def intervals(self) -> np.ndarray:
        """``(k, 2)`` MCB intervals, mean rank -/+ half the critical distance."""
        half = self.critical_distance / 2
        return np.column_stack([self.mean_ranks - half, self.mean_ranks + half])

    @property
    def best(self) -> int:
        return int(np.argmin(self.mean_ranks))

    @property
    def worse_than_best(self) -> np.ndarray:
        """Approaches whose interval does not overlap the best one."""
        iv = self.intervals
        return iv[:, 0] > iv[self.best, 1]

    def to_frame(self) -> pd.DataFrame:
        iv = self.intervals
        return pd.DataFrame(
            {
                "approach": self.approaches,
                "mean_rank": self.mean_ranks,
                "lower": iv[:, 0],
                "upper": iv[:, 1],
                "worse_than_best": self.worse_than_best,
                "friedman_p": self.p_value,
            }
        )


def friedman_mcb(
    errors, approaches: Sequence[str] | None = None, alpha: float = 0.05, min_blocks: int = 10
) -> FriedmanResult:
    """Friedman test and Nemenyi MCB intervals on a ``(blocks, approaches)`` error matrix.

    Lower error gets the lower rank; ties share the average rank.
    """
    e = np.asarray(errors, dtype=float)
    if e.ndim != 2 or e.shape[1] < 2:
        raise EvaluationError("need a (blocks, approaches) matrix with at least 2 approaches")
    N, k = e.shape
    if N < min_blocks:
        raise EvaluationError(f"need at least {min_blocks} blocks, got {N}")
    approaches = tuple(approaches or (f"A{j}" for j in range(k)))
    ranks = stats.rankdata(e, axis=1)
    mean_ranks = ranks.mean(axis=0)
    stat = 12 * N / (k * (k + 1)) * np.sum((mean_ranks - (k + 1) / 2) ** 2)
    ties = 0.0
    for row in ranks:
        _, counts = np.unique(row, return_counts=True)
        ties += np.sum(counts**3 - counts)
    correction = 1 - ties / (N * (k**3 - k))
    if correction <= 0:
        stat, p = 0.0, 1.0
    else:
        stat = stat / correction
        p = float(stats.chi2.sf(stat, k - 1))
    q = stats.studentized_range.ppf(1 - alpha, k, np.inf)
    cd = q / np.sqrt(2) * np.sqrt(k * (k + 1) / (6 * N))
    return FriedmanResult(approaches, float(stat), p, mean_ranks, float(cd), N)


def ranking_blocks(forecasts: Mapping[str, object], actuals) -> tuple[np.ndarray, list[str]]:
    """Per (origin, series, level) horizon-mean squared errors, one column per approach."""
    s = actuals.structure
    cols = []
    for f in forecasts.values():
        blocks = []
        for k in s.temporal.factors:
            for i in range(s.n):
                fe, ae = _pair(f, actuals, i, k)
                blocks.append(np.mean((fe - ae) ** 2, axis=1))
        cols.append(np.concatenate(blocks))
    return np.column_stack(cols), list(forecasts)


def classify_events(forecast: np.ndarray, actual: np.ndarray, delta: float):
    """Masks ``(under, over, within, excluded)`` for paired first-step values.

    Underproduction: ``y < (1 - delta) * yhat``; overproduction:
    ``y > (1 + delta) * yhat``.  Origins with a non-positive actual or
    forecast are excluded since the relative errors are undefined there.
    """
    f = np.asarray(forecast, dtype=float)
    y = np.asarray(actual, dtype=float)
    excluded = (y <= 0) | (f <= 0)
    under = ~excluded & (y < (1 - delta) * f)
    over = ~excluded & (y > (1 + delta) * f)
    within = ~excluded & ~under & ~over
    return under, over, within, excluded


def decision_costs(
    forecasts,
    actuals,
    delta: float = 0.01,
    level_minutes: Sequence[int] = DECISION_LEVEL_MINUTES,
    step_minutes: int = 10,
    series: int = 0,
    approach: str = "",
) -> pd.DataFrame:
    """Fines/penalties (delta-) and revenue-loss (delta+) indices for the top series.

    One row per requested level present in the hierarchy.  Each index is the
    geometric mean of the relative shortfall ``(yhat - y) / y`` or overage
    ``(y - yhat) / yhat`` over the first forecast step of the matching
    origins; shares are percentages of the included origins.
    """
    s = actuals.structure
    rows = []
    for minutes in level_minutes:
        k, rem = divmod(minutes, step_minutes)
        if rem or k not in s.temporal.factors:
            log.debug("decision costs: level %d min not in hierarchy, skipped", minutes)
            continue
        f = forecasts.select(series, k)[:, 0]
        y = actuals.select(series, k)[:, 0]
        under, over, within, excl = classify_events(f, y, delta)
        included = int((~excl).sum())
        e_minus = (f[under] - y[under]) / y[under]
        e_plus = (y[over] - f[over]) / f[over]
        pct = (lambda mask: 100.0 * mask.sum() / included) if included else (lambda mask: float("nan"))
        rows.append(
            {
                "approach": approach,
                "level_minutes": minutes,
                "delta": delta,
                "delta_minus": geometric_mean(e_minus) if under.any() else np.nan,
                "delta_plus": geometric_mean(e_plus) if over.any() else np.nan,
                "under_pct": pct(under),
                "over_pct": pct(over),
                "within_pct": pct(within),
                "n_under": int(under.sum()),
                "n_over": int(over.sum()),
                "n_within": int(within.sum()),
                "n_excluded": int(excl.sum()),
            }
        )
    return pd.DataFrame(rows)


def sweep_delta(
    forecasts, actuals, deltas: Sequence[float] = (0.0, 0.01, 0.025), **kwargs
) -> pd.DataFrame:
    """Decision costs for each threshold; event counts must not grow with the threshold."""
    deltas = sorted(deltas)
    reports = [decision_costs(forecasts, actuals, d, **kwargs) for d in deltas]
    for a, b in zip(reports, reports[1:]):
        for col in ("n_under", "n_over"):
            if np.any(b[col].to_numpy() > a[col].to_numpy()):
                raise EvaluationError(f"{col} increased with the threshold")
    return pd.concat(reports, ignore_index=True)
