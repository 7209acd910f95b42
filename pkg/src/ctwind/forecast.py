"""Series panels, temporal aggregation, regression features and base forecasts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .hierarchy import CrossSectionalHierarchy, CrossTemporalStructure

__all__ = [
    "DataError",
    "SeriesPanel",
    "LevelPanel",
    "FeatureSpec",
    "ForecastSet",
    "NaiveModel",
    "LinRegModel",
    "Spans",
    "RollingOriginResult",
    "preprocess",
    "aggregate_panel",
    "build_features",
    "fit_naive",
    "forecast_naive",
    "fit_linreg",
    "forecast_linreg",
    "actual_stacks",
    "rolling_origin",
    "LAG_LENGTHS",
    "TIME_OF_DAY_DUMMIES",
]

log = logging.getLogger(__name__)

# Lag / window lengths and time-of-day dummy counts keyed by level length in minutes.
LAG_LENGTHS = {10: 48, 20: 24, 30: 16, 40: 12, 60: 8, 80: 6, 120: 4, 160: 3, 240: 3, 480: 3}
TIME_OF_DAY_DUMMIES = {10: 23, 20: 23, 30: 23, 40: 23, 60: 23, 80: 19, 120: 11, 160: 9, 240: 3, 480: 2}

INPUT_COLUMNS = ["timestamp", "series_id", "power_kw", "wind_speed_ms"]
FORECAST_COLUMNS = ["origin", "series_id", "level_k", "h", "value", "model"]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesPanel:
    """High-frequency power (kW) and wind speed (m/s) for the bottom series."""

    timestamps: pd.DatetimeIndex
    power: np.ndarray
    wind: np.ndarray
    series: tuple[str, ...]
    freq: pd.Timedelta = pd.Timedelta("10min")

    def __post_init__(self):
        ts = pd.DatetimeIndex(self.timestamps)
        if ts.tz is None:
            ts = ts.tz_localize("UTC")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "series", tuple(self.series))
        object.__setattr__(self, "freq", pd.Timedelta(self.freq))
        for name in ("power", "wind"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (len(ts), len(self.series)):
                raise DataError(f"{name} has shape {a.shape}, expected {(len(ts), len(self.series))}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def step_minutes(self) -> int:
        return int(self.freq / pd.Timedelta("1min"))

    @classmethod
    def from_long(cls, df: pd.DataFrame, series: Sequence[str] | None = None) -> "SeriesPanel":
        """Pivot a long ``timestamp,series_id,power_kw,wind_speed_ms`` frame."""
        missing = [c for c in INPUT_COLUMNS if c not in df.columns]
        if missing:
            raise DataError(f"missing columns {missing}; expected {INPUT_COLUMNS}")
        df = df.copy()
        try:
            df["timestamp"] = pd.to_datetime(df["timestamp"], utc=True, format="ISO8601")
        except (ValueError, TypeError) as exc:
            raise DataError(f"unparseable timestamp: {exc}") from None
        df["series_id"] = df["series_id"].astype(str)
        dup = df.duplicated(["timestamp", "series_id"])
        if dup.any():
            first = df.loc[dup].iloc[0]
            raise DataError(
                f"duplicate timestamp {first['timestamp'].isoformat()} for series {first['series_id']}"
            )
        present = list(dict.fromkeys(df["series_id"]))
        if series is None:
            series = present
        else:
            series = list(series)
            unknown = sorted(set(present) - set(series))
            if unknown:
                raise DataError(f"unknown series in data: {unknown}")
            absent = [s for s in series if s not in present]
            if absent:
                raise DataError(f"series missing from data: {absent}")
        power = df.pivot(index="timestamp", columns="series_id", values="power_kw")
        wind = df.pivot(index="timestamp", columns="series_id", values="wind_speed_ms")
        power, wind = power[series].sort_index(), wind[series].sort_index()
        diffs = power.index.to_series().diff().dropna()
        freq = diffs.min() if len(diffs) else pd.Timedelta("10min")
        return cls(power.index, power.to_numpy(float), wind.to_numpy(float), tuple(series), freq)

    def to_long(self) -> pd.DataFrame:
        T, nb = self.power.shape
        return pd.DataFrame(
            {
                "timestamp": np.repeat(self.timestamps.strftime("%Y-%m-%dT%H:%M:%SZ"), nb),
                "series_id": np.tile(self.series, T),
                "power_kw": self.power.ravel(),
                "wind_speed_ms": self.wind.ravel(),
            }
        )

    def slice(self, start: int, stop: int) -> "SeriesPanel":
        return SeriesPanel(
            self.timestamps[start:stop], self.power[start:stop], self.wind[start:stop],
            self.series, self.freq,
        )

    def scaled(self, factor: float) -> "SeriesPanel":
        """Copy with power multiplied by ``factor`` (unit changes)."""
        return SeriesPanel(self.timestamps, self.power * factor, self.wind, self.series, self.freq)


@dataclass(frozen=True)
class LevelPanel:
    """Level-``k`` aggregates for every series; ``timestamps`` mark block starts."""

    k: int
    timestamps: pd.DatetimeIndex
    power: np.ndarray
    wind: np.ndarray
    labels: tuple[str, ...]
    step_minutes: int


def preprocess(raw: SeriesPanel) -> SeriesPanel:
    """Refuse gaps and missing values; clamp negative power and wind speed to zero."""
    ts = raw.timestamps
    if len(ts) > 1:
        if not ts.is_monotonic_increasing or ts.has_duplicates:
            raise DataError("timestamps must be strictly increasing")
        expected = pd.date_range(ts[0], ts[-1], freq=raw.freq)
        if len(expected) != len(ts):
            gaps = expected.difference(ts)
            shown = ", ".join(g.isoformat() for g in gaps[:5])
            raise DataError(f"{len(gaps)} missing timestamp(s) on the {raw.freq} grid: {shown}")
    for name in ("power", "wind"):
        a = getattr(raw, name)
        bad = ~np.isfinite(a)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError(
                f"{int(bad.sum())} missing {name} value(s), first at "
                f"{ts[r].isoformat()} for {raw.series[c]}"
            )
    neg_p, neg_w = int((raw.power < 0).sum()), int((raw.wind < 0).sum())
    if neg_p or neg_w:
        log.info("clamped %d negative power and %d negative wind values to 0", neg_p, neg_w)
    out = SeriesPanel(ts, np.maximum(raw.power, 0.0), np.maximum(raw.wind, 0.0), raw.series, raw.freq)
    for j, s in enumerate(out.series):
        p = out.power[:, j]
        log.debug("%s power kW: min %.1f median %.1f max %.1f", s, p.min(), np.median(p), p.max())
    return out


def _expand(p: SeriesPanel, hierarchy: CrossSectionalHierarchy | None):
    if hierarchy is None:
        return p.power, p.wind, p.series
    if tuple(hierarchy.labels_bottom) != p.series:
        raise DataError("panel series do not match the hierarchy's bottom series")
    A = hierarchy.agg_matrix.astype(float)
    power = np.hstack([p.power @ A.T, p.power])
    wind = np.hstack([p.wind @ (A / A.sum(axis=1, keepdims=True)).T, p.wind])
    return power, wind, hierarchy.labels


def aggregate_panel(
    p: SeriesPanel, k: int, hierarchy: CrossSectionalHierarchy | None = None
) -> LevelPanel:
    """Non-overlapping block sums of power (block means of wind speed).

    With ``hierarchy`` the result covers every series in hierarchy order,
    uppers built as sums of their members.
    """
    power, wind, labels = _expand(p, hierarchy)
    T = len(p) // k
    if T * k != len(p):
        log.info("aggregate k=%d: dropped trailing partial block of %d step(s)", k, len(p) - T * k)
    n = power.shape[1]
    pw = power[: T * k].reshape(T, k, n).sum(axis=1)
    ws = wind[: T * k].reshape(T, k, n).mean(axis=1)
    return LevelPanel(k, p.timestamps[: T * k : k], pw, ws, tuple(labels), p.step_minutes * k)


@dataclass(frozen=True)
class FeatureSpec:
    lags: int
    time_of_day: int
    level_minutes: int

    @classmethod
    def for_level(cls, level_minutes: int, lags: int | None = None, time_of_day: int | None = None):
        if lags is None:
            lags = LAG_LENGTHS.get(level_minutes, max(3, 480 // level_minutes))
        if time_of_day is None:
            per_day = max(1, 1440 // level_minutes)
            time_of_day = TIME_OF_DAY_DUMMIES.get(level_minutes, min(23, per_day - 1))
        return cls(int(lags), int(time_of_day), int(level_minutes))

    @property
    def n_features(self) -> int:
        return 2 * self.lags + 4 + 3 + self.time_of_day

    def column_names(self) -> list[str]:
        return (
            [f"power_lag{i}" for i in range(1, self.lags + 1)]
            + [f"wind_lag{i}" for i in range(1, self.lags + 1)]
            + ["wind_ma", "wind_msd", "power_ma", "power_msd"]
            + [f"quarter_{q}" for q in (2, 3, 4)]
            + [f"tod_{g}" for g in range(1, self.time_of_day + 1)]
        )


def _calendar(ts: pd.DatetimeIndex, spec: FeatureSpec) -> np.ndarray:
    q = ts.quarter.to_numpy()
    quarter = (q[:, None] == np.array([2, 3, 4])[None, :]).astype(float)
    per_day = max(1, 1440 // spec.level_minutes)
    slot = np.minimum((ts.hour.to_numpy() * 60 + ts.minute.to_numpy()) // spec.level_minutes, per_day - 1)
    # slots bucketed evenly into time_of_day + 1 groups; group 0 is the dropped level
    group = slot * (spec.time_of_day + 1) // per_day
    tod = (group[:, None] == np.arange(1, spec.time_of_day + 1)[None, :]).astype(float)
    return np.hstack([quarter, tod])


def _feature_rows(x_hist, u_hist, ts, spec: FeatureSpec) -> np.ndarray:
    """Rows from ``(Q, L)`` history windows (oldest first) and target timestamps."""
    stats = np.column_stack(
        [u_hist.mean(axis=1), u_hist.std(axis=1), x_hist.mean(axis=1), x_hist.std(axis=1)]
    )
    return np.hstack([x_hist[:, ::-1], u_hist[:, ::-1], stats, _calendar(ts, spec)])


def build_features(level: LevelPanel, i: int, spec: FeatureSpec):
    """Design matrix and targets for series ``i`` of a level panel.

    Row ``j`` targets index ``t = j + L`` and only uses values before ``t``.
    Returns ``(X, y, target_index)``; the first ``L`` steps have no row.
    """
    L = spec.lags
    x, u = level.power[:, i], level.wind[:, i]
    T = len(x)
    if T <= L:
        log.info("series %s k=%d: %d rows, not enough history for %d lags", level.labels[i], level.k, T, L)
        return np.empty((0, spec.n_features)), np.empty(0), np.empty(0, dtype=int)
    xw = sliding_window_view(x, L)[: T - L]
    uw = sliding_window_view(u, L)[: T - L]
    idx = np.arange(L, T)
    return _feature_rows(xw, uw, level.timestamps[idx], spec), x[idx], idx


@dataclass(frozen=True)
class NaiveModel:
    """Persistence: the last observed level value repeated over the horizon."""

    level: LevelPanel = field(repr=False)
    i: int

    def fitted(self, start: int, stop: int) -> np.ndarray:
        x = self.level.power[:, self.i]
        out = np.full(stop - start, np.nan)
        lo = max(start, 1)
        out[lo - start :] = x[lo - 1 : stop - 1]
        return out

    def forecast(self, origins: np.ndarray, H: int) -> np.ndarray:
        origins = np.asarray(origins)
        if np.any(origins < 1):
            raise DataError("naive forecast needs at least one observation before the origin")
        last = self.level.power[origins - 1, self.i]
        return np.repeat(last[:, None], H, axis=1)


def fit_naive(level: LevelPanel, i: int) -> NaiveModel:
    if len(level.timestamps) == 0:
        raise DataError("empty history")
    return NaiveModel(level, i)


def forecast_naive(model: NaiveModel, origins, H: int) -> np.ndarray:
    return model.forecast(np.atleast_1d(origins), H)


@dataclass(frozen=True)
class LinRegModel:
    """Least squares on the lag/moving-stat/calendar features with a tiny ridge."""

    level: LevelPanel = field(repr=False)
    i: int
    spec: FeatureSpec
    coef: np.ndarray
    intercept: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coef + self.intercept

    def fitted(self, start: int, stop: int) -> np.ndarray:
        """One-step in-sample predictions for level indices ``[start, stop)``."""
        X, _, idx = build_features(self.level, self.i, self.spec)
        out = np.full(stop - start, np.nan)
        keep = (idx >= start) & (idx < stop)
        out[idx[keep] - start] = self.predict(X[keep])
        return out

    def forecast(self, origins: np.ndarray, H: int) -> np.ndarray:
        """Recursive ``H``-step forecasts from each origin index (vectorised over origins).

        Predicted power feeds back into lags and moving statistics; future wind
        speed is the last observed value.
        """
        origins = np.atleast_1d(np.asarray(origins))
        L = self.spec.lags
        if np.any(origins < L):
            raise DataError(f"forecast origin needs {L} steps of history")
        x, u = self.level.power[:, self.i], self.level.wind[:, self.i]
        win = origins[:, None] + np.arange(-L, 0)[None, :]
        xh, uh = x[win], u[win]
        step = pd.Timedelta(minutes=self.level.step_minutes)
        t0 = self.level.timestamps[0]
        out = np.empty((len(origins), H))
        u_last = uh[:, -1:]
        for h in range(H):
            ts = pd.DatetimeIndex(t0 + (origins + h) * step)
            pred = self.predict(_feature_rows(xh, uh, ts, self.spec))
            out[:, h] = pred
            xh = np.hstack([xh[:, 1:], pred[:, None]])
            uh = np.hstack([uh[:, 1:], u_last])
        return out


def fit_linreg(level: LevelPanel, i: int, spec: FeatureSpec, stop: int | None = None) -> LinRegModel:
    """Fit on targets with level index below ``stop`` (the training span)."""
    X, y, idx = build_features(level, i, spec)
    if stop is not None:
        X, y = X[idx < stop], y[idx < stop]
    if len(y) == 0:
        raise DataError(f"series {level.labels[i]} k={level.k}: no training rows")
    Xa = np.hstack([X, np.ones((len(X), 1))])
    # ridge on RMS-scaled columns keeps the fit equivariant to power units
    scale = np.sqrt(np.mean(Xa**2, axis=0))
    scale[scale == 0] = 1.0
    Xa = Xa / scale
    ridge = 1e-8 * len(Xa)
    rank = np.linalg.matrix_rank(Xa)
    if rank < Xa.shape[1]:
        log.debug(
            "series %s k=%d: design rank %d < %d, relying on ridge",
            level.labels[i], level.k, rank, Xa.shape[1],
        )
    aug = np.vstack([Xa, np.sqrt(ridge) * np.eye(Xa.shape[1])])
    beta = np.linalg.lstsq(aug, np.concatenate([y, np.zeros(Xa.shape[1])]), rcond=None)[0] / scale
    return LinRegModel(level, i, spec, beta[:-1], float(beta[-1]))


def forecast_linreg(model: LinRegModel, origins, H: int) -> np.ndarray:
    return model.forecast(np.atleast_1d(origins), H)


@dataclass(frozen=True)
class ForecastSet:
    """Stacked forecasts, one row per origin, in the canonical cross-temporal order."""

    origins: pd.DatetimeIndex
    values: np.ndarray
    structure: CrossTemporalStructure = field(repr=False)
    model: str = ""
    run_id: str = ""

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape != (len(self.origins), self.structure.size):
            raise DataError(
                f"forecast values {v.shape} do not match "
                f"{len(self.origins)} origins x {self.structure.size}"
            )
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.origins)

    def select(self, i: int, k: int) -> np.ndarray:
        """``(Q, M_k)`` forecasts of series ``i`` at level ``k``."""
        s = self.structure
        sl = s.temporal.level_slice(k)
        return s.as_matrix(self.values)[:, sl, i]

    def to_frame(self, method: str | None = None) -> pd.DataFrame:
        s = self.structure
        labels = s.labels()
        Q = len(self.origins)
        df = pd.DataFrame(
            {
                "origin": np.repeat(self.origins.strftime("%Y-%m-%dT%H:%M:%SZ"), s.size),
                "series_id": np.tile([lab[0] for lab in labels], Q),
                "level_k": np.tile([lab[1] for lab in labels], Q),
                "h": np.tile([lab[2] for lab in labels], Q),
                "value": self.values.ravel(),
                "model": self.model,
            }
        )
        if method is not None:
            df["method"] = method
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, structure: CrossTemporalStructure) -> "ForecastSet":
        missing = [c for c in FORECAST_COLUMNS if c not in df.columns]
        if missing:
            raise DataError(f"forecast table missing columns {missing}")
        s = structure
        pos = {lab: j for j, lab in enumerate(s.labels())}
        origins = pd.DatetimeIndex(pd.to_datetime(df["origin"], utc=True, format="ISO8601").unique())
        o_pos = {o: q for q, o in enumerate(origins)}
        values = np.full((len(origins), s.size), np.nan)
        keys = zip(df["series_id"].astype(str), df["level_k"].astype(int), df["h"].astype(int))
        try:
            cols = np.array([pos[key] for key in keys])
        except KeyError as exc:
            raise DataError(f"forecast entry {exc.args[0]} not in the hierarchy") from None
        rows = np.array([o_pos[o] for o in pd.to_datetime(df["origin"], utc=True, format="ISO8601")])
        values[rows, cols] = df["value"].to_numpy(float)
        if np.isnan(values).any():
            raise DataError("ragged forecast stacks: some (origin, series, level, h) entries missing")
        models = df["model"].unique()
        return cls(origins, values, s, str(models[0]) if len(models) else "")


def actual_stacks(panel: SeriesPanel, origins: np.ndarray, structure: CrossTemporalStructure) -> np.ndarray:
    """Observed cross-temporal stacks for windows starting at high-frequency ``origins``."""
    m = structure.m
    win = np.asarray(origins)[:, None] + np.arange(m)[None, :]
    b = panel.power[win]  # (Q, m, n_b)
    return np.asarray(structure.S_ct.astype(float) @ b.reshape(len(origins), -1).T).T


@dataclass(frozen=True)
class Spans:
    """Chronological spans in high-frequency steps: ``[0, train) [train, val) [val, test)``."""

    train_end: int
    validation_end: int
    test_end: int

    def check(self, m: int, length: int) -> None:
        if not 0 < self.train_end <= self.validation_end <= self.test_end <= length:
            raise DataError(f"spans {self} are not chronological within {length} steps")
        if self.train_end % m or self.validation_end % m:
            raise DataError(f"span boundaries must be multiples of m={m}")

    @classmethod
    def from_days(cls, steps_per_day: int, m: int, length: int, train_days, validation_days, test_days=None):
        train = int(round(train_days * steps_per_day)) // m * m
        val = train + int(round(validation_days * steps_per_day)) // m * m
        test = length if test_days is None else val + int(round(test_days * steps_per_day))
        return cls(train, val, min(test, length) // m * m)


@dataclass(frozen=True)
class RollingOriginResult:
    validation: ForecastSet
    validation_actuals: ForecastSet
    test: ForecastSet
    test_actuals: ForecastSet
    insample_fitted: dict = field(repr=False)
    insample_actuals: dict = field(repr=False)
    benchmark_test: ForecastSet | None = None


def _origins(start: int, stop: int, m: int, stride: int) -> np.ndarray:
    return np.arange(start, stop - m + 1, stride)


def rolling_origin(
    panel: SeriesPanel,
    structure: CrossTemporalStructure,
    spans: Spans,
    model: str = "linreg",
    stride: int | None = None,
    feature_overrides: Mapping[int, Mapping[str, int]] | None = None,
) -> RollingOriginResult:
    """Fit one model per (series, level) on the training span and forecast every origin.

    Origins advance by ``stride`` high-frequency steps (default ``m``) inside
    the validation and test spans; each yields a full ``n * m*`` stack.
    Upper series are forecast from their own aggregated history, so the
    stacks are generally incoherent.
    """
    s = structure
    m = s.m
    stride = stride or m
    if stride <= 0 or stride % m:
        raise DataError(f"stride {stride} must be a positive multiple of m={m}")
    spans.check(m, len(panel))
    val_o = _origins(spans.train_end, spans.validation_end, m, stride)
    test_o = _origins(spans.validation_end, spans.test_end, m, stride)
    if len(test_o) == 0:
        raise DataError("test span shorter than one forecast window")

    Mk = {k: s.temporal.steps(k) for k in s.temporal.factors}
    val_vals = np.empty((len(val_o), s.m_star, s.n))
    test_vals = np.empty((len(test_o), s.m_star, s.n))
    fitted, fit_actual = {}, {}
    for k in s.temporal.factors:
        level = aggregate_panel(panel, k, s.hierarchy)
        sl = s.temporal.level_slice(k)
        over = (feature_overrides or {}).get(level.step_minutes, {})
        spec = FeatureSpec.for_level(level.step_minutes, **over)
        if model == "linreg" and spans.train_end // k <= spec.lags + spec.n_features:
            raise DataError(
                f"training span too short for k={k}: need more than "
                f"{(spec.lags + spec.n_features) * k} high-frequency steps"
            )
        train_k = spans.train_end // k
        fitted[k] = np.empty((train_k, s.n))
        fit_actual[k] = level.power[:train_k]
        for i in range(s.n):
            if model == "linreg":
                mdl = fit_linreg(level, i, spec, stop=train_k)
            elif model == "naive":
                mdl = fit_naive(level, i)
            else:
                raise DataError(f"unknown base model {model!r}")
            fitted[k][:, i] = mdl.fitted(0, train_k)
            if len(val_o):
                val_vals[:, sl, i] = mdl.forecast(val_o // k, Mk[k])
            test_vals[:, sl, i] = mdl.forecast(test_o // k, Mk[k])

    ts = panel.timestamps
    mk = lambda o, v, name: ForecastSet(ts[o], v.reshape(len(o), -1), s, name)
    return RollingOriginResult(
        validation=mk(val_o, val_vals, model),
        validation_actuals=mk(val_o, actual_stacks(panel, val_o, s), "actual"),
        test=mk(test_o, test_vals, model),
        test_actuals=mk(test_o, actual_stacks(panel, test_o, s), "actual"),
        insample_fitted=fitted,
        insample_actuals=fit_actual,
    )
