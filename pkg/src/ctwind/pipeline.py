"""Experiment configuration, data ingestion, synthetic fixtures and the staged run.

Stages communicate through files inside the output directory::

    forecasts/   base forecasts and actual stacks (validation + test)
    errors/      error panels (in-sample residuals, validation errors)
    reconciled/  reconciled test forecasts, one CSV per base model
    metrics/     accuracy, ranking and decision-cost tables
    figures/     rendered plots of the metric tables
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import yaml

from . import __version__
from ._io import FLOAT_FORMAT, atomic_write_csv, atomic_write_text
from .covariance import (
    ErrorPanel,
    collect_insample_residuals,
    collect_validation_errors,
    estimate,
)
from .evaluate import accuracy_table, friedman_mcb, ranking_blocks, sweep_delta
from .forecast import ForecastSet, SeriesPanel, Spans, aggregate_panel, preprocess, rolling_origin
from .hierarchy import (
    CrossSectionalHierarchy,
    CrossTemporalStructure,
    build_cross_temporal,
    hierarchy_from_config,
    temporal_from_config,
)
from .reconcile import clamp_base_nonneg, reconcile

__all__ = [
    "StageError",
    "ExperimentConfig",
    "ALL_METHODS",
    "ingest",
    "synth_data",
    "run_experiment",
    "stage_aggregate",
    "stage_forecast",
    "stage_reconcile",
    "stage_evaluate",
]

log = logging.getLogger(__name__)

ALL_METHODS = ("base", "pbu", "ct_str", "ct_wlsv", "ct_bdshr", "ct_acov", "ite", "ct_bu")
EXTRA_METHODS = ("ct_ols",)
CT_KINDS = {"ct_ols": "ols", "ct_str": "str", "ct_wlsv": "wlsv", "ct_bdshr": "bdshr", "ct_acov": "acov"}
PANEL_METHODS = {"pbu", "ct_wlsv", "ct_bdshr", "ct_acov", "ite"}
BENCHMARK = "naive"
# dimensionless decision indices; six digits hide float noise from unit conversions
REPORT_FLOAT_FORMAT = "%.6g"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    data: str | None
    hierarchy: dict
    temporal: object = "statistical"
    base_models: list = field(default_factory=lambda: ["linreg"])
    methods: list = field(default_factory=lambda: list(ALL_METHODS))
    errors: str = "validation"
    spans: dict = field(
        default_factory=lambda: {"train_end": "2020-10-01", "validation_days": 92, "test_days": None}
    )
    stride: int | None = None
    delta: float = 0.01
    deltas: list = field(default_factory=lambda: [0.0, 0.01, 0.025])
    nonneg: str = "sntz"
    ite: dict = field(default_factory=lambda: {"tol": 1e-6, "max_iter": 100})
    features: dict = field(default_factory=dict)
    seed: int = 0
    figures: bool = True
    output: str | None = None
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.methods:
            raise StageError("config", "at least one method is required")
        unknown = set(self.methods) - set(ALL_METHODS) - set(EXTRA_METHODS)
        if unknown:
            raise StageError("config", f"unknown methods {sorted(unknown)}")
        bad = set(self.base_models) - {"naive", "linreg"}
        if bad or not self.base_models:
            raise StageError("config", f"base models must be a non-empty subset of naive/linreg, got {self.base_models}")
        if self.errors not in ("in_sample", "validation"):
            raise StageError("config", f"errors must be in_sample or validation, got {self.errors!r}")
        if self.nonneg not in ("none", "sntz"):
            raise StageError("config", f"nonneg must be none or sntz, got {self.nonneg!r}")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "ExperimentConfig":
        raw = dict(raw)
        known = {f for f in cls.__dataclass_fields__ if f != "base_dir"}
        extra = set(raw) - known
        if extra:
            raise StageError("config", f"unknown config keys {sorted(extra)}")
        if "hierarchy" not in raw:
            raise StageError("config", "missing 'hierarchy' section")
        raw.setdefault("data", None)
        return cls(**raw, base_dir=Path(base_dir))

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise StageError("config", f"cannot read {path}: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        out = {f: copy.deepcopy(getattr(self, f)) for f in self.__dataclass_fields__ if f != "base_dir"}
        if out["data"] is not None:
            out["data"] = str(self.data_path)
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @property
    def data_path(self) -> Path:
        if self.data is None:
            raise StageError("config", "no data path configured")
        p = Path(self.data)
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    def structure(self) -> CrossTemporalStructure:
        try:
            return build_cross_temporal(
                hierarchy_from_config(self.hierarchy), temporal_from_config(self.temporal)
            )
        except ValueError as exc:
            raise StageError("config", str(exc)) from None

    def resolve_spans(self, panel: SeriesPanel, m: int) -> Spans:
        sp = dict(self.spans)
        per_day = 1440 // panel.step_minutes
        if "train_end" in sp and sp["train_end"] is not None:
            end = pd.Timestamp(sp["train_end"], tz="UTC")
            train_days = (end - panel.timestamps[0]) / pd.Timedelta("1D")
        else:
            train_days = sp.get("train_days")
        if train_days is None:
            raise StageError("config", "spans need train_end or train_days")
        spans = Spans.from_days(
            per_day, m, len(panel), train_days, sp.get("validation_days", 92), sp.get("test_days")
        )
        try:
            spans.check(m, len(panel))
        except ValueError as exc:
            raise StageError("config", str(exc)) from None
        return spans


def ingest(path, hierarchy: CrossSectionalHierarchy | None = None) -> SeriesPanel:
    """Read ``timestamp,series_id,power_kw,wind_speed_ms`` and preprocess."""
    df = pd.read_csv(path)
    series = hierarchy.labels_bottom if hierarchy is not None else None
    panel = preprocess(SeriesPanel.from_long(df, series))
    summary = pd.DataFrame(panel.power, columns=panel.series).describe().T[["min", "50%", "max"]]
    log.info("ingested %d steps x %d series from %s\n%s", len(panel), len(panel.series), path, summary)
    return panel


def synth_data(
    n_b: int = 2,
    m: int = 48,
    days: int = 60,
    noise: float | dict = 1.0,
    seed: int = 0,
    start: str = "2020-01-01",
    shift_day: float | None = None,
    shift_factor: float = 2.0,
) -> SeriesPanel:
    """Diurnal turbine output with AR(1) noise, clamped at zero.

    ``noise`` scales the innovation standard deviation (``0`` gives a pure
    sinusoid); a dict may set ``scale``, ``phi``, ``sigma`` and ``common``.
    After ``shift_day`` days the noise variance is multiplied by ``shift_factor``.
    """
    rng = np.random.default_rng(seed)
    opts = {"scale": 1.0, "phi": 0.95, "sigma": 60.0, "common": 0.6}
    if isinstance(noise, dict):
        opts.update(noise)
    else:
        opts["scale"] = float(noise)
    per_day = 144
    T = days * per_day
    T -= T % m
    t = np.arange(T)
    phase = rng.uniform(-0.6, 0.6, n_b)
    base = rng.uniform(700, 900, n_b)
    amp = rng.uniform(350, 500, n_b)
    signal = base + amp * np.sin(2 * np.pi * t[:, None] / per_day + phase)

    sd = np.full(T, opts["sigma"] * opts["scale"])
    if shift_day is not None:
        sd[int(shift_day * per_day) :] *= np.sqrt(shift_factor)
    c = opts["common"]
    shocks = np.sqrt(c) * rng.standard_normal((T, 1)) + np.sqrt(1 - c) * rng.standard_normal((T, n_b))
    eps = np.zeros((T, n_b))
    for j in range(1, T):
        eps[j] = opts["phi"] * eps[j - 1] + sd[j] * shocks[j]
    power = np.maximum(signal + eps, 0.0)
    wind = np.maximum(12.0 * np.cbrt(power / 2000.0) + 0.1 * opts["scale"] * rng.standard_normal((T, n_b)), 0.0)
    ts = pd.date_range(start, periods=T, freq="10min", tz="UTC")
    return SeriesPanel(ts, power, wind, tuple(f"T{j + 1:02d}" for j in range(n_b)))


# -- stages -----------------------------------------------------------------


def _load_panel(cfg: ExperimentConfig, s: CrossTemporalStructure) -> SeriesPanel:
    try:
        return ingest(cfg.data_path, s.hierarchy)
    except (OSError, ValueError) as exc:
        raise StageError("ingest", str(exc)) from None


def stage_aggregate(cfg: ExperimentConfig, out: Path) -> Path:
    """Write every temporal level of every series as one long CSV."""
    s = cfg.structure()
    panel = _load_panel(cfg, s)
    frames = []
    for k in s.temporal.factors:
        lvl = aggregate_panel(panel, k, s.hierarchy)
        T, n = lvl.power.shape
        frames.append(
            pd.DataFrame(
                {
                    "timestamp": np.repeat(lvl.timestamps.strftime("%Y-%m-%dT%H:%M:%SZ"), n),
                    "series_id": np.tile(lvl.labels, T),
                    "level_k": k,
                    "power_kw": lvl.power.ravel(),
                    "wind_speed_ms": lvl.wind.ravel(),
                }
            )
        )
    path = Path(out) / "aggregated.csv"
    atomic_write_csv(pd.concat(frames, ignore_index=True), path)
    return path


def _write_forecasts(fs: ForecastSet, path: Path, method: str | None = None) -> None:
    atomic_write_csv(fs.to_frame(method), path)


def _read_forecasts(path: Path, s: CrossTemporalStructure) -> ForecastSet:
    return ForecastSet.from_frame(pd.read_csv(path), s)


def stage_forecast(cfg: ExperimentConfig, out: Path) -> None:
    """Base forecasts for validation and test spans plus both error panels."""
    s = cfg.structure()
    panel = _load_panel(cfg, s)
    spans = cfg.resolve_spans(panel, s.m)
    out = Path(out)
    models = list(dict.fromkeys([BENCHMARK] + list(cfg.base_models)))
    overrides = {int(k): v for k, v in (cfg.features or {}).items()}
    for model in models:
        try:
            ro = rolling_origin(panel, s, spans, model, stride=cfg.stride, feature_overrides=overrides)
        except ValueError as exc:
            raise StageError("forecast", f"{model}: {exc}") from None
        log.info(
            "%s: %d validation and %d test origins", model, len(ro.validation), len(ro.test)
        )
        _write_forecasts(ro.validation, out / "forecasts" / f"{model}_validation.csv")
        _write_forecasts(ro.test, out / "forecasts" / f"{model}_test.csv")
        if model == BENCHMARK:
            _write_forecasts(ro.validation_actuals, out / "forecasts" / "actual_validation.csv")
            _write_forecasts(ro.test_actuals, out / "forecasts" / "actual_test.csv")
        try:
            insample = collect_insample_residuals(ro.insample_fitted, ro.insample_actuals, s)
            insample.to_csv(out / "errors" / f"{model}_in_sample.csv")
            if len(ro.validation):
                val = collect_validation_errors(
                    clamp_base_nonneg(ro.validation), ro.validation_actuals, s
                )
                val.to_csv(out / "errors" / f"{model}_validation.csv")
        except ValueError as exc:
            raise StageError("forecast", f"{model} error panel: {exc}") from None


def _covariances(methods, panel: ErrorPanel | None, s) -> dict:
    cache = {}

    def get(kind):
        if kind not in cache:
            cache[kind] = estimate(kind, panel, s)
        return cache[kind]

    need = {}
    for method in methods:
        if method in CT_KINDS:
            need[method] = get(CT_KINDS[method])
        elif method == "pbu":
            need[method] = get("shr_cs")
        elif method == "ite":
            need[method] = (get("acov"), get("shr_cs"))
    return need


def stage_reconcile(cfg: ExperimentConfig, out: Path) -> None:
    """Reconcile the test forecasts of every configured base model."""
    s = cfg.structure()
    out = Path(out)
    for model in cfg.base_models:
        try:
            base = clamp_base_nonneg(_read_forecasts(out / "forecasts" / f"{model}_test.csv", s))
        except (OSError, ValueError) as exc:
            raise StageError("reconcile", f"cannot read base forecasts for {model}: {exc}") from None
        panel = None
        if PANEL_METHODS & set(cfg.methods):
            path = out / "errors" / f"{model}_{cfg.errors}.csv"
            try:
                panel = ErrorPanel.from_csv(path, s, cfg.errors)
            except (OSError, ValueError) as exc:
                raise StageError("reconcile", f"cannot read error panel {path.name}: {exc}") from None
        try:
            omegas = _covariances(cfg.methods, panel, s)
        except ValueError as exc:
            raise StageError("covariance", f"{model}: {exc}") from None
        frames = []
        for method in cfg.methods:
            t0 = time.perf_counter()
            try:
                if method == "base":
                    values = base.values
                else:
                    values = _reconcile_one(cfg, method, base.values, omegas.get(method), s)
            except (ValueError, RuntimeError) as exc:
                raise StageError("reconcile", f"{model}/{method}: {exc}") from None
            log.info("%s/%s reconciled in %.2fs", model, method, time.perf_counter() - t0)
            fs = ForecastSet(base.origins, values, s, model)
            frames.append(fs.to_frame(method))
        atomic_write_csv(pd.concat(frames, ignore_index=True), out / "reconciled" / f"{model}.csv")


def _reconcile_one(cfg, method, Y, omega, s) -> np.ndarray:
    if method in CT_KINDS:
        res = reconcile(Y, s, "ct_structural", omega=omega, nonneg=cfg.nonneg)
    elif method == "ct_bu":
        res = reconcile(Y, s, "ct_bu", nonneg=cfg.nonneg)
    elif method == "pbu":
        res = reconcile(Y, s, "pbu", omega=omega, nonneg=cfg.nonneg)
    else:
        te, cs = omega
        ite = cfg.ite or {}
        res = reconcile(
            Y, s, "ite", omega_te=te, omega_cs=cs, nonneg=cfg.nonneg,
            tol=float(ite.get("tol", 1e-6)), max_iter=int(ite.get("max_iter", 100)),
        )
        if not res.converged:
            log.warning("ite did not converge (discrepancy %.3g)", res.discrepancy)
    return np.atleast_2d(res.tilde_y)


def _load_approaches(cfg, out: Path, s) -> dict[str, ForecastSet]:
    approaches = {f"{BENCHMARK}:base": clamp_base_nonneg(_read_forecasts(out / "forecasts" / f"{BENCHMARK}_test.csv", s))}
    for model in cfg.base_models:
        df = pd.read_csv(out / "reconciled" / f"{model}.csv")
        for method in cfg.methods:
            part = df[df["method"] == method]
            if part.empty:
                raise StageError("evaluate", f"no {method} rows in reconciled/{model}.csv")
            approaches[f"{model}:{method}"] = ForecastSet.from_frame(part, s)
    return approaches


def stage_evaluate(cfg: ExperimentConfig, out: Path) -> dict[str, pd.DataFrame]:
    """AvgRelMSE, per-series MSE, MCB ranking and decision-cost tables (+ figures)."""
    s = cfg.structure()
    out = Path(out)
    try:
        actual = _read_forecasts(out / "forecasts" / "actual_test.csv", s)
        approaches = _load_approaches(cfg, out, s)
    except (OSError, ValueError) as exc:
        raise StageError("evaluate", str(exc)) from None
    step = 10
    table = accuracy_table(approaches, actual, step)
    avg = table.avg_rel(f"{BENCHMARK}:base")
    mse_long = pd.concat(
        [
            pd.DataFrame(
                {
                    "approach": name,
                    "series_id": np.repeat(table.series, len(table.orders)),
                    "level_minutes": np.tile(table.level_minutes, len(table.series)),
                    "mse": arr.ravel(),
                }
            )
            for name, arr in table.mse.items()
        ],
        ignore_index=True,
    )
    errs, names = ranking_blocks(approaches, actual)
    try:
        mcb = friedman_mcb(errs, names).to_frame()
    except ValueError as exc:
        log.warning("MCB skipped: %s", exc)
        mcb = pd.DataFrame(columns=["approach", "mean_rank", "lower", "upper", "worse_than_best", "friedman_p"])
    deltas = sorted(set(cfg.deltas) | {cfg.delta})
    costs = pd.concat(
        [sweep_delta(f, actual, deltas, step_minutes=step, approach=name) for name, f in approaches.items()],
        ignore_index=True,
    )
    tables = {"avg_rel_mse": avg.reset_index(), "mse": mse_long, "mcb": mcb, "decision_costs": costs}
    for name, df in tables.items():
        fmt = REPORT_FLOAT_FORMAT if name == "decision_costs" else FLOAT_FORMAT
        atomic_write_csv(df, out / "metrics" / f"{name}.csv", float_format=fmt)
    if cfg.figures:
        from . import report

        report.render_all(tables, out / "figures", delta=cfg.delta)
    return tables


def _hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def run_experiment(cfg: ExperimentConfig, out: Path | str | None = None) -> Path:
    """Run every stage into a scratch directory, then move it to ``out``.

    Any failure removes the scratch directory, so no partial artifacts remain.
    """
    out = Path(out or cfg.output or "ctwind-out").resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    work = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.partial-"))
    timings = {}
    try:
        cfg_text = cfg.to_yaml()
        atomic_write_text(cfg_text, work / "config.yaml")
        for name, fn in (
            ("forecast", stage_forecast),
            ("reconcile", stage_reconcile),
            ("evaluate", stage_evaluate),
        ):
            t0 = time.perf_counter()
            fn(cfg, work)
            timings[name] = round(time.perf_counter() - t0, 3)
        manifest = {
            "config_sha256": _hash(cfg_text),
            "seed": cfg.seed,
            "versions": {
                "ctwind": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "pandas": pd.__version__,
            },
            "timings_s": timings,
        }
        atomic_write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", work / "manifest.json")
        if out.exists():
            shutil.rmtree(out)
        work.rename(out)
    except BaseException:
        shutil.rmtree(work, ignore_errors=True)
        raise
    return out


def synth_config(series: Sequence[str], data: str, temporal="statistical", **overrides) -> dict:
    """Config dict for a synthetic panel: Total over ``series``, no mid-level groups."""
    cfg = {
        "data": data,
        "hierarchy": {"bottom": list(series), "total": "Total"},
        "temporal": temporal,
        "spans": {"train_days": 30, "validation_days": 15, "test_days": 15},
    }
    cfg.update(overrides)
    return cfg
