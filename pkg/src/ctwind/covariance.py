"""Error panels and the structured covariance approximations used for weighting.

Second moments are raw (uncentred) with a ``1/N`` divisor throughout:
forecast errors are expected to be zero-mean, and a biased forecaster
should be penalised through its weight rather than have the bias removed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from scipy import linalg, sparse

from ._io import atomic_write_csv
from .hierarchy import CrossTemporalStructure

__all__ = [
    "CovarianceError",
    "ErrorPanel",
    "CovarianceModel",
    "KINDS",
    "estimate",
    "shrink",
    "shrink_to_diagonal",
    "collect_insample_residuals",
    "collect_validation_errors",
    "is_positive_definite",
]

log = logging.getLogger(__name__)

KINDS = ("ols", "str", "wlsv", "acov", "bdshr", "shr_cs")
SOURCES = ("in_sample", "validation", "synthetic")
EPS_REL = 1e-10


class CovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorPanel:
    """``N_obs`` complete cross-temporal error stacks, one per row."""

    source: str
    observations: np.ndarray
    structure: CrossTemporalStructure = field(repr=False)

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim != 2 or obs.shape[1] != self.structure.size:
            raise CovarianceError(
                f"panel shape {obs.shape} does not match n*m* = {self.structure.size}"
            )
        if not np.all(np.isfinite(obs)):
            raise CovarianceError("error panel contains non-finite entries")
        if self.source not in SOURCES:
            raise CovarianceError(f"unknown error source {self.source!r}")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)

    @property
    def n_obs(self) -> int:
        return self.observations.shape[0]

    def per_level_view(self, k: int) -> np.ndarray:
        """``(N_obs * M_k, n)`` matrix of level-``k`` errors."""
        s = self.structure
        sl = s.temporal.level_slice(k)
        return s.as_matrix(self.observations)[:, sl, :].reshape(-1, s.n)

    def series_view(self, i: int) -> np.ndarray:
        """``(N_obs, m*)`` temporal error stacks of series ``i``."""
        return self.observations[:, self.structure.series_positions(i)]

    def to_csv(self, path) -> None:
        cols = [f"{s}|{k}|{h}" for s, k, h in self.structure.labels()]
        df = pd.DataFrame(self.observations, columns=cols)
        df.insert(0, "obs", np.arange(self.n_obs))
        atomic_write_csv(df, path)

    @classmethod
    def from_csv(cls, path, structure: CrossTemporalStructure, source: str) -> "ErrorPanel":
        df = pd.read_csv(path)
        expected = [f"{s}|{k}|{h}" for s, k, h in structure.labels()]
        cols = [c for c in df.columns if c != "obs"]
        if cols != expected:
            raise CovarianceError(f"{path}: column layout does not match the hierarchy")
        return cls(source, df[cols].to_numpy(float), structure)


@dataclass(frozen=True)
class CovarianceModel:
    """Structured symmetric positive-definite weight matrix.

    ``structure`` is one of ``identity``, ``diagonal``, ``block_diagonal`` or
    ``full``.  Diagonal kinds keep ``diag``; the others keep ``blocks`` as
    ``(indices, matrix)`` pairs partitioning ``range(dim)``.
    ``shrink_lambda`` holds the intensity of each shrunk block, in order.
    """

    kind: str
    structure: str
    dim: int
    diag: np.ndarray | None = None
    blocks: tuple = ()
    shrink_lambda: tuple[float, ...] = ()
    source: str | None = None

    def to_dense(self) -> np.ndarray:
        if self.diag is not None:
            return np.diag(self.diag)
        out = np.zeros((self.dim, self.dim))
        for idx, block in self.blocks:
            out[np.ix_(idx, idx)] = block
        return out

    def to_sparse(self) -> sparse.csr_matrix:
        if self.diag is not None:
            return sparse.diags(self.diag, format="csr")
        return _blocks_to_sparse(self.blocks, self.dim)

    def inverse(self) -> sparse.csr_matrix:
        """Inverse built block by block (analytic for diagonals)."""
        if self.diag is not None:
            return sparse.diags(1.0 / self.diag, format="csr")
        inv = []
        for idx, block in self.blocks:
            c = linalg.cho_factor(block, lower=True)
            inv.append((idx, linalg.cho_solve(c, np.eye(len(idx)))))
        return _blocks_to_sparse(inv, self.dim)

    def block(self, idx) -> np.ndarray:
        """Dense principal sub-matrix on ``idx``."""
        idx = np.asarray(idx)
        if self.diag is not None:
            return np.diag(self.diag[idx])
        return self.to_dense()[np.ix_(idx, idx)]

    def is_positive_definite(self) -> bool:
        if self.diag is not None:
            return bool(np.all(self.diag > 0))
        return all(is_positive_definite(b) for _, b in self.blocks)


def _blocks_to_sparse(blocks, dim) -> sparse.csr_matrix:
    rows, cols, vals = [], [], []
    for idx, block in blocks:
        idx = np.asarray(idx)
        r, c = np.meshgrid(idx, idx, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.asarray(block).ravel())
    if not rows:
        return sparse.csr_matrix((dim, dim))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
    )


def is_positive_definite(a: np.ndarray) -> bool:
    try:
        linalg.cholesky(np.asarray(a, dtype=float), lower=True)
    except linalg.LinAlgError:
        return False
    return True


def _floor(var: np.ndarray, what: str) -> np.ndarray:
    var = np.array(var, dtype=float)
    mean = var.mean() if var.size else 0.0
    eps = EPS_REL * mean if mean > 0 else EPS_REL
    low = var < eps
    if np.any(low):
        log.warning("%s: %d degenerate variance(s) floored at %.3g", what, int(low.sum()), eps)
        var[low] = eps
    return var


def shrink_to_diagonal(cov: np.ndarray, lam: float) -> np.ndarray:
    """``lam * diag(cov) + (1 - lam) * cov``."""
    cov = np.asarray(cov, dtype=float)
    out = (1.0 - lam) * cov
    np.fill_diagonal(out, np.diag(cov))
    return out


def shrink(errors: np.ndarray, lam: float | None = None) -> tuple[np.ndarray, float]:
    """Schäfer-Strimmer shrinkage of the raw second-moment matrix toward its diagonal.

    Parameters
    ----------
    errors : (N, d) array
        Error observations, one per row.
    lam : float, optional
        Force the intensity instead of estimating it.

    Returns
    -------
    shrunk : (d, d) array
    lam : float
        Intensity actually used, in ``[0, 1]``.
    """
    x = np.asarray(errors, dtype=float)
    if x.ndim != 2:
        raise CovarianceError("shrink expects a 2-D error matrix")
    n, d = x.shape
    if n < 2:
        raise CovarianceError(f"need at least 2 observations to shrink, got {n}")
    if not np.all(np.isfinite(x)):
        raise CovarianceError("non-finite errors")
    cov = x.T @ x / n
    var = _floor(np.diag(cov), "shrink")
    np.fill_diagonal(cov, var)
    if lam is None:
        lam = _ss_intensity(x, var)
    lam = float(np.clip(lam, 0.0, 1.0))
    return shrink_to_diagonal(cov, lam), lam


def _ss_intensity(x: np.ndarray, var: np.ndarray) -> float:
    n, d = x.shape
    if d < 2:
        return 0.0
    xs = x / np.sqrt(var)
    w_mean = xs.T @ xs / n
    v = ((xs**2).T @ (xs**2) - n * w_mean**2) / (n * (n - 1))
    np.fill_diagonal(v, 0.0)
    corr = w_mean.copy()
    np.fill_diagonal(corr, 0.0)
    denom = float(np.sum(corr**2))
    if denom == 0.0:
        return 1.0
    return float(np.sum(v) / denom)


def _pd_block(errors: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    """Shrunk raw second moments of one full block.

    The intensity is always estimated: it tends to zero once observations
    dominate the block size, while a raw ``d x d`` moment matrix from
    ``N`` close to ``d`` rows is nearly singular even when ``N > d``.
    """
    n, d = errors.shape
    if n <= d:
        log.warning("%s: %d observations for a %dx%d block", what, n, d, d)
    cov, lam = shrink(errors)
    while not is_positive_definite(cov):
        lam = min(1.0, max(2 * lam, 1e-3))
        log.warning("%s: shrunk block not PD, raising intensity to %.3g", what, lam)
        cov, lam = shrink(errors, lam)
    return cov, lam


def estimate(
    kind: str,
    panel: ErrorPanel | None,
    structure: CrossTemporalStructure,
    lam: float | None = None,
) -> CovarianceModel:
    """Estimate one of the covariance approximations.

    ``ols`` and ``str`` ignore the panel (it may be ``None``).  ``lam``
    forces the shrinkage intensity for ``bdshr`` and ``shr_cs``.
    """
    s = structure
    dim = s.size
    if kind == "ols":
        return CovarianceModel("ols", "identity", dim, diag=np.ones(dim))
    if kind == "str":
        d = np.asarray(s.S_ct.sum(axis=1), dtype=float).ravel()
        return CovarianceModel("str", "diagonal", dim, diag=d)
    if kind not in KINDS:
        raise CovarianceError(f"unknown covariance kind {kind!r}; choose from {KINDS}")
    if panel is None:
        raise CovarianceError(f"{kind} needs an error panel")
    if panel.structure is not s and panel.structure.size != s.size:
        raise CovarianceError("panel and structure dimensions differ")
    if panel.n_obs < 2:
        raise CovarianceError(f"{kind} needs at least 2 error observations, got {panel.n_obs}")

    if kind == "wlsv":
        d = np.empty(dim)
        for k in s.temporal.factors:
            e = panel.per_level_view(k)
            d[s.level_positions(k)] = np.tile(np.mean(e**2, axis=0), s.temporal.steps(k))
        return CovarianceModel("wlsv", "diagonal", dim, diag=_floor(d, "wlsv"), source=panel.source)

    if kind == "acov":
        blocks, lams = [], []
        for i in range(s.n):
            cov, lam_i = _pd_block(panel.series_view(i), f"acov[{s.hierarchy.labels[i]}]")
            blocks.append((s.series_positions(i), cov))
            lams.append(lam_i)
        return CovarianceModel(
            "acov", "block_diagonal", dim, blocks=tuple(blocks),
            shrink_lambda=tuple(lams), source=panel.source,
        )

    if kind == "bdshr":
        blocks, lams = [], []
        for k in s.temporal.factors:
            cov, lam_k = shrink(panel.per_level_view(k), lam)
            lams.append(lam_k)
            sl = s.temporal.level_slice(k)
            for r in range(sl.start, sl.stop):
                blocks.append((np.arange(r * s.n, (r + 1) * s.n), cov))
        return CovarianceModel(
            "bdshr", "block_diagonal", dim, blocks=tuple(blocks),
            shrink_lambda=tuple(lams), source=panel.source,
        )

    # shr_cs: cross-sectional n x n matrix from the high-frequency errors
    cov, lam_cs = shrink(panel.per_level_view(1), lam)
    return CovarianceModel(
        "shr_cs", "full", s.n, blocks=((np.arange(s.n), cov),),
        shrink_lambda=(lam_cs,), source=panel.source,
    )


def collect_insample_residuals(
    fitted: Mapping[int, np.ndarray],
    actuals: Mapping[int, np.ndarray],
    structure: CrossTemporalStructure,
) -> ErrorPanel:
    """Stack one-step in-sample residuals into one row per complete cycle.

    ``fitted[k]`` and ``actuals[k]`` are ``(T / k, n)`` arrays on a common
    span starting at a cycle boundary; ``NaN`` marks fitted values that could
    not be produced (insufficient lag history).  Cycles with any missing
    residual at any level are dropped.
    """
    s = structure
    t = s.temporal
    n_cycles = None
    rows = []
    for k in t.factors:
        if k not in fitted or k not in actuals:
            raise CovarianceError(f"no in-sample residuals for level k={k}")
        f = np.asarray(fitted[k], dtype=float)
        a = np.asarray(actuals[k], dtype=float)
        if f.shape != a.shape or f.ndim != 2 or f.shape[1] != s.n:
            raise CovarianceError(
                f"level k={k}: fitted {f.shape} and actual {a.shape} must both be (T/k, {s.n})"
            )
        M = t.steps(k)
        if f.shape[0] % M:
            raise CovarianceError(f"level k={k}: {f.shape[0]} rows is not a whole number of cycles")
        c = f.shape[0] // M
        if n_cycles is None:
            n_cycles = c
        elif c != n_cycles:
            raise CovarianceError(
                f"level k={k} spans {c} cycles, other levels span {n_cycles}"
            )
        rows.append((f - a).reshape(c, M, s.n))
    stack = np.concatenate(rows, axis=1)  # (N, m*, n)
    ok = np.all(np.isfinite(stack), axis=(1, 2))
    if not np.all(ok):
        log.info("in-sample panel: dropped %d incomplete cycle(s)", int((~ok).sum()))
    return ErrorPanel("in_sample", stack[ok].reshape(int(ok.sum()), -1), s)


def collect_validation_errors(forecasts, actuals, structure: CrossTemporalStructure) -> ErrorPanel:
    """One panel row per origin: forecast stack minus actual stack.

    Accepts arrays of shape ``(Q, n*m*)`` or objects exposing ``values``.
    """
    f = structure.check_length(getattr(forecasts, "values", forecasts))
    a = structure.check_length(getattr(actuals, "values", actuals))
    if f.shape != a.shape:
        raise CovarianceError(f"forecast {f.shape} and actual {a.shape} stacks differ")
    f, a = np.atleast_2d(f), np.atleast_2d(a)
    ok = np.all(np.isfinite(a), axis=1) & np.all(np.isfinite(f), axis=1)
    if not np.all(ok):
        log.info("validation panel: dropped %d origin(s) with incomplete data", int((~ok).sum()))
    return ErrorPanel("validation", (f - a)[ok], structure)


def read_error_panel(path: str | Path, structure: CrossTemporalStructure, source: str) -> ErrorPanel:
    return ErrorPanel.from_csv(path, structure, source)
