"""Cross-temporal reconciliation: projection, structural, bottom-up, partly
bottom-up and iterative, plus non-negativity handling.

Every function accepts a single stacked vector of length ``n * m*`` or a
``(Q, n * m*)`` batch; one factorisation serves the whole batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, sparse

from .covariance import CovarianceModel
from .hierarchy import CrossTemporalStructure, coherence_residual

__all__ = [
    "ReconciliationError",
    "ReconciledResult",
    "METHODS",
    "reconcile",
    "reconcile_projection",
    "reconcile_structural",
    "reconcile_bottom_up",
    "reconcile_partly_bu",
    "reconcile_iterative",
    "apply_sntz",
    "clamp_base_nonneg",
    "coherence_tolerance",
]

log = logging.getLogger(__name__)

METHODS = ("ct_projection", "ct_structural", "ct_bu", "pbu", "ite")


class ReconciliationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconciledResult:
    tilde_y: np.ndarray
    method: str
    coherence: float
    iterations: int | None = None
    converged: bool | None = None
    discrepancy: float | None = None
    discrepancy_history: tuple[float, ...] = field(default=(), repr=False)
    cleanup_applied: bool = False
    negatives_clamped: int = 0


def coherence_tolerance(y: np.ndarray) -> float:
    return 1e-8 * max(1.0, float(np.max(np.abs(y))) if np.size(y) else 1.0)


def _batch(base, structure: CrossTemporalStructure):
    y = structure.check_length(base)
    if not np.all(np.isfinite(y)):
        raise ReconciliationError("base forecasts contain non-finite values")
    return y.ndim == 1, np.atleast_2d(y)


def _finish(Y: np.ndarray, single: bool, structure, method: str, **diag) -> ReconciledResult:
    out = Y[0] if single else Y
    coh = float(np.max(coherence_residual(out, structure)))
    return ReconciledResult(out, method, coh, **diag)


def _spd_solve(A: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive-definite ``A``; one jittered retry."""
    A = np.asarray(A, dtype=float)
    try:
        return linalg.cho_solve(linalg.cho_factor(A, lower=True), B)
    except linalg.LinAlgError:
        jitter = 1e-10 * np.trace(A) / A.shape[0]
        log.warning("%s: Cholesky failed, retrying with jitter %.3g", what, jitter)
        try:
            return linalg.cho_solve(
                linalg.cho_factor(A + jitter * np.eye(A.shape[0]), lower=True), B
            )
        except linalg.LinAlgError:
            raise ReconciliationError(
                f"{what}: system is singular (condition number ~{np.linalg.cond(A):.3g})"
            ) from None


def _check_omega(omega: CovarianceModel, dim: int, method: str):
    if omega is None:
        raise ReconciliationError(f"{method} needs a covariance model")
    if omega.dim != dim:
        raise ReconciliationError(
            f"{method}: covariance of order {omega.dim} does not match problem size {dim}"
        )


def _project(Y: np.ndarray, C, Omega, what: str) -> np.ndarray:
    """Rows of ``Y`` minus ``Omega C' (C Omega C')^-1 C y``."""
    if C.shape[0] == 0:
        return Y.copy()
    OCt = Omega @ C.T
    OCt = OCt.toarray() if sparse.issparse(OCt) else np.asarray(OCt)
    CoC = C @ OCt
    z = _spd_solve(CoC, (C @ Y.T), what)
    return Y - (OCt @ z).T


def reconcile_projection(base, omega: CovarianceModel, structure: CrossTemporalStructure):
    """Weighted projection onto the coherent subspace, via ``C_ct``."""
    single, Y = _batch(base, structure)
    _check_omega(omega, structure.size, "ct_projection")
    C = structure.C_ct.astype(float)
    out = _project(Y, C, omega.to_sparse(), "ct_projection")
    return _finish(out, single, structure, f"ct_projection({omega.kind})")


def reconcile_structural(base, omega: CovarianceModel, structure: CrossTemporalStructure):
    """``S (S' W^-1 S)^-1 S' W^-1 y`` with the inverse of ``W`` taken block-wise."""
    single, Y = _batch(base, structure)
    _check_omega(omega, structure.size, "ct_structural")
    S = structure.S_ct.astype(float)
    SWi = (S.T @ omega.inverse()).tocsr()
    normal = (SWi @ S).toarray()
    b = _spd_solve(normal, SWi @ Y.T, "ct_structural")
    out = np.asarray(S @ b).T
    return _finish(out, single, structure, f"ct_structural({omega.kind})")


def reconcile_bottom_up(base, structure: CrossTemporalStructure, omega=None):
    """Aggregate the high-frequency bottom block; upper entries are ignored."""
    single, Y = _batch(base, structure)
    b = Y[:, structure.bottom_hf_positions()]
    out = np.asarray(structure.S_ct.astype(float) @ b.T).T
    return _finish(out, single, structure, "ct_bu")


def _cs_weights(W: np.ndarray, S_cs) -> np.ndarray:
    """``G_cs = (S' W^-1 S)^-1 S' W^-1`` as a dense ``n_b x n`` array."""
    S = S_cs.toarray().astype(float)
    Wi_S = _spd_solve(W, S, "pbu weights")
    return _spd_solve(S.T @ Wi_S, Wi_S.T, "pbu normal equations")


def reconcile_partly_bu(base, omega: CovarianceModel, structure: CrossTemporalStructure):
    """Cross-sectionally reconcile each high-frequency slot, then aggregate bottom-up."""
    single, Y = _batch(base, structure)
    s = structure
    _check_omega(omega, s.n, "pbu")
    G = _cs_weights(omega.to_dense(), s.S_cs)
    hf = s.as_matrix(Y)[:, s.temporal.k_star :, :]  # (Q, m, n)
    b = hf @ G.T  # (Q, m, n_b)
    out = np.asarray(s.S_ct.astype(float) @ b.reshape(len(Y), -1).T).T
    return _finish(out, single, s, f"pbu({omega.kind})")


def _projector(Omega: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Dense ``I - Omega C' (C Omega C')^-1 C`` (right-multiplication form transposed)."""
    d = Omega.shape[0]
    if C.shape[0] == 0:
        return np.eye(d)
    OCt = Omega @ C.T
    return np.eye(d) - OCt @ _spd_solve(C @ OCt, C, "iterative sub-problem")


def reconcile_iterative(
    base,
    omega_te: CovarianceModel,
    omega_cs: CovarianceModel,
    structure: CrossTemporalStructure,
    tol: float = 1e-6,
    max_iter: int = 100,
    stall: int = 10,
):
    """Alternate temporal (per series) and cross-sectional (per slot) reconciliation.

    ``omega_te`` supplies each series' ``m* x m*`` block (``acov``).
    ``omega_cs`` is either one ``n x n`` matrix used for every slot
    (``shr_cs``) or a full-size model whose per-slot blocks are used
    (``bdshr``, one matrix per level).  The loop
    stops when the largest temporal discrepancy, relative to the series
    scale, drops to ``tol``, or after ``stall`` iterations without a new
    smallest discrepancy; without convergence the least discrepant iterate
    is kept.  A final unweighted projection removes any leftover incoherence.
    """
    single, Y = _batch(base, structure)
    s = structure
    _check_omega(omega_te, s.size, "ite")
    if omega_cs is None or omega_cs.dim not in (s.n, s.size):
        raise ReconciliationError(
            f"ite: cross-sectional covariance must have order {s.n} or {s.size}"
        )
    C_te = s.C_te.toarray().astype(float)
    C_cs = s.C_cs.toarray().astype(float)
    P_te = [
        _projector(omega_te.block(s.series_positions(i)), C_te) for i in range(s.n)
    ]
    if omega_cs.dim == s.n:
        P_cs = [_projector(omega_cs.to_dense(), C_cs)] * s.m_star
    else:
        P_cs = [
            _projector(omega_cs.block(np.arange(r * s.n, (r + 1) * s.n)), C_cs)
            for r in range(s.m_star)
        ]

    X = s.as_matrix(Y).copy()  # (Q, m*, n)
    history = []
    converged = False
    best, best_X, it = np.inf, X.copy(), 0
    for it in range(1, max_iter + 1):
        for i in range(s.n):
            X[:, :, i] = X[:, :, i] @ P_te[i].T
        for r in range(s.m_star):
            X[:, r, :] = X[:, r, :] @ P_cs[r].T
        scale = np.maximum(1.0, np.max(np.abs(X), axis=1))  # (Q, n)
        D = np.abs(np.einsum("kr,qri->qki", C_te, X)) / scale[:, None, :]
        disc = float(D.max()) if D.size else 0.0
        history.append(disc)
        if disc < best:
            best, best_X, best_it = disc, X.copy(), it
        if disc <= tol:
            converged = True
            break
        if it - best_it >= stall:
            break
    if not converged:
        # The alternating oblique projections need not contract; fall back to
        # the least discrepant iterate rather than a possibly diverged last one.
        log.warning(
            "ite: no convergence after %d iterations (last %.3g, best %.3g at iteration %d)",
            it, disc, best, best_it,
        )
        X = best_X

    out = X.reshape(len(Y), -1)
    cleanup = False
    if np.any(coherence_residual(out, s) > 0):
        C = s.C_ct.astype(float)
        out = _project(out, C, sparse.identity(s.size, format="csr"), "ite cleanup")
        cleanup = True
        log.debug("ite: final coherence projection applied")
    return _finish(
        out, single, s, "ite",
        iterations=it, converged=converged, discrepancy=min(history, default=0.0),
        discrepancy_history=tuple(history), cleanup_applied=cleanup,
    )


def apply_sntz(result: ReconciledResult, structure: CrossTemporalStructure) -> ReconciledResult:
    """Set negative high-frequency bottom values to zero and re-aggregate."""
    single, Y = _batch(result.tilde_y, structure)
    b = Y[:, structure.bottom_hf_positions()]
    neg = int(np.sum(b < 0))
    b = np.maximum(b, 0.0)
    out = np.asarray(structure.S_ct.astype(float) @ b.T).T
    out = out[0] if single else out
    return replace(
        result,
        tilde_y=out,
        coherence=float(np.max(coherence_residual(out, structure))),
        negatives_clamped=result.negatives_clamped + neg,
    )


def clamp_base_nonneg(forecasts):
    """Elementwise ``max(0, .)`` on an array or on a forecast set's values."""
    values = getattr(forecasts, "values", None)
    if values is not None and not isinstance(forecasts, np.ndarray):
        return replace(forecasts, values=np.maximum(values, 0.0))
    return np.maximum(np.asarray(forecasts, dtype=float), 0.0)


def reconcile(
    base,
    structure: CrossTemporalStructure,
    method: str,
    omega: CovarianceModel | None = None,
    omega_te: CovarianceModel | None = None,
    omega_cs: CovarianceModel | None = None,
    nonneg: str = "none",
    **kwargs,
) -> ReconciledResult:
    """Dispatch on ``method`` (one of :data:`METHODS`) and optionally apply ``sntz``."""
    if method == "ct_projection":
        res = reconcile_projection(base, omega, structure)
    elif method == "ct_structural":
        res = reconcile_structural(base, omega, structure)
    elif method == "ct_bu":
        res = reconcile_bottom_up(base, structure)
    elif method == "pbu":
        res = reconcile_partly_bu(base, omega, structure)
    elif method == "ite":
        res = reconcile_iterative(base, omega_te, omega_cs, structure, **kwargs)
    else:
        raise ReconciliationError(f"unknown method {method!r}; choose from {METHODS}")
    if nonneg == "sntz":
        res = apply_sntz(res, structure)
    elif nonneg != "none":
        raise ReconciliationError(f"unknown non-negativity option {nonneg!r}")
    return res
