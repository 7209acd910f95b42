"""Shared fixtures-as-functions and independent dense oracles for the tests."""

from __future__ import annotations

import numpy as np

from ctwind.covariance import ErrorPanel
from ctwind.hierarchy import CrossSectionalHierarchy, TemporalSpec, build_cross_temporal

OMEGA_KINDS = ("ols", "str", "wlsv", "bdshr", "acov")


def small_structure():
    """X = W + Z with m = 6 and K = {6, 3, 2, 1}."""
    h = CrossSectionalHierarchy(("X",), ("W", "Z"), np.array([[1, 1]]))
    return build_cross_temporal(h, TemporalSpec(6, (6, 3, 2, 1)))


def random_structure(rng, max_bottom=4, ms=(1, 2, 3, 4, 6, 12)):
    n_b = int(rng.integers(1, max_bottom + 1))
    bottom = [f"B{j}" for j in range(n_b)]
    groups = {}
    if n_b >= 3 and rng.random() < 0.7:
        cut = int(rng.integers(1, n_b))
        groups = {"G1": bottom[:cut], "G2": bottom[cut:]}
    h = CrossSectionalHierarchy.from_groups(bottom, groups)
    m = int(rng.choice(ms))
    middle = [k for k in range(m - 1, 1, -1) if m % k == 0 and rng.random() < 0.6]
    factors = tuple(sorted({m, 1, *middle}, reverse=True))
    return build_cross_temporal(h, TemporalSpec(m, factors))


def random_panel(s, rng, n_obs=None, source="validation"):
    """Correlated errors: a common factor plus series noise with random scales."""
    n_obs = n_obs or int(rng.integers(2, 3 * s.size))
    common = rng.standard_normal((n_obs, 1))
    scale = rng.uniform(0.5, 3.0, s.size)
    e = (0.6 * common + rng.standard_normal((n_obs, s.size))) * scale
    return ErrorPanel(source, e, s)


def dense_omega(model):
    return np.asarray(model.to_dense(), dtype=float)


def kkt_reconcile(y_hat, omega, C):
    """argmin (y - y_hat)' omega^-1 (y - y_hat) subject to C y = 0, via the KKT system."""
    d, r = omega.shape[0], C.shape[0]
    W = np.linalg.inv(omega)
    K = np.zeros((d + r, d + r))
    K[:d, :d] = W
    K[:d, d:] = C.T
    K[d:, :d] = C
    rhs = np.concatenate([W @ y_hat, np.zeros(r)])
    return np.linalg.solve(K, rhs)[:d]


def brute_bottom_up(y_hat, s):
    """Aggregate the high-frequency bottom block with explicit loops."""
    n, n_a, m = s.n, s.n_a, s.m
    Y = np.asarray(y_hat).reshape(s.m_star, n)
    hf = Y[s.temporal.k_star :, n_a:]  # (m, n_b)
    A = s.hierarchy.agg_matrix
    out = np.zeros((s.m_star, n))
    r = 0
    for k in s.temporal.factors:
        for j in range(m // k):
            block = hf[j * k : (j + 1) * k].sum(axis=0)
            out[r, n_a:] = block
            out[r, :n_a] = A @ block
            r += 1
    return out.ravel()
