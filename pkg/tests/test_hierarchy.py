import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from ctwind.hierarchy import (
    CrossSectionalHierarchy,
    HierarchyError,
    TemporalSpec,
    build_cross_sectional_matrices,
    build_cross_temporal,
    build_temporal_matrices,
    coherence_residual,
    read_hierarchy_config,
    temporal_from_config,
)

from helpers import random_structure, small_structure


def test_temporal_matrix_m6_worked_example():
    A, S, C = build_temporal_matrices(TemporalSpec(6, (6, 3, 2, 1)))
    expected = np.array(
        [
            [1, 1, 1, 1, 1, 1],
            [1, 1, 1, 0, 0, 0],
            [0, 0, 0, 1, 1, 1],
            [1, 1, 0, 0, 0, 0],
            [0, 0, 1, 1, 0, 0],
            [0, 0, 0, 0, 1, 1],
        ]
    )
    np.testing.assert_array_equal(A.toarray(), expected)
    np.testing.assert_array_equal(S.toarray(), np.vstack([expected, np.eye(6, dtype=int)]))
    np.testing.assert_array_equal(C.toarray(), np.hstack([np.eye(6, dtype=int), -expected]))


def test_temporal_matrix_m4():
    A, _, _ = build_temporal_matrices(TemporalSpec(4, (4, 2, 1)))
    np.testing.assert_array_equal(A.toarray(), [[1, 1, 1, 1], [1, 1, 0, 0], [0, 0, 1, 1]])


def test_temporal_matrix_single_level():
    A, S, C = build_temporal_matrices(TemporalSpec(1, (1,)))
    assert A.shape == (0, 1)
    assert C.shape == (0, 1)
    np.testing.assert_array_equal(S.toarray(), [[1]])


@pytest.mark.parametrize(
    "m, factors",
    [(6, (6, 4, 1)), (6, (6, 3, 2)), (6, (3, 1)), (6, (1, 2, 3, 6)), (0, (1,)), (6, (6, 3, 3, 1))],
)
def test_invalid_factor_sets_rejected(m, factors):
    with pytest.raises(HierarchyError):
        TemporalSpec(m, factors)


def test_presets():
    sb, db = TemporalSpec.preset("statistical"), TemporalSpec.preset("decision")
    assert (sb.m, sb.m_star, sb.k_star) == (48, 124, 76)
    assert (db.m, db.m_star, db.k_star) == (6, 12, 6)
    with pytest.raises(HierarchyError, match="unknown temporal preset"):
        TemporalSpec.preset("hourly")


def test_cross_sectional_two_series():
    h = CrossSectionalHierarchy(("X",), ("W", "Z"), np.array([[1, 1]]))
    S, C = build_cross_sectional_matrices(h)
    np.testing.assert_array_equal(S.toarray(), [[1, 1], [1, 0], [0, 1]])
    np.testing.assert_array_equal(C.toarray(), [[1, -1, -1]])


def test_cross_sectional_single_bottom():
    h = CrossSectionalHierarchy(("T",), ("B",), np.array([[1]]))
    S, _ = build_cross_sectional_matrices(h)
    np.testing.assert_array_equal(S.toarray(), [[1], [1]])


@pytest.mark.parametrize(
    "upper, bottom, A, match",
    [
        (("T", "G"), ("a", "b"), [[1, 1], [0, 0]], "no members"),
        (("T",), ("a", "b"), [[1, 2]], "0 or 1"),
        (("T",), ("a", "b"), [[1, 0]], "first upper row"),
        (("T",), ("T", "b"), [[1, 1]], "unique"),
        (("T",), ("a", "b"), [[1, 1, 1]], "shape"),
    ],
)
def test_invalid_hierarchies(upper, bottom, A, match):
    with pytest.raises(HierarchyError, match=match):
        CrossSectionalHierarchy(upper, bottom, np.array(A))


def test_small_instance_dimensions_and_kronecker():
    s = small_structure()
    assert s.S_ct.shape == (36, 12)
    assert s.C_ct.shape == (24, 36)
    assert abs(s.C_ct @ s.S_ct).max() == 0
    assert np.linalg.matrix_rank(s.C_ct.toarray()) == 24
    np.testing.assert_array_equal(s.S_ct.toarray(), np.kron(s.S_te.toarray(), s.S_cs.toarray()))


def test_single_series_single_level():
    h = CrossSectionalHierarchy(("T",), ("B",), np.array([[1]]))
    s = build_cross_temporal(h, TemporalSpec(1, (1,)))
    np.testing.assert_array_equal(s.S_ct.toarray(), [[1], [1]])


def test_coherence_residual_detects_upper_perturbation():
    s = small_structure()
    rng = np.random.default_rng(3)
    y = s.S_ct @ rng.normal(size=12)
    assert coherence_residual(y, s) < 1e-12
    y[0] += 0.7  # Total at the 6-step slot: touches only its cross-sectional constraint
    assert coherence_residual(y, s) == pytest.approx(0.7)
    with pytest.raises(HierarchyError):
        coherence_residual(np.zeros(35), s)


def test_labels_and_positions():
    s = small_structure()
    labels = s.labels()
    assert labels[:4] == [("X", 6, 1), ("W", 6, 1), ("Z", 6, 1), ("X", 3, 1)]
    assert labels[s.position(2, 11)] == ("Z", 1, 6)
    np.testing.assert_array_equal(s.bottom_hf_positions()[:4], [19, 20, 22, 23])
    np.testing.assert_array_equal(s.level_positions(2), np.arange(9, 18))


def test_farm_shaped_hierarchy_column_sums():
    kel = [f"K{j}" for j in range(1, 7)]
    pen = [f"P{j:02d}" for j in range(1, 17)]
    h = CrossSectionalHierarchy.from_groups(kel + pen, {"Kelmarsh": kel, "Penmanshiel": pen})
    assert (h.n_a, h.n_b, h.n) == (3, 22, 25)
    # every turbine has two ancestors: Total and its farm
    np.testing.assert_array_equal(h.agg_matrix.sum(axis=0), np.full(22, 2))


def test_read_config(tmp_path):
    path = tmp_path / "h.yaml"
    path.write_text(
        "hierarchy:\n  bottom: [a, b, c]\n  groups:\n    G: [a, b]\n"
        "temporal:\n  factors: [4, 2, 1]\n"
    )
    h, t = read_hierarchy_config(path)
    assert h.labels == ("Total", "G", "a", "b", "c")
    assert t.factors == (4, 2, 1)
    assert temporal_from_config({"m": 6}).factors == (6, 3, 2, 1)
    assert temporal_from_config("decision").m == 6
    with pytest.raises(HierarchyError):
        temporal_from_config({"preset": "decision", "m": 12})


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_constraint_nullspace_property(seed):
    rng = np.random.default_rng(seed)
    s = random_structure(rng)
    for C, S in ((s.C_cs, s.S_cs), (s.C_te, s.S_te), (s.C_ct, s.S_ct)):
        assert (C @ S).count_nonzero() == 0
    A, _, _ = build_temporal_matrices(s.temporal)
    assert A.shape[0] == s.temporal.k_star
    ks = np.concatenate([np.full(s.m // k, k) for k in s.temporal.factors if k > 1] + [[]])
    np.testing.assert_array_equal(np.asarray(A.sum(axis=1)).ravel(), ks)
    # full row rank: n_a * m* + n_b * k*
    expected_rank = s.n_a * s.m_star + s.n_b * s.temporal.k_star
    assert s.C_ct.shape[0] == expected_rank
    if expected_rank:
        assert np.linalg.matrix_rank(s.C_ct.toarray()) == expected_rank


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bottom_permutation_consistency(seed):
    rng = np.random.default_rng(seed)
    s = random_structure(rng)
    perm = rng.permutation(s.n_b)
    h = s.hierarchy
    hp = CrossSectionalHierarchy(
        h.labels_upper, tuple(np.array(h.labels_bottom)[perm]), h.agg_matrix[:, perm]
    )
    sp = build_cross_temporal(hp, s.temporal)
    # permuting bottom series inside every slot permutes the columns of S_ct
    col_perm = (np.arange(s.m)[:, None] * s.n_b + perm[None, :]).ravel()
    row_perm = (
        np.arange(s.m_star)[:, None] * s.n
        + np.concatenate([np.arange(s.n_a), s.n_a + perm])[None, :]
    ).ravel()
    np.testing.assert_array_equal(sp.S_ct.toarray(), s.S_ct.toarray()[row_perm][:, col_perm])
    y = rng.normal(size=s.size)
    assert coherence_residual(y[row_perm], sp) == pytest.approx(
        coherence_residual(y, s), abs=1e-12
    )


def test_structures_are_sparse():
    s = small_structure()
    for mat in (s.S_ct, s.C_ct, s.S_te, s.C_te, s.S_cs, s.C_cs):
        assert sparse.issparse(mat)
        assert np.issubdtype(mat.dtype, np.integer)
