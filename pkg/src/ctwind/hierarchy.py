"""Cross-sectional, temporal and cross-temporal structural matrices.

Stacking convention used across the package: a full cross-temporal vector
lists temporal slots level-major (descending aggregation order ``k``, and
chronologically within a level); each slot holds all ``n`` series in
hierarchy order (upper series first, then bottom series).  Position of
``(slot r, series i)`` is therefore ``r * n + i`` and the summing matrix is
literally ``kron(S_te, S_cs)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml
from scipy import sparse

__all__ = [
    "HierarchyError",
    "CrossSectionalHierarchy",
    "TemporalSpec",
    "CrossTemporalStructure",
    "PRESETS",
    "build_temporal_matrices",
    "build_cross_sectional_matrices",
    "build_cross_temporal",
    "coherence_residual",
    "hierarchy_from_config",
    "temporal_from_config",
    "read_hierarchy_config",
]

# Orders in high-frequency steps for a 10-minute base grid.
PRESETS: dict[str, tuple[int, ...]] = {
    "statistical": (48, 24, 16, 12, 8, 6, 4, 3, 2, 1),
    "decision": (6, 3, 2, 1),
}


class HierarchyError(ValueError):
    """Raised when a hierarchy or temporal specification is invalid."""


@dataclass(frozen=True)
class CrossSectionalHierarchy:
    """Upper/bottom labels plus the ``n_a x n_b`` 0/1 aggregation matrix."""

    labels_upper: tuple[str, ...]
    labels_bottom: tuple[str, ...]
    agg_matrix: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.agg_matrix)
        if A.ndim == 1:
            A = A.reshape(1, -1)
        object.__setattr__(self, "labels_upper", tuple(self.labels_upper))
        object.__setattr__(self, "labels_bottom", tuple(self.labels_bottom))
        n_a, n_b = len(self.labels_upper), len(self.labels_bottom)
        if A.shape != (n_a, n_b):
            raise HierarchyError(
                f"aggregation matrix has shape {A.shape}, expected {(n_a, n_b)}"
            )
        if not np.all((A == 0) | (A == 1)):
            raise HierarchyError("aggregation matrix entries must be 0 or 1")
        A = A.astype(np.int64)
        A.setflags(write=False)
        object.__setattr__(self, "agg_matrix", A)
        labels = self.labels_upper + self.labels_bottom
        if len(set(labels)) != len(labels):
            raise HierarchyError("series labels must be unique")
        if n_b < 1 or n_a < 1:
            raise HierarchyError("need at least one upper and one bottom series")
        empty = [self.labels_upper[i] for i in np.flatnonzero(A.sum(axis=1) == 0)]
        if empty:
            raise HierarchyError(f"upper series with no members: {empty}")
        if not np.all(A[0] == 1):
            raise HierarchyError("first upper row must aggregate every bottom series")

    @classmethod
    def from_groups(
        cls,
        bottom: Sequence[str],
        groups: Mapping[str, Sequence[str]] | None = None,
        total: str = "Total",
    ) -> "CrossSectionalHierarchy":
        """Build a Total + groups + bottoms tree from member lists."""
        bottom = list(bottom)
        pos = {b: j for j, b in enumerate(bottom)}
        rows = [np.ones(len(bottom), dtype=np.int64)]
        upper = [total]
        for name, members in (groups or {}).items():
            row = np.zeros(len(bottom), dtype=np.int64)
            for member in members:
                if member not in pos:
                    raise HierarchyError(f"group {name!r} references unknown series {member!r}")
                row[pos[member]] = 1
            upper.append(name)
            rows.append(row)
        return cls(tuple(upper), tuple(bottom), np.vstack(rows))

    @property
    def n_a(self) -> int:
        return len(self.labels_upper)

    @property
    def n_b(self) -> int:
        return len(self.labels_bottom)

    @property
    def n(self) -> int:
        return self.n_a + self.n_b

    @property
    def labels(self) -> tuple[str, ...]:
        return self.labels_upper + self.labels_bottom


@dataclass(frozen=True)
class TemporalSpec:
    """Highest aggregation order ``m`` and the descending factor set ``K``."""

    m: int
    factors: tuple[int, ...]

    def __post_init__(self):
        factors = tuple(int(k) for k in self.factors)
        object.__setattr__(self, "factors", factors)
        m = int(self.m)
        if m < 1:
            raise HierarchyError(f"m must be positive, got {m}")
        bad = [k for k in factors if k < 1 or m % k]
        if bad:
            raise HierarchyError(f"factors {bad} do not divide m={m}")
        if any(a <= b for a, b in zip(factors, factors[1:])):
            raise HierarchyError(f"factors must be strictly descending, got {factors}")
        if not factors or factors[0] != m or factors[-1] != 1:
            raise HierarchyError(f"factor set must start at m={m} and end at 1, got {factors}")

    @classmethod
    def preset(cls, name: str) -> "TemporalSpec":
        try:
            factors = PRESETS[name]
        except KeyError:
            raise HierarchyError(
                f"unknown temporal preset {name!r}; choose from {sorted(PRESETS)}"
            ) from None
        return cls(factors[0], factors)

    @classmethod
    def all_divisors(cls, m: int) -> "TemporalSpec":
        return cls(m, tuple(k for k in range(m, 0, -1) if m % k == 0))

    def steps(self, k: int) -> int:
        """Number of level-``k`` slots per cycle (``m / k``)."""
        if k not in self.factors:
            raise HierarchyError(f"order {k} not in factor set {self.factors}")
        return self.m // k

    @property
    def m_star(self) -> int:
        return sum(self.m // k for k in self.factors)

    @property
    def k_star(self) -> int:
        return self.m_star - self.m

    @property
    def slot_orders(self) -> np.ndarray:
        """Aggregation order of every slot in the stack (length ``m*``)."""
        return np.concatenate([np.full(self.m // k, k) for k in self.factors])

    def level_slice(self, k: int) -> slice:
        """Slots of level ``k`` inside the temporal stack."""
        start = 0
        for kk in self.factors:
            if kk == k:
                return slice(start, start + self.m // k)
            start += self.m // kk
        raise HierarchyError(f"order {k} not in factor set {self.factors}")


def build_temporal_matrices(spec: TemporalSpec):
    """Return sparse ``(A_te, S_te, C_te)`` for a temporal spec.

    ``A_te`` rows run over the aggregated levels (``k > 1``) in descending
    order, each level listing its non-overlapping blocks chronologically.
    """
    m = spec.m
    rows, cols = [], []
    r = 0
    for k in spec.factors:
        if k == 1:
            continue
        for j in range(m // k):
            rows.extend([r] * k)
            cols.extend(range(j * k, (j + 1) * k))
            r += 1
    A = sparse.csr_matrix(
        (np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(spec.k_star, m)
    )
    S = sparse.vstack([A, sparse.identity(m, dtype=np.int64, format="csr")], format="csr")
    C = sparse.hstack(
        [sparse.identity(spec.k_star, dtype=np.int64, format="csr"), -A], format="csr"
    )
    return A, S, C


def build_cross_sectional_matrices(h: CrossSectionalHierarchy):
    """Return sparse ``(S_cs, C_cs)`` with ``S_cs = [A; I]`` and ``C_cs = [I, -A]``."""
    A = sparse.csr_matrix(h.agg_matrix)
    S = sparse.vstack([A, sparse.identity(h.n_b, dtype=np.int64, format="csr")], format="csr")
    C = sparse.hstack([sparse.identity(h.n_a, dtype=np.int64, format="csr"), -A], format="csr")
    return S, C


@dataclass(frozen=True)
class CrossTemporalStructure:
    hierarchy: CrossSectionalHierarchy
    temporal: TemporalSpec
    S_ct: sparse.csr_matrix = field(repr=False)
    C_ct: sparse.csr_matrix = field(repr=False)
    S_cs: sparse.csr_matrix = field(repr=False)
    C_cs: sparse.csr_matrix = field(repr=False)
    S_te: sparse.csr_matrix = field(repr=False)
    C_te: sparse.csr_matrix = field(repr=False)

    @property
    def n(self) -> int:
        return self.hierarchy.n

    @property
    def n_a(self) -> int:
        return self.hierarchy.n_a

    @property
    def n_b(self) -> int:
        return self.hierarchy.n_b

    @property
    def m(self) -> int:
        return self.temporal.m

    @property
    def m_star(self) -> int:
        return self.temporal.m_star

    @property
    def size(self) -> int:
        """Length of a full stacked vector, ``n * m*``."""
        return self.n * self.m_star

    def position(self, series: int, slot: int) -> int:
        return slot * self.n + series

    def series_positions(self, i: int) -> np.ndarray:
        """Indices of series ``i`` across the whole temporal stack."""
        return np.arange(self.m_star) * self.n + i

    def level_positions(self, k: int) -> np.ndarray:
        """Indices of every (slot, series) pair at level ``k``."""
        sl = self.temporal.level_slice(k)
        return np.arange(sl.start * self.n, sl.stop * self.n)

    def bottom_hf_positions(self) -> np.ndarray:
        """Indices of the high-frequency bottom block, ordered like ``b``."""
        slots = np.arange(self.temporal.k_star, self.m_star)
        return (slots[:, None] * self.n + np.arange(self.n_a, self.n)[None, :]).ravel()

    def as_matrix(self, y: np.ndarray) -> np.ndarray:
        """View a stacked vector (or batch) as ``(..., m*, n)``."""
        y = np.asarray(y)
        return y.reshape(y.shape[:-1] + (self.m_star, self.n))

    def check_length(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.size:
            raise HierarchyError(
                f"stacked vector has length {y.shape[-1]}, expected n*m* = {self.size}"
            )
        return y

    def labels(self) -> list[tuple[str, int, int]]:
        """``(series, k, slot-within-level)`` for every stacked position (1-based slot)."""
        out = []
        for k in self.temporal.factors:
            for h in range(self.m // k):
                for s in self.hierarchy.labels:
                    out.append((s, k, h + 1))
        return out


def build_cross_temporal(
    h: CrossSectionalHierarchy, t: TemporalSpec
) -> CrossTemporalStructure:
    """Assemble ``S_ct = S_te (x) S_cs`` and a full-row-rank ``C_ct``.

    ``C_ct`` stacks the cross-sectional constraints at every temporal slot on
    top of the temporal constraints applied to the bottom series only.
    """
    S_cs, C_cs = build_cross_sectional_matrices(h)
    _, S_te, C_te = build_temporal_matrices(t)
    S_ct = sparse.kron(S_te, S_cs, format="csr")
    pick_bottom = sparse.hstack(
        [
            sparse.csr_matrix((h.n_b, h.n_a), dtype=np.int64),
            sparse.identity(h.n_b, dtype=np.int64, format="csr"),
        ],
        format="csr",
    )
    C_ct = sparse.vstack(
        [
            sparse.kron(sparse.identity(t.m_star, dtype=np.int64), C_cs),
            sparse.kron(C_te, pick_bottom),
        ],
        format="csr",
    )
    for mat in (S_ct, C_ct):
        mat.sort_indices()
    return CrossTemporalStructure(h, t, S_ct, C_ct, S_cs, C_cs, S_te, C_te)


def coherence_residual(y, s: CrossTemporalStructure):
    """Max-abs constraint violation ``||C_ct y||_inf`` (per row for a batch)."""
    y = s.check_length(y)
    viol = np.abs(s.C_ct @ y.T)
    if viol.size == 0:
        return 0.0 if y.ndim == 1 else np.zeros(y.shape[0])
    return float(viol.max()) if y.ndim == 1 else viol.max(axis=0)


def hierarchy_from_config(cfg: Mapping) -> CrossSectionalHierarchy:
    try:
        bottom = cfg["bottom"]
    except KeyError:
        raise HierarchyError("hierarchy config needs a 'bottom' list") from None
    return CrossSectionalHierarchy.from_groups(
        bottom, cfg.get("groups") or {}, cfg.get("total", "Total")
    )


def temporal_from_config(cfg: Mapping | str | None) -> TemporalSpec:
    if cfg is None:
        return TemporalSpec.preset("statistical")
    if isinstance(cfg, str):
        return TemporalSpec.preset(cfg)
    if "factors" in cfg:
        factors = tuple(cfg["factors"])
        return TemporalSpec(int(cfg.get("m", factors[0])), factors)
    if "preset" in cfg:
        spec = TemporalSpec.preset(cfg["preset"])
        if "m" in cfg and int(cfg["m"]) != spec.m:
            raise HierarchyError(f"preset {cfg['preset']!r} has m={spec.m}, config says {cfg['m']}")
        return spec
    if "m" in cfg:
        return TemporalSpec.all_divisors(int(cfg["m"]))
    raise HierarchyError("temporal config needs 'preset', 'factors' or 'm'")


def read_hierarchy_config(path) -> tuple[CrossSectionalHierarchy, TemporalSpec]:
    """Read the ``hierarchy`` and ``temporal`` sections of a YAML config file."""
    cfg = yaml.safe_load(Path(path).read_text()) or {}
    if "hierarchy" not in cfg:
        raise HierarchyError(f"{path}: missing 'hierarchy' section")
    return hierarchy_from_config(cfg["hierarchy"]), temporal_from_config(cfg.get("temporal"))
