"""Globally continuous reference metric on a multicube structure.

Each edge orbit of length K gets the dihedral angle 2*pi/K.  Every corner
of every region then carries a constant flat inverse metric whose
off-diagonal entries encode those angles.  A partition of unity blends the
eight corner metrics of a region into a single smooth field whose intrinsic
components match across interfaces, giving a C0 metric on the whole space.
"""

from dataclasses import dataclass

import numpy as np

from .multicube_core import (
    MulticubeStructure,
    _canonical_pair,
    corner_triples,
    face_axis,
    face_sign,
)
from .spectral_solver import build_mesh


class DegenerateCornerError(Exception):
    """A corner's angle triple does not embed in Euclidean space."""


@dataclass(frozen=True)
class PartitionParams:
    """Exponents of the one-dimensional blend profile.

    Larger k flattens the profile near the center, larger ell near the
    ends of its support.  ell >= 2 makes the derivative vanish at 0.
    """

    k: int = 2
    ell: int = 3

    def __post_init__(self):
        if self.k < 1 or self.ell < 1:
            raise ValueError("blend exponents must be positive integers")


DEFAULT_PARTITION = PartitionParams()

# Corner bookkeeping.  Order matches corner_triples(): x sign slowest.
CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
    dtype=float,
)
_CORNERS = corner_triples()

# Symmetric tensor components stored in fields, row-major upper triangle.
COMPONENT_ORDER = ("xx", "xy", "xz", "yy", "yz", "zz")
COMPONENT_INDICES = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))

# Stage tags a field can carry.  The *_delta stages are corrections, not
# metrics, and are exempt from the positive-definiteness invariant.
METRIC_STAGES = ("c0", "conformal", "gauge", "flattened")
DELTA_STAGES = ("gauge_delta", "flatten_delta")


# ---------------------------------------------------------------------------
# dihedral angles


@dataclass(frozen=True)
class DihedralAssignment:
    """Angle 2*pi/K for every (region, edge) slot of a structure."""

    by_slot: dict

    def angle(self, rid, label_a, label_b) -> float:
        return self.by_slot[(rid, _canonical_pair(label_a, label_b))]


def assign_dihedral_angles(structure: MulticubeStructure) -> DihedralAssignment:
    """Assign the uniform angle 2*pi/K to each edge orbit of length K."""
    by_slot = {}
    for slot, orbit in structure.edge_orbit_index().items():
        by_slot[slot] = 2.0 * np.pi / orbit.K
    return DihedralAssignment(by_slot=by_slot)


# ---------------------------------------------------------------------------
# corner flat metrics


def gram_determinant(psi_xy: float, psi_xz: float, psi_yz: float) -> float:
    """Determinant of the corner inverse metric, in closed form.

    Independent of the corner's sign triple: the sign constants cancel
    in both the product and the squares.
    """
    cxy, cxz, cyz = np.cos(psi_xy), np.cos(psi_xz), np.cos(psi_yz)
    return 1.0 - 2.0 * cxy * cxz * cyz - cxy**2 - cxz**2 - cyz**2


def corner_flat_metric(psi_xy, psi_xz, psi_yz, corner) -> np.ndarray:
    """Flat inverse metric at one region corner.

    corner is a label triple such as ('+x', '-y', '+z').  The diagonal is
    unity; each off-diagonal couples the two coordinates sharing an edge
    with -c_a * c_b * cos(angle), where the c's are +1 on the '+' side
    and -1 on the '-' side.  Raises DegenerateCornerError when the angle
    triple has no Euclidean realization.
    """
    sx, sy, sz = (face_sign(l) for l in corner)
    det = gram_determinant(psi_xy, psi_xz, psi_yz)
    e = np.eye(3)
    e[0, 1] = e[1, 0] = -sx * sy * np.cos(psi_xy)
    e[0, 2] = e[2, 0] = -sx * sz * np.cos(psi_xz)
    e[1, 2] = e[2, 1] = -sy * sz * np.cos(psi_yz)
    direct = float(np.linalg.det(e))
    if abs(direct - det) > 1e-13:
        raise AssertionError(
            f"determinant identity violated: {det} vs {direct}")
    if det <= 0.0:
        raise DegenerateCornerError(
            f"corner angles ({psi_xy}, {psi_xz}, {psi_yz}) give "
            f"non-positive determinant {det}")
    return e


@dataclass(frozen=True)
class CornerMetricTable:
    """Per-region stacks of the eight corner metrics, in corner order."""

    inverse: dict  # rid -> (8, 3, 3) upper-index corner metrics
    metric: dict   # rid -> (8, 3, 3) their inverses

    def corner_inverse(self, rid, corner) -> np.ndarray:
        return self.inverse[rid][_CORNERS.index(corner)]


def build_corner_metrics(
    structure: MulticubeStructure,
    angles: DihedralAssignment | None = None,
) -> CornerMetricTable:
    """Corner flat metrics for every region of a structure."""
    if angles is None:
        angles = assign_dihedral_angles(structure)
    inverse = {}
    metric = {}
    for rid in structure.region_ids:
        stack = np.empty((8, 3, 3))
        for c, corner in enumerate(_CORNERS):
            lx, ly, lz = corner
            stack[c] = corner_flat_metric(
                angles.angle(rid, lx, ly),
                angles.angle(rid, lx, lz),
                angles.angle(rid, ly, lz),
                corner,
            )
        inverse[rid] = stack
        metric[rid] = invert_symmetric3(stack)
    return CornerMetricTable(inverse=inverse, metric=metric)


# ---------------------------------------------------------------------------
# partition of unity


def blend_weight(s, params: PartitionParams = DEFAULT_PARTITION):
    """One-dimensional blend profile: 1 at s=0, 0 for |s| >= 1, even.

    Outside the unit interval the defining polynomial is meaningless, so
    the profile is clamped to zero there.
    """
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    k2 = 2 * params.k
    inner = 0.5 * (1.0 + (1.0 - a**k2) ** params.ell
                   - (1.0 - (1.0 - a) ** k2) ** params.ell)
    out = np.where(a < 1.0, inner, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def partition_weights(
    local: np.ndarray,
    L: float,
    params: PartitionParams = DEFAULT_PARTITION,
) -> np.ndarray:
    """Normalized corner weights at points inside one region.

    local: coordinates relative to the region center, shape (..., 3) with
    every entry in [-L/2, L/2].  Returns shape (..., 8) in corner order;
    the weights are nonnegative and sum to one.
    """
    local = np.asarray(local, dtype=float)
    if np.any(np.abs(local) > 0.5 * L + 1e-12 * L):
        raise ValueError("point lies outside the region cube")
    # displacement from each corner, in units of the cube size
    s = (local[..., None, :] - 0.5 * L * CORNER_SIGNS) / L
    w = np.prod(blend_weight(s, params), axis=-1)
    total = np.sum(w, axis=-1, keepdims=True)
    return w / total


# ---------------------------------------------------------------------------
# pointwise metric


def invert_symmetric3(m: np.ndarray) -> np.ndarray:
    """Adjugate inverse of symmetric 3x3 matrices, shape (..., 3, 3)."""
    m = np.asarray(m, dtype=float)
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]
    ca = d * f - e * e
    cb = c * e - b * f
    cc = b * e - c * d
    det = a * ca + b * cb + c * cc
    inv = np.empty_like(m)
    inv[..., 0, 0] = ca
    inv[..., 0, 1] = inv[..., 1, 0] = cb
    inv[..., 0, 2] = inv[..., 2, 0] = cc
    inv[..., 1, 1] = a * f - c * c
    inv[..., 1, 2] = inv[..., 2, 1] = b * c - a * e
    inv[..., 2, 2] = a * d - b * b
    return inv / det[..., None, None]


def c0_metric_at(
    structure: MulticubeStructure,
    table: CornerMetricTable,
    rid,
    x: np.ndarray,
    params: PartitionParams = DEFAULT_PARTITION,
):
    """Blended metric at physical points x inside region rid.

    Returns (lower, upper): the metric and its inverse, each of shape
    (..., 3, 3).  The inverse is the convex combination of the corner
    metrics, hence positive definite; the metric is its exact pointwise
    3x3 inverse.
    """
    x = np.asarray(x, dtype=float)
    local = x - structure.center(rid)
    u = partition_weights(local, structure.L, params)
    upper = np.einsum("...c,cab->...ab", u, table.inverse[rid])
    lower = invert_symmetric3(upper)
    return lower, upper


# ---------------------------------------------------------------------------
# sampled fields


@dataclass
class MetricField:
    """Symmetric tensor samples on the collocation grid of every region.

    data maps region id to an array of shape (6, N, N, N): component
    index first (order xx, xy, xz, yy, yz, zz), then the x, y, z node
    indices.  stage records which construction step produced the field.
    """

    stage: str
    N: int
    L: float
    data: dict

    def __post_init__(self):
        if self.stage not in METRIC_STAGES + DELTA_STAGES:
            raise ValueError(f"unknown stage tag {self.stage!r}")

    @property
    def is_metric(self) -> bool:
        return self.stage in METRIC_STAGES

    def matrices(self, rid) -> np.ndarray:
        """Samples of one region as (N, N, N, 3, 3) symmetric matrices."""
        comp = self.data[rid]
        m = np.empty(comp.shape[1:] + (3, 3))
        for idx, (i, j) in enumerate(COMPONENT_INDICES):
            m[..., i, j] = comp[idx]
            m[..., j, i] = comp[idx]
        return m

    @classmethod
    def from_matrices(cls, stage, N, L, matrices: dict) -> "MetricField":
        data = {}
        for rid, m in matrices.items():
            comp = np.empty((6,) + m.shape[:-2])
            for idx, (i, j) in enumerate(COMPONENT_INDICES):
                comp[idx] = m[..., i, j]
            data[rid] = comp
        return cls(stage=stage, N=N, L=L, data=data)

    def copy(self) -> "MetricField":
        return MetricField(
            stage=self.stage, N=self.N, L=self.L,
            data={rid: arr.copy() for rid, arr in self.data.items()},
        )

    def check_finite(self):
        for rid, arr in self.data.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(
                    f"non-finite samples in region {rid} ({self.stage})")

    def check_positive_definite(self, tol: float = 0.0):
        """Sylvester check at every node; only meaningful for metric stages."""
        for rid in self.data:
            m = self.matrices(rid)
            d1 = m[..., 0, 0]
            d2 = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] ** 2
            d3 = np.linalg.det(m)
            if not (np.all(d1 > tol) and np.all(d2 > tol)
                    and np.all(d3 > tol)):
                raise FloatingPointError(
                    f"field {self.stage!r} not positive definite in "
                    f"region {rid}")


def grid_points(N: int, L: float) -> np.ndarray:
    """Collocation nodes of one region as (N, N, N, 3) local coordinates."""
    mesh = build_mesh(N, L)
    gx, gy, gz = np.meshgrid(mesh.nodes, mesh.nodes, mesh.nodes,
                             indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def sample_c0_field(
    structure: MulticubeStructure,
    N: int,
    params: PartitionParams = DEFAULT_PARTITION,
    table: CornerMetricTable | None = None,
) -> MetricField:
    """Evaluate the blended metric on every region's collocation grid."""
    if table is None:
        table = build_corner_metrics(structure)
    local = grid_points(N, structure.L)
    # the weights depend only on the position within the cube, so they
    # are shared by all regions
    u = partition_weights(local, structure.L, params)
    matrices = {}
    for rid in structure.region_ids:
        upper = np.einsum("...c,cab->...ab", u, table.inverse[rid])
        matrices[rid] = invert_symmetric3(upper)
    field = MetricField.from_matrices("c0", N, structure.L, matrices)
    field.check_finite()
    return field
