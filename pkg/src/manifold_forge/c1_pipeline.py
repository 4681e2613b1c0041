"""Three-stage refinement of the continuous reference metric to C1.

The blended metric from c0_metric is continuous across interfaces but its
derivatives are not.  Three successive corrections, each built from
biharmonic boundary-value solves, produce a metric whose intrinsic
components and extrinsic curvatures match on every interface (the Israel
junction conditions), which makes the geometry C1:

1. conformal_step multiplies the metric by exp(phi) with phi chosen so
   every cube edge becomes a geodesic.  phi is solved face by face (2D
   biharmonic, Dirichlet zero on the edges, Neumann data built from the
   intrinsic face metric) and blended into the interior.  The Neumann
   data uses intrinsic components only, so both sides of an interface
   solve the same problem and phi is continuous.
2. gauge_step adds a perturbation to the non-intrinsic (gauge) metric
   components so the face extrinsic curvatures vanish along every cube
   edge.  The intrinsic components are untouched, so interface
   continuity is preserved exactly.
3. face_flatten_step solves a 3D biharmonic problem per metric component
   so the extrinsic curvature vanishes on every face while the face
   values themselves stay fixed (Dirichlet zero).  The Neumann data is
   the face curvature; its gauge part is either smoothed by auxiliary 2D
   solves (default) or set to zero.

Stage fields are c0_metric.MetricField objects tagged "conformal",
"gauge" and "flattened"; the perturbations of steps 2 and 3 are kept as
"gauge_delta" / "flatten_delta" fields for inspection.
"""

import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .c0_metric import (
    COMPONENT_INDICES,
    DEFAULT_PARTITION,
    MetricField,
    PartitionParams,
    blend_weight,
    build_corner_metrics,
    invert_symmetric3,
    sample_c0_field,
)
from .multicube_core import (
    FACE_LABELS,
    FaceMap,
    MulticubeStructure,
    edge_pairs,
    face_axis,
    face_sign,
)
from .spectral_solver import (assemble, build_mesh, check_resolution,
                              face_label, factor, solve)

STAGE_SEQUENCE = ("c0", "conformal", "gauge", "flattened")

# component slot lookup for both index orders
_COMP_SLOT = {}
for _slot, (_i, _j) in enumerate(COMPONENT_INDICES):
    _COMP_SLOT[(_i, _j)] = _slot
    _COMP_SLOT[(_j, _i)] = _slot


class MetricDegeneracyError(Exception):
    """Metric not positive definite where the construction needs it."""


class StageError(RuntimeError):
    """A pipeline stage failed; .stage names it for error reporting."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


def _wrap_stage(stage: str, exc: BaseException) -> StageError:
    err = StageError(stage, f"{type(exc).__name__}: {exc}")
    err.__cause__ = exc
    return err


# ---------------------------------------------------------------------------
# grid helpers


def _apply_D(U: np.ndarray, D: np.ndarray, axis: int) -> np.ndarray:
    """Spectral derivative of a nodal array along one grid axis."""
    return np.moveaxis(np.tensordot(D, U, axes=([1], [axis])), 0, axis)


def _side_index(label: str, N: int) -> int:
    return 0 if face_sign(label) < 0 else N - 1


def inplane_axes(label: str) -> tuple:
    """The two grid axes tangent to a face, in x < y < z order."""
    a0 = face_axis(label)
    return tuple(a for a in range(3) if a != a0)


def _face_restrict(arr: np.ndarray, label: str, N: int,
                   grid_axis0: int = 0) -> np.ndarray:
    """Slice the nodal samples of one face out of a 3D-grid array."""
    return np.take(arr, _side_index(label, N),
                   axis=grid_axis0 + face_axis(label))


def _sym_matrices(comp: np.ndarray) -> np.ndarray:
    """(6, ...) component stack -> (..., 3, 3) symmetric matrices."""
    m = np.empty(comp.shape[1:] + (3, 3))
    for slot, (i, j) in enumerate(COMPONENT_INDICES):
        m[..., i, j] = comp[slot]
        m[..., j, i] = comp[slot]
    return m


def _component_derivatives(comp: np.ndarray, D: np.ndarray) -> np.ndarray:
    """d[e] = spectral derivative of a (6, N, N, N) stack along axis e."""
    return np.stack([_apply_D(comp, D, 1 + ax) for ax in range(3)])


def _zero_face_boundary(U: np.ndarray) -> np.ndarray:
    """Hard-zero the edge nodes of a face-grid array (in place)."""
    U[0, :] = 0.0
    U[-1, :] = 0.0
    U[:, 0] = 0.0
    U[:, -1] = 0.0
    return U


def face_blend_profiles(N: int, L: float,
                        params: PartitionParams = DEFAULT_PARTITION) -> dict:
    """Per-face 1D blending profiles along the normal axis.

    The profile is h(s) of the normalized distance from the face: exactly
    1 on the face itself and exactly 0 on the opposite face, so a face
    field extended with it does not leak onto the other faces.
    """
    xi = build_mesh(N, L).nodes / L  # in [-1/2, 1/2]
    prof = {}
    for name in "xyz":
        prof["+" + name] = blend_weight(np.abs(xi - 0.5), params)
        prof["-" + name] = blend_weight(np.abs(xi + 0.5), params)
    return prof


def _extend_face_field(values: np.ndarray, label: str,
                       profiles: dict) -> np.ndarray:
    """Blend a (N, N) face field into the region volume: h(s) * values."""
    a0 = face_axis(label)
    h = profiles[label]
    shape = [1, 1, 1]
    shape[a0] = h.size
    return np.expand_dims(values, a0) * h.reshape(shape)


def face_grid_map(m: FaceMap, N: int) -> tuple:
    """Index arrays carrying source-face samples onto the target grid.

    Returns (I, J) with target_values[p, q] = source_values[I[p, q], J[p, q]]
    for nodal arrays indexed by the in-plane axes in x < y < z order on
    both sides.  Signed permutations map the symmetric collocation grid
    onto itself, so the identification is exact.
    """
    src_axes = inplane_axes(m.source[1])
    tgt_axes = inplane_axes(m.target[1])
    M = m.rotation.matrix
    j0, j1 = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    tgt_idx = (j0, j1)
    src = [None, None]
    for p_slot, p in enumerate(tgt_axes):
        q = int(np.flatnonzero(M[p])[0])
        if q not in src_axes:
            raise ValueError("face map does not pair in-plane axes")
        j = tgt_idx[p_slot]
        src[src_axes.index(q)] = (N - 1 - j) if M[p, q] < 0 else j
    return src[0], src[1]


def map_face_values(values: np.ndarray, m: FaceMap, N: int) -> np.ndarray:
    """Resample a source-face nodal array onto the partner face's grid."""
    i, j = face_grid_map(m, N)
    return values[i, j]


# ---------------------------------------------------------------------------
# extrinsic curvature


@dataclass
class ExtrinsicCurvatureField:
    """Extrinsic curvature samples of one cube face.

    K is the projected symmetric tensor (N, N, 3, 3); normalization is
    the signed scalar relating the face normal to the coordinate
    gradient (negative on the low side of an axis); normal holds the
    unit co-vector components.  normal_residual records max |K_ab n^b|
    at construction time.
    """

    region: str
    face: str
    K: np.ndarray
    normalization: np.ndarray
    normal: np.ndarray
    normal_residual: float = 0.0


def _face_curvature_from_parts(g6, dg, rid, label, N):
    """Assemble the curvature of one face from precomputed derivatives."""
    a0 = face_axis(label)
    eps = float(face_sign(label))
    side = _side_index(label, N)

    gmat = _sym_matrices(np.take(g6, side, axis=1 + a0))  # (N, N, 3, 3)
    d1 = gmat[..., 0, 0]
    d2 = d1 * gmat[..., 1, 1] - gmat[..., 0, 1] ** 2
    d3 = np.linalg.det(gmat)
    if not (np.all(d1 > 0) and np.all(d2 > 0) and np.all(d3 > 0)):
        raise MetricDegeneracyError(
            f"metric not positive definite on face {rid}:{label}")
    ginv = invert_symmetric3(gmat)

    norm = eps / np.sqrt(ginv[..., a0, a0])  # signed normalization
    n_lower = np.zeros((N, N, 3))
    n_lower[..., a0] = norm
    n_upper = norm[..., None] * ginv[..., :, a0]
    proj = np.eye(3) - n_lower[..., :, None] * n_upper[..., None, :]

    dgf = np.take(dg, side, axis=2 + a0)  # (3, 6, N, N)
    dG = np.empty((N, N, 3, 3, 3))        # dG[..., e, a, b] = d_e g_ab
    for slot, (i, j) in enumerate(COMPONENT_INDICES):
        block = np.moveaxis(dgf[:, slot], 0, -1)
        dG[..., :, i, j] = block
        dG[..., :, j, i] = block
    T = (np.einsum("...e,...ecd->...cd", n_upper, dG)
         - np.einsum("...e,...ced->...cd", n_upper, dG)
         - np.einsum("...e,...dec->...cd", n_upper, dG))
    K = 0.5 * np.einsum("...ac,...cd,...bd->...ab", proj, T, proj)
    K = 0.5 * (K + np.swapaxes(K, -1, -2))

    residual = float(np.abs(np.einsum("...ab,...b->...a",
                                      K, n_upper)).max())
    scale = max(1.0, float(np.abs(K).max()))
    if residual > 1e-12 * scale:
        raise AssertionError(
            f"curvature fails to annihilate the normal on {rid}:{label} "
            f"(residual {residual:.3e})")
    return ExtrinsicCurvatureField(rid, label, K, norm, n_lower, residual)


def extrinsic_curvature(field: MetricField, face: tuple) -> ExtrinsicCurvatureField:
    """Extrinsic curvature of one cube face of a sampled metric stage.

    face is a (region id, face label) pair.  Derivatives are taken
    spectrally on the region grid and restricted to the face.
    """
    if not field.is_metric:
        raise ValueError("extrinsic curvature needs a metric stage field")
    rid, label = face
    D = build_mesh(field.N, field.L).D
    g6 = field.data[rid]
    dg = _component_derivatives(g6, D)
    return _face_curvature_from_parts(g6, dg, rid, label, field.N)


def _all_face_curvatures(field: MetricField, rid: str) -> dict:
    """Curvature of all six faces of one region, sharing the derivatives."""
    D = build_mesh(field.N, field.L).D
    g6 = field.data[rid]
    dg = _component_derivatives(g6, D)
    return {label: _face_curvature_from_parts(g6, dg, rid, label, field.N)
            for label in FACE_LABELS}


# ---------------------------------------------------------------------------
# 2D face solves


def _face_edges(label: str) -> list:
    """The four faces meeting a given face, with in-plane bookkeeping.

    Yields (edge_label, pos2d, side_idx_flag, tangent_axis): edge_label is
    the meeting face, pos2d the in-plane slot (0 or 1) of its axis within
    this face's grid, side_idx_flag 0/1 for the low/high end, and
    tangent_axis the remaining in-plane axis.
    """
    u, v = inplane_axes(label)
    edges = []
    for pos, (m_axis, t_axis) in enumerate(((u, v), (v, u))):
        for side, sgn in ((0, "-"), (1, "+")):
            edges.append((sgn + "xyz"[m_axis], pos, side, t_axis))
    return edges


def _solve_face_2d(op2d, edge_data: dict, N: int):
    """Biharmonic face solve with Dirichlet zero and edge Neumann data.

    edge_data maps (pos2d, side) to the coordinate derivative of the
    unknown along the edge; the sign conversion to the solver's outward
    normal convention happens here.  The returned field has its edge
    nodes hard-zeroed.
    """
    neumann = {}
    for (pos, side), values in edge_data.items():
        sign = -1.0 if side == 0 else 1.0
        neumann[face_label(pos, side)] = sign * values
    res = solve(op2d, None, neumann)
    return _zero_face_boundary(res.U), res


# ---------------------------------------------------------------------------
# step 1: conformal rescaling


@dataclass
class ConformalStage:
    """Output of conformal_step: the rescaled metric plus diagnostics."""

    field: MetricField
    conformal_factor: dict          # region id -> (N, N, N)
    face_factors: dict              # (region id, face label) -> (N, N)
    interface_mismatch: float
    dirichlet_residual: float
    neumann_residual: float


def _conformal_edge_data(face6: np.ndarray, D2: np.ndarray, label: str,
                         N: int, rid: str) -> dict:
    """Neumann data for the conformal factor on one face.

    At the edge where another face meets this one (normal axis m within
    the face, tangent t) the prescribed coordinate derivative is

        d_m phi = (2 d_t g_mt - d_m g_tt) / g_tt - g_mt d_t g_tt / g_tt^2

    built entirely from intrinsic face components, so both regions
    sharing an interface compute identical data.
    """
    u, v = inplane_axes(label)
    pos_of = {u: 0, v: 1}
    data = {}
    for edge_label, pos, side, t_axis in _face_edges(label):
        m_axis = face_axis(edge_label)
        g_mt = face6[_COMP_SLOT[(m_axis, t_axis)]]
        g_tt = face6[_COMP_SLOT[(t_axis, t_axis)]]
        side_idx = 0 if side == 0 else N - 1
        edge_gtt = np.take(g_tt, side_idx, axis=pos)
        if np.any(edge_gtt <= 0):
            raise MetricDegeneracyError(
                f"tangent metric component not positive along edge "
                f"{rid}:{label}/{edge_label}")
        d_t_g_mt = _apply_D(g_mt, D2, pos_of[t_axis])
        d_m_g_tt = _apply_D(g_tt, D2, pos_of[m_axis])
        d_t_g_tt = _apply_D(g_tt, D2, pos_of[t_axis])
        full = (2.0 * d_t_g_mt - d_m_g_tt) / g_tt \
            - g_mt * d_t_g_tt / g_tt ** 2
        data[(pos, side)] = np.take(full, side_idx, axis=pos)
    return data


def conformal_step(
    structure: MulticubeStructure,
    field: MetricField,
    params: PartitionParams = DEFAULT_PARTITION,
    *,
    operator=None,
    cache_directory=None,
    use_cache: bool = True,
    check_interfaces: bool = True,
) -> ConformalStage:
    """Rescale the metric so every cube edge becomes a geodesic."""
    if not field.is_metric:
        raise ValueError("conformal step needs a metric stage field")
    N, L = field.N, field.L
    if operator is None:
        operator = factor(assemble(2, N, L), cache_directory, use_cache)
    D2 = build_mesh(N, L).D
    profiles = face_blend_profiles(N, L, params)

    face_phi = {}
    dres = nres = 0.0
    for rid in structure.region_ids:
        g6 = field.data[rid]
        for label in FACE_LABELS:
            face6 = _face_restrict(g6, label, N, grid_axis0=1)
            edge_data = _conformal_edge_data(face6, D2, label, N, rid)
            phi, res = _solve_face_2d(operator, edge_data, N)
            face_phi[(rid, label)] = phi
            dres = max(dres, res.dirichlet_residual)
            nres = max(nres, res.neumann_residual)

    # both sides of an interface solve the same intrinsic-data problem,
    # so their solutions must agree through the face map
    mismatch = 0.0
    for key in sorted(structure.faces):
        m = structure.faces[key]
        if m.target < m.source:
            continue
        mapped = map_face_values(face_phi[m.source], m, N)
        mismatch = max(mismatch, float(
            np.abs(mapped - face_phi[m.target]).max()))
    if check_interfaces and mismatch > 1e-10:
        raise StageError(
            "conformal",
            f"face solutions disagree across an interface by {mismatch:.3e}")

    phi3d = {}
    matrices = {}
    for rid in structure.region_ids:
        phi = np.zeros((N, N, N))
        for label in FACE_LABELS:
            phi += _extend_face_field(face_phi[(rid, label)], label, profiles)
        phi3d[rid] = phi
        matrices[rid] = field.data[rid] * np.exp(phi)[None]

    out = MetricField(stage="conformal", N=N, L=L, data=matrices)
    out.check_finite()
    return ConformalStage(out, phi3d, face_phi, mismatch, dres, nres)


# ---------------------------------------------------------------------------
# step 2: gauge adjustment on the edges


@dataclass
class GaugeStage:
    """Output of gauge_step: adjusted metric, perturbation, diagnostics."""

    field: MetricField
    perturbation: MetricField       # stage "gauge_delta"
    face_solutions: dict            # (region id, face label) -> {(a, b): (N, N)}
    edge_identity_residual: float   # consistency of the input edge data
    dirichlet_residual: float
    neumann_residual: float


def _edge_slice_on_face(values: np.ndarray, host_label: str,
                        edge_label: str, N: int) -> np.ndarray:
    """Restrict a face-grid array to the edge shared with another face."""
    axes = inplane_axes(host_label)
    pos = axes.index(face_axis(edge_label))
    return np.take(values, _side_index(edge_label, N), axis=pos)


def _identity_residual_from_curvatures(curv: dict, N: int) -> float:
    """Max over cube edges of |N^b K^b_ag + N^a K^a_bg|.

    The two faces meeting at an edge each prescribe the mixed-component
    edge data; the construction is consistent only because these agree
    up to sign, so the residual measures discretization error.
    """
    worst = 0.0
    for la, lb in edge_pairs():
        a_ax, b_ax = face_axis(la), face_axis(lb)
        t_ax = 3 - a_ax - b_ax
        ca, cb = curv[la], curv[lb]
        term_a = _edge_slice_on_face(
            ca.normalization * ca.K[..., b_ax, t_ax], la, lb, N)
        term_b = _edge_slice_on_face(
            cb.normalization * cb.K[..., a_ax, t_ax], lb, la, N)
        worst = max(worst, float(np.abs(term_a + term_b).max()))
    return worst


def gauge_step(
    structure: MulticubeStructure,
    field: MetricField,
    params: PartitionParams = DEFAULT_PARTITION,
    *,
    operator=None,
    cache_directory=None,
    use_cache: bool = True,
) -> GaugeStage:
    """Remove the face extrinsic curvatures along every cube edge.

    Solves one 2D biharmonic problem per gauge component per face with
    Dirichlet zero and edge Neumann data built from the curvature of the
    adjacent faces, then blends the face perturbations into the volume.
    Intrinsic components are identically zero by construction, so the
    interface continuity of the input survives exactly.
    """
    if not field.is_metric:
        raise ValueError("gauge step needs a metric stage field")
    N, L = field.N, field.L
    if operator is None:
        operator = factor(assemble(2, N, L), cache_directory, use_cache)
    profiles = face_blend_profiles(N, L, params)

    face_solutions = {}
    identity = 0.0
    dres = nres = 0.0
    deltas = {}
    for rid in structure.region_ids:
        curv = _all_face_curvatures(field, rid)
        identity = max(identity, _identity_residual_from_curvatures(curv, N))
        delta6 = np.zeros((6, N, N, N))
        for label in FACE_LABELS:
            a0 = face_axis(label)
            u, v = inplane_axes(label)
            solutions = {}
            for comp in ((a0, a0), (a0, u), (a0, v)):
                edge_data = {}
                for edge_label, pos, side, t_axis in _face_edges(label):
                    m_axis = face_axis(edge_label)
                    other = curv[edge_label]
                    if comp == (a0, a0):
                        # d_m dg_aa = -2 N^m K^m_aa
                        values = -2.0 * other.normalization \
                            * other.K[..., a0, a0]
                    elif comp == (a0, m_axis):
                        # the component mixing the face and edge normals
                        # has vanishing prescribed derivative
                        values = None
                    else:
                        # d_m dg_at = -N^m K^m_at with t the edge tangent
                        values = -other.normalization \
                            * other.K[..., a0, t_axis]
                    if values is None:
                        edge_data[(pos, side)] = np.zeros(N)
                    else:
                        edge_data[(pos, side)] = _edge_slice_on_face(
                            values, edge_label, label, N)
                sol, res = _solve_face_2d(operator, edge_data, N)
                solutions[comp] = sol
                dres = max(dres, res.dirichlet_residual)
                nres = max(nres, res.neumann_residual)
                delta6[_COMP_SLOT[comp]] += _extend_face_field(
                    sol, label, profiles)
            face_solutions[(rid, label)] = solutions
        deltas[rid] = delta6

    perturbation = MetricField(stage="gauge_delta", N=N, L=L, data=deltas)
    out = MetricField(
        stage="gauge", N=N, L=L,
        data={rid: field.data[rid] + deltas[rid]
              for rid in structure.region_ids})
    out.check_finite()
    return GaugeStage(out, perturbation, face_solutions, identity, dres, nres)


# ---------------------------------------------------------------------------
# step 3: flatten the faces


@dataclass
class FlattenStage:
    """Output of face_flatten_step: the C1 metric plus diagnostics."""

    field: MetricField
    perturbation: MetricField       # stage "flatten_delta"
    face_neumann: dict              # (region id, face label) -> (N, N, 3, 3)
    gauge_neumann_smoothed: bool
    dirichlet_residual: float
    neumann_residual: float


def _gauge_neumann_edge_data(curv: dict, host_label: str, comp: tuple,
                             D2: np.ndarray, N: int) -> dict:
    """Edge Neumann data for the auxiliary solves of the gauge data.

    Matching the mixed second derivatives across an edge requires

        d_m Ndata_aa = -2 d_a (N^m K^m_aa)
        d_m Ndata_am = 0
        d_m Ndata_at = -2 d_a (N^m K^m_at)

    with m the edge normal inside the face and t the tangent; the right
    sides live on the adjacent face, where the a axis is in-plane.
    """
    a0 = face_axis(host_label)
    edge_data = {}
    for edge_label, pos, side, t_axis in _face_edges(host_label):
        m_axis = face_axis(edge_label)
        if comp == (a0, m_axis):
            edge_data[(pos, side)] = np.zeros(N)
            continue
        b_ax = a0 if comp == (a0, a0) else t_axis
        other = curv[edge_label]
        scalar = other.normalization * other.K[..., a0, b_ax]
        pos_a0 = inplane_axes(edge_label).index(a0)
        derived = -2.0 * _apply_D(scalar, D2, pos_a0)
        edge_data[(pos, side)] = _edge_slice_on_face(
            derived, edge_label, host_label, N)
    return edge_data


def face_flatten_step(
    structure: MulticubeStructure,
    field: MetricField,
    *,
    operator3d=None,
    operator2d=None,
    cache_directory=None,
    use_cache: bool = True,
    allow_huge: bool = False,
    smooth_gauge: bool = True,
) -> FlattenStage:
    """Make the extrinsic curvature vanish on every cube face.

    One 3D biharmonic solve per metric component per region, Dirichlet
    zero on all faces (so the metric itself is untouched there) and
    Neumann data equal to the required normal derivative of the
    perturbation.  With smooth_gauge the gauge part of that data comes
    from auxiliary 2D solves matching mixed second derivatives along the
    edges; otherwise it is simply zero.
    """
    if not field.is_metric:
        raise ValueError("flatten step needs a metric stage field")
    N, L = field.N, field.L
    if operator3d is None:
        operator3d = factor(assemble(3, N, L, allow_huge=allow_huge),
                            cache_directory, use_cache)
    if smooth_gauge and operator2d is None:
        operator2d = factor(assemble(2, N, L), cache_directory, use_cache)
    D2 = build_mesh(N, L).D

    face_neumann = {}
    dres = nres = 0.0
    deltas = {}
    for rid in structure.region_ids:
        curv = _all_face_curvatures(field, rid)
        for label in FACE_LABELS:
            a0 = face_axis(label)
            u, v = inplane_axes(label)
            cf = curv[label]
            data = np.zeros((N, N, 3, 3))
            for a in (u, v):
                for b in (u, v):
                    data[..., a, b] = -2.0 * cf.normalization \
                        * cf.K[..., a, b]
            if smooth_gauge:
                for comp in ((a0, a0), (a0, u), (a0, v)):
                    edge_data = _gauge_neumann_edge_data(
                        curv, label, comp, D2, N)
                    sol, res = _solve_face_2d(operator2d, edge_data, N)
                    dres = max(dres, res.dirichlet_residual)
                    nres = max(nres, res.neumann_residual)
                    data[..., comp[0], comp[1]] = sol
                    if comp[0] != comp[1]:
                        data[..., comp[1], comp[0]] = sol
            face_neumann[(rid, label)] = data

        delta6 = np.empty((6, N, N, N))
        for slot, (a, b) in enumerate(COMPONENT_INDICES):
            neumann = {}
            for label in FACE_LABELS:
                # coordinate derivative -> outward normal derivative
                neumann[label] = float(face_sign(label)) \
                    * face_neumann[(rid, label)][..., a, b]
            res = solve(operator3d, None, neumann)
            dres = max(dres, res.dirichlet_residual)
            nres = max(nres, res.neumann_residual)
            U = res.U
            for label in FACE_LABELS:
                idx = [slice(None)] * 3
                idx[face_axis(label)] = _side_index(label, N)
                U[tuple(idx)] = 0.0
            delta6[slot] = U
        deltas[rid] = delta6

    perturbation = MetricField(stage="flatten_delta", N=N, L=L, data=deltas)
    out = MetricField(
        stage="flattened", N=N, L=L,
        data={rid: field.data[rid] + deltas[rid]
              for rid in structure.region_ids})
    out.check_finite()
    return FlattenStage(out, perturbation, face_neumann,
                        bool(smooth_gauge), dres, nres)


# ---------------------------------------------------------------------------
# stage-level diagnostics (single-region quantities; interface jumps live
# in the diagnostics module)


def edge_geodesic_residual(structure: MulticubeStructure,
                           field: MetricField) -> float:
    """How far the cube edges are from being geodesics of the field.

    Along an edge with tangent axis t the connection components
    Gamma^c_tt must be proportional to the tangent; the inhomogeneity
    function is eliminated with the tangential component, leaving the
    two transverse components as the residual.  Returns the max over all
    regions, edges and edge nodes.
    """
    N, L = field.N, field.L
    D = build_mesh(N, L).D
    worst = 0.0
    for rid in structure.region_ids:
        g6 = field.data[rid]
        dg = _component_derivatives(g6, D)
        for la, lb in edge_pairs():
            t_ax = 3 - face_axis(la) - face_axis(lb)
            # second slice position shifts after the first axis is removed
            pos_b = inplane_axes(la).index(face_axis(lb))
            side_b = _side_index(lb, N)
            line6 = np.take(_face_restrict(g6, la, N, 1), side_b,
                            axis=1 + pos_b)
            dline = np.take(_face_restrict(dg, la, N, 2), side_b,
                            axis=2 + pos_b)                # (3, 6, N)
            g_line = _sym_matrices(line6)                # (N, 3, 3)
            ginv = invert_symmetric3(g_line)
            dmat = np.empty((N, 3, 3, 3))                # [n, e, a, b]
            for slot, (i, j) in enumerate(COMPONENT_INDICES):
                block = np.moveaxis(dline[:, slot], 0, -1)
                dmat[..., i, j] = block
                dmat[..., j, i] = block
            # Gamma_ctt = d_t g_ct - (1/2) d_c g_tt, raised with ginv
            gamma_low = dmat[:, t_ax, :, t_ax] \
                - 0.5 * dmat[:, :, t_ax, t_ax]           # (N, 3) over c
            gamma_up = np.einsum("ncb,nb->nc", ginv, gamma_low)
            for c in range(3):
                if c == t_ax:
                    continue
                worst = max(worst, float(np.abs(gamma_up[:, c]).max()))
    return worst


def edge_curvature_residual(structure: MulticubeStructure,
                            field: MetricField) -> float:
    """Max |K| over the edge nodes of every face of every region."""
    N = field.N
    worst = 0.0
    for rid in structure.region_ids:
        curv = _all_face_curvatures(field, rid)
        for label, cf in curv.items():
            edge_nodes = np.abs(cf.K[[0, -1], :, :, :]).max()
            edge_nodes = max(edge_nodes,
                             np.abs(cf.K[:, [0, -1], :, :]).max())
            worst = max(worst, float(edge_nodes))
    return worst


def edge_identity_residual(structure: MulticubeStructure,
                           field: MetricField) -> float:
    """Max over cube edges of the mixed-curvature consistency residual.

    The gauge-step edge data is self-consistent only when the two faces
    meeting at an edge agree on the mixed component: N^b K^b_at must
    equal -N^a K^a_bt along the edge.  For a smooth metric this is an
    identity; the discrete residual measures truncation error and must
    fall with resolution.
    """
    N = field.N
    worst = 0.0
    for rid in structure.region_ids:
        curv = _all_face_curvatures(field, rid)
        worst = max(worst, _identity_residual_from_curvatures(curv, N))
    return worst


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class C1Metric:
    """All stage fields of one build plus timing and cache bookkeeping."""

    structure: MulticubeStructure
    N: int
    params: PartitionParams
    stages: dict                    # stage name -> MetricField
    conformal: ConformalStage | None = None
    gauge: GaugeStage | None = None
    flatten: FlattenStage | None = None
    timings: dict = dataclass_field(default_factory=dict)
    cache_hits: dict = dataclass_field(default_factory=dict)
    factor_seconds: dict = dataclass_field(default_factory=dict)

    @property
    def final(self) -> MetricField:
        for stage in reversed(STAGE_SEQUENCE):
            if stage in self.stages:
                return self.stages[stage]
        raise ValueError("empty build")


def build_c1_metric(
    structure: MulticubeStructure,
    N: int,
    params: PartitionParams = DEFAULT_PARTITION,
    *,
    stages: str = "full",
    cache_directory=None,
    use_cache: bool = True,
    allow_huge: bool = False,
    smooth_gauge: bool = True,
    check_interfaces: bool = True,
    table=None,
) -> C1Metric:
    """Run the refinement pipeline up to the requested stage.

    stages is one of "c0", "conformal", "gauge", "full".  Any failure is
    re-raised as StageError naming the stage that caused it.
    """
    stage_alias = {"c0": "c0", "conformal": "conformal", "gauge": "gauge",
                   "full": "flattened", "flattened": "flattened"}
    if stages not in stage_alias:
        raise ValueError(f"unknown stage selection {stages!r}")
    target = stage_alias[stages]
    depth = STAGE_SEQUENCE.index(target)
    # refuse an over-cap 3D solve up front, not after the 2D stages ran
    check_resolution(2, N)
    if depth >= 3:
        check_resolution(3, N, allow_huge)

    result = C1Metric(structure, N, params, {})
    t0 = time.perf_counter()
    try:
        if table is None:
            table = build_corner_metrics(structure)
        field = sample_c0_field(structure, N, params, table)
    except Exception as exc:
        raise _wrap_stage("c0", exc)
    result.stages["c0"] = field
    result.timings["c0"] = time.perf_counter() - t0
    if depth < 1:
        return result

    op2d = factor(assemble(2, N, structure.L), cache_directory, use_cache)
    result.cache_hits["2d"] = op2d.cache_hit
    result.factor_seconds["2d"] = op2d.factor_seconds

    t0 = time.perf_counter()
    try:
        conf = conformal_step(structure, field, params, operator=op2d,
                              check_interfaces=check_interfaces)
    except StageError:
        raise
    except Exception as exc:
        raise _wrap_stage("conformal", exc)
    result.conformal = conf
    result.stages["conformal"] = conf.field
    result.timings["conformal"] = time.perf_counter() - t0
    if depth < 2:
        return result

    t0 = time.perf_counter()
    try:
        gauge = gauge_step(structure, conf.field, params, operator=op2d)
    except Exception as exc:
        raise _wrap_stage("gauge", exc)
    result.gauge = gauge
    result.stages["gauge"] = gauge.field
    result.timings["gauge"] = time.perf_counter() - t0
    if depth < 3:
        return result

    op3d = factor(assemble(3, N, structure.L, allow_huge=allow_huge),
                  cache_directory, use_cache)
    result.cache_hits["3d"] = op3d.cache_hit
    result.factor_seconds["3d"] = op3d.factor_seconds

    t0 = time.perf_counter()
    try:
        flat = face_flatten_step(
            structure, gauge.field, operator3d=op3d, operator2d=op2d,
            smooth_gauge=smooth_gauge)
    except Exception as exc:
        raise _wrap_stage("flattened", exc)
    result.flatten = flat
    result.stages["flattened"] = flat.field
    result.timings["flattened"] = time.perf_counter() - t0
    return result
