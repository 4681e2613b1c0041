"""Tetrahedral triangulations to multicube structures.

Each tetrahedron is cut into four hexahedral cells, one per vertex, with
corners at the vertex, the three adjacent edge midpoints, the three
adjacent face centroids, and the centroid of the tetrahedron.  Face
gluings between tetrahedra then induce face maps between cells.  The
resulting structure must pass both the structural validation and the
angle compatibility identities before any metric can be built on it.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .c0_metric import assign_dihedral_angles, gram_determinant
from .multicube_core import (
    FaceMap,
    MulticubeStructure,
    StructuralInconsistencyError,
    all_signed_permutations,
    corner_triples,
    face_axis,
    outward_normal,
)

_AXES = "xyz"
_IDENTITY_PERM = (0, 1, 2, 3)


class TriangulationError(Exception):
    """Malformed or non-closed triangulation input."""


class SubdivisionError(Exception):
    """Internal consistency failure while deriving cell face maps."""


@dataclass(frozen=True)
class Gluing:
    """One glued tetrahedron face: neighbor index and vertex permutation."""

    tet: int
    perm: tuple

    def image_of(self, vertex: int) -> int:
        return self.perm[vertex]


@dataclass(frozen=True)
class Triangulation:
    """Closed tetrahedral triangulation with involutive face gluings.

    gluings[t][i] describes the face of tetrahedron t opposite vertex i.
    """

    tetrahedra: int
    gluings: tuple


def _perm_inverse(perm):
    inv = [0] * 4
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


def parse_triangulation(text: str) -> Triangulation:
    """Parse and cross-check the JSON gluing description."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TriangulationError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise TriangulationError("top level must be an object")
    try:
        count = data["tetrahedra"]
        rows = data["gluings"]
    except KeyError as exc:
        raise TriangulationError(f"missing key {exc}") from exc
    if not isinstance(count, int) or count < 1:
        raise TriangulationError("'tetrahedra' must be a positive integer")
    if not isinstance(rows, list) or len(rows) != count:
        raise TriangulationError(
            f"'gluings' must list {count} tetrahedra, got "
            f"{len(rows) if isinstance(rows, list) else type(rows).__name__}")

    gluings = []
    for t, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != 4:
            raise TriangulationError(
                f"tetrahedron {t}: expected 4 face entries")
        entries = []
        for i, cell in enumerate(row):
            where = f"tetrahedron {t} face {i}"
            if cell is None:
                raise TriangulationError(f"{where}: unglued face")
            if not isinstance(cell, dict):
                raise TriangulationError(f"{where}: entry must be an object")
            try:
                j = cell["tet"]
                perm = cell["perm"]
            except KeyError as exc:
                raise TriangulationError(
                    f"{where}: missing key {exc}") from exc
            if not isinstance(j, int) or not 0 <= j < count:
                raise TriangulationError(
                    f"{where}: neighbor {j!r} out of range")
            if (not isinstance(perm, list) or len(perm) != 4
                    or sorted(perm) != [0, 1, 2, 3]):
                raise TriangulationError(
                    f"{where}: perm must be a permutation of 0..3")
            entries.append(Gluing(tet=j, perm=tuple(perm)))
        gluings.append(tuple(entries))

    for t in range(count):
        for i in range(4):
            g = gluings[t][i]
            if g.tet == t and g.perm == _IDENTITY_PERM:
                raise TriangulationError(
                    f"tetrahedron {t} face {i}: glued to itself by the "
                    "identity")
            back = gluings[g.tet][g.perm[i]]
            if back.tet != t or back.perm != _perm_inverse(g.perm):
                raise TriangulationError(
                    f"tetrahedron {t} face {i}: gluing is not involutive")
    return Triangulation(tetrahedra=count, gluings=tuple(gluings))


def load_triangulation(path) -> Triangulation:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_triangulation(fh.read())


# ---------------------------------------------------------------------------
# subdivision


def _others(v: int) -> tuple:
    return tuple(w for w in range(4) if w != v)


def _cell_corners(v: int) -> dict:
    """Combinatorial corner labels of the cell at vertex v, with their
    positions in the centered unit cell (coordinates in {-1, +1}).

    Labels are shared between cells exactly when the corners are the same
    point of the tetrahedron: ('v', vertex), ('e', {v, w}) for an edge
    midpoint, ('f', w) for the centroid of the face opposite w, and
    ('o',) for the centroid of the tetrahedron.
    """
    corners = {("v", v): np.array([-1, -1, -1])}
    for k, w in enumerate(_others(v)):
        edge = np.full(3, -1)
        edge[k] = 1
        corners[("e", frozenset((v, w)))] = edge
        face = np.full(3, 1)
        face[k] = -1
        corners[("f", w)] = face
    corners[("o",)] = np.full(3, 1)
    return corners


def _relabel(label, perm):
    """Carry a corner label across a tetrahedron gluing."""
    kind = label[0]
    if kind == "v":
        return ("v", perm[label[1]])
    if kind == "e":
        return ("e", frozenset(perm[x] for x in label[1]))
    if kind == "f":
        return ("f", perm[label[1]])
    return label


def _face_of(corners: dict, labels) -> str:
    """The cell face containing all the given corners."""
    stack = np.array([corners[l] for l in labels])
    for axis in range(3):
        col = stack[:, axis]
        if np.all(col == col[0]):
            return ("+" if col[0] > 0 else "-") + _AXES[axis]
    raise SubdivisionError(f"corners {labels} do not share a cell face")


def _solve_rotation(src_face, tgt_face, pairs):
    """The unique signed permutation mapping each source face-corner
    displacement to its target counterpart and the outward source normal
    to the inward target normal."""
    n_src = outward_normal(src_face)
    n_tgt = outward_normal(tgt_face)
    found = None
    for rot in all_signed_permutations():
        m = rot.matrix
        if not np.array_equal(m @ n_src, -n_tgt):
            continue
        if not all(np.array_equal(m @ ds, dt) for ds, dt in pairs):
            continue
        if found is not None:
            raise SubdivisionError(
                f"rotation between {src_face} and {tgt_face} is ambiguous")
        found = rot
    if found is None:
        raise SubdivisionError(
            f"no signed permutation matches the corner correspondence "
            f"between faces {src_face} and {tgt_face}")
    return found


def _face_center(label) -> np.ndarray:
    return outward_normal(label)


def _derive_map(src_rid, src_corners, src_labels, tgt_rid, tgt_corners,
                relabeled) -> FaceMap:
    src_face = _face_of(src_corners, src_labels)
    tgt_face = _face_of(tgt_corners, relabeled)
    fs = _face_center(src_face)
    ft = _face_center(tgt_face)
    pairs = [(src_corners[a] - fs, tgt_corners[b] - ft)
             for a, b in zip(src_labels, relabeled)]
    rot = _solve_rotation(src_face, tgt_face, pairs)
    return FaceMap(source=(src_rid, src_face), target=(tgt_rid, tgt_face),
                   rotation=rot)


def subdivide_to_multicube(tri: Triangulation, L: float = 1.0,
                           name: str = "") -> MulticubeStructure:
    """Cut every tetrahedron into four cells and derive all face maps.

    Cell t.v sits at vertex v of tetrahedron t.  Its three faces away
    from the vertex are glued to the sibling cells of the same
    tetrahedron; the three faces at the vertex lie on tetrahedron faces
    and follow the triangulation gluings.
    """
    corners = {v: _cell_corners(v) for v in range(4)}
    maps = []
    for t in range(tri.tetrahedra):
        for v in range(4):
            rid = f"{t}.{v}"
            mine = corners[v]
            for k, w in enumerate(_others(v)):
                # internal face shared with the sibling cell at w
                shared = [("e", frozenset((v, w)))]
                shared += [("f", u) for u in _others(v) if u != w]
                shared += [("o",)]
                maps.append(_derive_map(rid, mine, shared,
                                        f"{t}.{w}", corners[w], shared))
                # external face on the tetrahedron face opposite w
                g = tri.gluings[t][w]
                ext = [("v", v)]
                ext += [("e", frozenset((v, u)))
                        for u in _others(v) if u != w]
                ext += [("f", w)]
                image = [_relabel(l, g.perm) for l in ext]
                maps.append(_derive_map(rid, mine, ext,
                                        f"{g.tet}.{g.perm[v]}",
                                        corners[g.perm[v]], image))
    regions = _layout_centers(tri.tetrahedra)
    structure = MulticubeStructure(L=L, regions=regions, face_maps=maps,
                                   name=name)
    report = structure.validate()
    if not report.valid:
        raise SubdivisionError(
            "subdivision produced an invalid structure: "
            + "; ".join(m for _, m in report.findings))
    # a combinatorially closed gluing can still fail to be a manifold;
    # the edge walks and vertex links catch that
    try:
        structure.edge_orbits()
        structure.vertex_stars()
    except StructuralInconsistencyError as exc:
        raise TriangulationError(
            f"input is not a closed 3-manifold triangulation: {exc}"
        ) from exc
    return structure


def _layout_centers(tet_count: int) -> list:
    """Distinct centers, four cells per tetrahedron in a 2x2 block."""
    grid = max(1, math.isqrt(tet_count - 1) + 1) if tet_count > 1 else 1
    offsets = [(0, 0), (1, 0), (0, 1), (1, 1)]
    regions = []
    for t in range(tet_count):
        bx = 2 * (t % grid)
        by = 2 * (t // grid)
        for v in range(4):
            dx, dy = offsets[v]
            regions.append((f"{t}.{v}", (bx + dx, by + dy, 0)))
    return regions


def layout_regions(structure: MulticubeStructure) -> MulticubeStructure:
    """Reassign the cosmetic cell placement of a subdivided structure."""
    if len(structure.region_ids) % 4:
        raise ValueError("structure is not a 4-cells-per-tetrahedron "
                         "subdivision")
    regions = _layout_centers(len(structure.region_ids) // 4)
    known = {rid for rid, _ in regions}
    if known != set(structure.region_ids):
        raise ValueError("region ids do not follow the t.v subdivision "
                         "naming")
    return MulticubeStructure(L=structure.L, regions=regions,
                              face_maps=structure.faces.values(),
                              name=structure.name)


# ---------------------------------------------------------------------------
# compatibility identities


@dataclass(frozen=True)
class CornerCheck:
    """Determinant and angle-sum identities at one region corner."""

    region: object
    corner: tuple
    angles: tuple        # dihedral angles (xy, xz, yz)
    determinant: float
    angle_sum: float

    @property
    def determinant_ok(self) -> bool:
        return self.determinant > 0.0

    @property
    def angle_sum_ok(self) -> bool:
        return self.angle_sum > math.pi

    @property
    def ok(self) -> bool:
        return self.determinant_ok and self.angle_sum_ok


@dataclass(frozen=True)
class FaceAngleCheck:
    """Face-angle agreement across one face map at one corner."""

    source: tuple        # (region, face label)
    target: tuple
    corner: tuple        # source corner labels
    image: tuple         # target corner labels
    theta_source: float
    theta_target: float
    defined: bool

    @property
    def mismatch(self) -> float:
        return abs(self.theta_source - self.theta_target)

    @property
    def ok(self) -> bool:
        return self.defined and self.mismatch <= THETA_TOLERANCE


THETA_TOLERANCE = 1e-12


@dataclass
class CompatibilityReport:
    """All three corner identities evaluated over a structure."""

    corners: list = field(default_factory=list)
    face_angles: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (all(c.ok for c in self.corners)
                and all(f.ok for f in self.face_angles))

    def failures(self) -> list:
        msgs = []
        for c in self.corners:
            if not c.determinant_ok:
                msgs.append(
                    f"corner {c.region}{c.corner}: degenerate metric "
                    f"(determinant {c.determinant:.6g})")
            if not c.angle_sum_ok:
                msgs.append(
                    f"corner {c.region}{c.corner}: dihedral angles sum to "
                    f"{c.angle_sum:.6g} <= pi")
        for f in self.face_angles:
            if not f.defined:
                msgs.append(
                    f"face angle at {f.source} corner {f.corner}: "
                    "undefined (degenerate edge angle)")
            elif not f.ok:
                msgs.append(
                    f"face angle mismatch across {f.source} -> {f.target} "
                    f"at corner {f.corner}: {f.theta_source:.12g} vs "
                    f"{f.theta_target:.12g}")
        return msgs

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "corner_checks": [
                {
                    "region": c.region,
                    "corner": list(c.corner),
                    "angles": [float(a) for a in c.angles],
                    "determinant": c.determinant,
                    "angle_sum": c.angle_sum,
                    "ok": c.ok,
                } for c in self.corners
            ],
            "face_angle_checks": [
                {
                    "source": list(f.source),
                    "target": list(f.target),
                    "corner": list(f.corner),
                    "theta_source": f.theta_source,
                    "theta_target": f.theta_target,
                    "mismatch": f.mismatch,
                    "ok": f.ok,
                } for f in self.face_angles
            ],
            "failures": self.failures(),
        }


def _face_angle(angles, rid, face, corner):
    """Cosine of the face angle at a corner, and whether it is defined.

    The angle within the face between the two edges meeting at the
    corner follows the spherical law of cosines applied to the three
    dihedral angles.
    """
    beta, gamma = [l for l in corner if l != face]
    psi_ab = angles.angle(rid, face, beta)
    psi_ag = angles.angle(rid, face, gamma)
    psi_bg = angles.angle(rid, beta, gamma)
    denom = math.sin(psi_ab) * math.sin(psi_ag)
    if denom < 1e-15:
        return math.nan, False
    cos_theta = (math.cos(psi_bg)
                 + math.cos(psi_ab) * math.cos(psi_ag)) / denom
    if abs(cos_theta) > 1.0 + 1e-12:
        return math.nan, False
    return math.acos(max(-1.0, min(1.0, cos_theta))), True


def check_compatibility(structure: MulticubeStructure) -> CompatibilityReport:
    """Evaluate the three corner identities everywhere.

    Never raises on a failed identity; the report carries every value so
    callers can both gate on .passed and show what went wrong.
    """
    angles = assign_dihedral_angles(structure)
    report = CompatibilityReport()
    for rid in structure.region_ids:
        for corner in corner_triples():
            lx, ly, lz = corner
            psi = (angles.angle(rid, lx, ly), angles.angle(rid, lx, lz),
                   angles.angle(rid, ly, lz))
            report.corners.append(CornerCheck(
                region=rid, corner=corner, angles=psi,
                determinant=gram_determinant(*psi),
                angle_sum=sum(psi)))
    for (rid, face), m in sorted(structure.faces.items()):
        tid, tface = m.target
        for corner in corner_triples():
            if face not in corner:
                continue
            others = [l for l in corner if l != face]
            image = tuple(sorted(
                [tface] + [m.rotation.map_label(l) for l in others],
                key=face_axis))
            th_s, def_s = _face_angle(angles, rid, face, corner)
            th_t, def_t = _face_angle(angles, tid, tface, image)
            report.face_angles.append(FaceAngleCheck(
                source=(rid, face), target=m.target, corner=corner,
                image=image, theta_source=th_s, theta_target=th_t,
                defined=def_s and def_t))
    return report
