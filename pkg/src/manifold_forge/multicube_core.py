"""Multicube structures: cubic coordinate regions glued along faces.

A multicube structure is a set of cubic regions, all of coordinate size L,
embedded in a common Cartesian frame.  Each of the six faces of each region
is identified with exactly one face (of the same or another region) through
a rigid map

    x_B = c_B + f_beta + M (x_A - c_A - f_alpha)

where c_A, c_B are region centers, f_alpha is the offset from a region
center to the center of its "alpha" face, and M is one of the 48 signed
permutation matrices.  M carries the outward normal of the source face onto
the inward normal of the target face, so glued cubes meet instead of
overlapping.  The partner map of every face map is its inverse.

Rotation generators: "R+z" is the quarter turn about the +z axis taking
(x, y, z) to (-y, x, z); "R-a" is the quarter turn about the -a axis, i.e.
the inverse of "R+a".  A product string "Ra Rb" means M(Ra) @ M(Rb) acting
on column vectors.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

FACE_LABELS = ("-x", "+x", "-y", "+y", "-z", "+z")

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


class StructuralInconsistencyError(Exception):
    """Face maps do not close consistently (orbit walk or link failure)."""


def face_axis(label: str) -> int:
    """Coordinate axis (0,1,2) of a face label like '-y'."""
    return _AXIS_INDEX[label[1]]


def face_sign(label: str) -> int:
    return 1 if label[0] == "+" else -1


def outward_normal(label: str) -> np.ndarray:
    n = np.zeros(3, dtype=int)
    n[face_axis(label)] = face_sign(label)
    return n


def label_of_normal(n) -> str:
    """Face label whose outward normal is the signed unit vector n."""
    (axis,) = np.nonzero(n)[0].reshape(1)
    return ("+" if n[axis] > 0 else "-") + "xyz"[axis]


def face_offset(label: str, L: float) -> np.ndarray:
    """Offset from region center to the center of the given face."""
    return outward_normal(label) * (L / 2.0)


# ---------------------------------------------------------------------------
# Signed permutations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignedPermutation:
    """A 3x3 orthogonal matrix with entries in {-1, 0, 1}.

    Stored as a nested tuple so instances are hashable; use .matrix for
    numpy work.
    """

    rows: tuple

    def __post_init__(self):
        m = np.asarray(self.rows, dtype=int)
        if m.shape != (3, 3):
            raise ValueError("signed permutation must be 3x3")
        if not np.array_equal(np.abs(m).sum(axis=0), [1, 1, 1]) or \
           not np.array_equal(np.abs(m).sum(axis=1), [1, 1, 1]):
            raise ValueError("each row and column needs exactly one +-1 entry")
        if not np.all((m == 0) | (m == 1) | (m == -1)):
            raise ValueError("entries must be in {-1, 0, 1}")

    @classmethod
    def from_matrix(cls, m) -> "SignedPermutation":
        m = np.asarray(m, dtype=int)
        if m.size == 9:
            m = m.reshape(3, 3)
        return cls(tuple(tuple(int(x) for x in row) for row in m))

    @classmethod
    def identity(cls) -> "SignedPermutation":
        return cls.from_matrix(np.eye(3, dtype=int))

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.rows, dtype=int)

    def compose(self, other: "SignedPermutation") -> "SignedPermutation":
        return SignedPermutation.from_matrix(self.matrix @ other.matrix)

    def __matmul__(self, other):
        return self.compose(other)

    def invert(self) -> "SignedPermutation":
        # orthogonal, so the inverse is the transpose
        return SignedPermutation.from_matrix(self.matrix.T)

    def apply(self, v):
        return self.matrix @ np.asarray(v)

    def det(self) -> int:
        return int(round(np.linalg.det(self.matrix)))

    def map_label(self, label: str) -> str:
        """Image face label: where this rotation sends a face normal."""
        return label_of_normal(self.apply(outward_normal(label)))


def _quarter_turn(axis: int, sign: int) -> SignedPermutation:
    # +pi/2 about the signed axis, right-hand rule, acting on column vectors:
    # with (axis, a, b) a cyclic permutation of (x, y, z), e_a -> e_b -> -e_a.
    # R+z sends (x,y,z) to (-y,x,z).
    a, b = (axis + 1) % 3, (axis + 2) % 3
    m = np.zeros((3, 3), dtype=int)
    m[axis, axis] = 1
    m[b, a] = sign
    m[a, b] = -sign
    return SignedPermutation.from_matrix(m)


GENERATORS = {
    "R+x": _quarter_turn(0, +1),
    "R-x": _quarter_turn(0, -1),
    "R+y": _quarter_turn(1, +1),
    "R-y": _quarter_turn(1, -1),
    "R+z": _quarter_turn(2, +1),
    "R-z": _quarter_turn(2, -1),
}


def generator(name: str) -> SignedPermutation:
    try:
        return GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown rotation generator {name!r}") from None


def parse_rotation(spec) -> SignedPermutation:
    """Parse a rotation from a generator-product string or a 3x3 matrix.

    Strings: "I" for the identity, or whitespace-separated generator names,
    e.g. "R+y R+z" meaning M(R+y) @ M(R+z).
    """
    if isinstance(spec, SignedPermutation):
        return spec
    if isinstance(spec, str):
        text = spec.strip()
        if text in ("I", ""):
            return SignedPermutation.identity()
        out = SignedPermutation.identity()
        for token in text.split():
            out = out.compose(generator(token))
        return out
    return SignedPermutation.from_matrix(spec)


def rotation_string(p: SignedPermutation) -> str:
    """Shortest generator-product string reproducing p (identity -> "I")."""
    words = {SignedPermutation.identity(): []}
    frontier = [SignedPermutation.identity()]
    while p not in words:
        nxt = []
        for q in frontier:
            for name, g in GENERATORS.items():
                r = q.compose(g)
                if r not in words:
                    words[r] = words[q] + [name]
                    nxt.append(r)
        if not nxt:
            raise ValueError("rotation is not a product of quarter turns")
        frontier = nxt
    return " ".join(words[p]) or "I"


def all_signed_permutations() -> list:
    """All 48 signed permutation matrices (rotations and reflections)."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3), dtype=int)
            for i, j in enumerate(perm):
                m[i, j] = signs[i]
            out.append(SignedPermutation.from_matrix(m))
    return out


def generated_rotation_group() -> set:
    """Closure of the six quarter-turn generators under composition.

    This is the proper rotation group of the cube (24 elements, all with
    determinant +1), a subgroup of the full 48-element signed permutation
    group.
    """
    group = set(GENERATORS.values())
    frontier = list(group)
    while frontier:
        nxt = []
        for q in frontier:
            for g in GENERATORS.values():
                r = q.compose(g)
                if r not in group:
                    group.add(r)
                    nxt.append(r)
        frontier = nxt
    return group


# ---------------------------------------------------------------------------
# Face maps and structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FaceMap:
    """Identification of one region face with another.

    rotation maps displacements measured from the source face center to
    displacements measured from the target face center, and sends the
    source outward normal to the target inward normal.
    """

    source: tuple  # (region id, face label)
    target: tuple
    rotation: SignedPermutation

    def partner_rotation(self) -> SignedPermutation:
        return self.rotation.invert()


@dataclass(frozen=True)
class EdgeOrbit:
    """One identified edge: the cycle of (region, edge {alpha,beta}) slots
    crossed when walking around the edge.  K counts cube-edge incidences
    with multiplicity."""

    cycle: tuple  # of (region id, (label, label))

    @property
    def K(self) -> int:
        return len(self.cycle)


@dataclass(frozen=True)
class VertexStar:
    """One identified cube vertex and its star of cube corners.

    incidences lists the (region, corner {alpha,beta,gamma}) slots meeting
    at the vertex.  The link of the vertex is triangulated with one
    triangle per incidence; link_vertices/link_edges/link_faces describe
    that closed surface.
    """

    incidences: tuple  # of (region id, (label, label, label))
    link_vertices: int
    link_edges: int
    link_faces: int

    @property
    def size(self) -> int:
        return len(self.incidences)

    @property
    def link_euler(self) -> int:
        return self.link_vertices - self.link_edges + self.link_faces


@dataclass
class ValidationReport:
    findings: list = field(default_factory=list)

    def add(self, code: str, message: str):
        self.findings.append((code, message))

    @property
    def valid(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "findings": [{"code": c, "message": m} for c, m in self.findings],
        }


def edge_pairs():
    """The 12 edges of a cube as canonical (label, label) pairs on
    distinct axes, minor axis first."""
    pairs = []
    for a, b in itertools.combinations(range(3), 2):
        for sa in "-+":
            for sb in "-+":
                pairs.append((sa + "xyz"[a], sb + "xyz"[b]))
    return pairs


def corner_triples():
    """The 8 corners of a cube as canonical label triples (x, y, z axes)."""
    return [
        (sx + "x", sy + "y", sz + "z")
        for sx in "-+" for sy in "-+" for sz in "-+"
    ]


def _canonical_pair(l1: str, l2: str) -> tuple:
    return (l1, l2) if face_axis(l1) < face_axis(l2) else (l2, l1)


class MulticubeStructure:
    """Immutable collection of cubic regions plus one face map per face."""

    def __init__(self, L: float, regions, face_maps, name: str = ""):
        """regions: iterable of (id, center) with centers in units of L;
        face_maps: iterable of FaceMap covering each (region, label) once."""
        self.L = float(L)
        self.name = name
        self.regions = {}
        for rid, center in regions:
            if rid in self.regions:
                raise ValueError(f"duplicate region id {rid!r}")
            self.regions[rid] = np.asarray(center, dtype=float)
        self.faces = {}
        self.duplicate_sources = []
        for m in face_maps:
            if m.source in self.faces:
                self.duplicate_sources.append(m.source)
                continue
            self.faces[m.source] = m
        self.region_ids = tuple(self.regions)

    # -- geometry ----------------------------------------------------------

    def center(self, rid) -> np.ndarray:
        """Physical center coordinates of a region."""
        return self.regions[rid] * self.L

    def face_center(self, rid, label) -> np.ndarray:
        return self.center(rid) + face_offset(label, self.L)

    def face_map(self, rid, label) -> FaceMap:
        return self.faces[(rid, label)]

    def partner(self, m: FaceMap) -> FaceMap:
        return self.faces[m.target]

    def apply_face_map(self, m: FaceMap, point) -> np.ndarray:
        """Carry a point on the source face to the target face."""
        point = np.asarray(point, dtype=float)
        rid, label = m.source
        fc = self.face_center(rid, label)
        axis = face_axis(label)
        if abs(point[axis] - fc[axis]) > 1e-12 * self.L:
            raise ValueError(
                f"point {point} is not on face {label} of region {rid}")
        tid, tlabel = m.target
        return self.face_center(tid, tlabel) + m.rotation.matrix @ (point - fc)

    # -- validation --------------------------------------------------------

    def validate(self) -> ValidationReport:
        report = ValidationReport()
        for key in self.duplicate_sources:
            report.add("duplicate-map", f"more than one face map for {key}")
        targets = {}
        for rid in self.region_ids:
            for label in FACE_LABELS:
                key = (rid, label)
                m = self.faces.get(key)
                if m is None:
                    report.add("missing-map", f"no face map for {key}")
                    continue
                if m.target[0] not in self.regions:
                    report.add("bad-target", f"{key} targets unknown region")
                    continue
                targets.setdefault(m.target, []).append(key)
        for key, sources in targets.items():
            if len(sources) > 1:
                report.add("duplicate-target",
                           f"{key} is the target of {sources}")
        for rid in self.region_ids:
            for label in FACE_LABELS:
                if (rid, label) not in targets:
                    report.add("uncovered-target",
                               f"{(rid, label)} is never a target")
        for key, m in self.faces.items():
            rot = m.rotation.matrix
            n_src = outward_normal(m.source[1])
            n_tgt = outward_normal(m.target[1])
            if not np.array_equal(rot @ n_src, -n_tgt):
                report.add("normal-rule",
                           f"{key}: rotation does not map the outward normal "
                           "to the target inward normal")
            partner = self.faces.get(m.target)
            if partner is None:
                continue
            if partner.target != m.source or \
               not np.array_equal(partner.rotation.matrix, rot.T):
                report.add("involution",
                           f"{key}: partner map is not the inverse")
        return report

    # -- edge orbits ---------------------------------------------------------

    def _edge_step(self, rid, cross, other):
        """Cross the 'cross' face out of the edge {cross, other}.

        Returns (region, cross, other) for the next wedge around the edge:
        the image of the companion face becomes the next face to cross, and
        the face we arrived through is the new companion.
        """
        m = self.faces.get((rid, cross))
        if m is None:
            raise StructuralInconsistencyError(f"missing map at {(rid, cross)}")
        tid, tlabel = m.target
        return tid, m.rotation.map_label(other), tlabel

    def edge_orbits(self) -> list:
        """Partition all (region, edge) slots into identified-edge orbits."""
        orbits = []
        seen = set()
        for rid in self.region_ids:
            for pair in edge_pairs():
                if (rid, pair) in seen:
                    continue
                start = (rid, pair[0], pair[1])
                cycle = []
                state = start
                limit = 24 * len(self.regions) + 1
                for _ in range(limit):
                    r, cross, other = state
                    cycle.append((r, _canonical_pair(cross, other)))
                    state = self._edge_step(r, cross, other)
                    if state == start:
                        break
                else:
                    raise StructuralInconsistencyError(
                        f"edge walk from {start} does not close")
                for slot in cycle:
                    seen.add(slot)
                orbits.append(EdgeOrbit(tuple(cycle)))
        total = sum(o.K for o in orbits)
        if total != 12 * len(self.regions):
            raise StructuralInconsistencyError(
                f"edge orbits cover {total} slots, expected "
                f"{12 * len(self.regions)}")
        return orbits

    def edge_orbit_index(self) -> dict:
        """(region, edge pair) -> EdgeOrbit for every slot."""
        index = {}
        for orbit in self.edge_orbits():
            for slot in orbit.cycle:
                index[slot] = orbit
        return index

    # -- vertex stars --------------------------------------------------------

    def _corner_step(self, rid, cross, corner):
        """Image of a corner when crossing one of its three faces."""
        m = self.faces[(rid, cross)]
        tid, tlabel = m.target
        others = [l for l in corner if l != cross]
        image = [tlabel] + [m.rotation.map_label(l) for l in others]
        return tid, tuple(sorted(image, key=face_axis))

    def vertex_stars(self) -> list:
        stars = []
        assigned = set()
        for rid in self.region_ids:
            for corner in corner_triples():
                if (rid, corner) in assigned:
                    continue
                # flood fill the corner-incidence set
                comp = {(rid, corner)}
                queue = [(rid, corner)]
                while queue:
                    r, c = queue.pop()
                    for cross in c:
                        nxt = self._corner_step(r, cross, c)
                        if nxt not in comp:
                            comp.add(nxt)
                            queue.append(nxt)
                incidences = tuple(sorted(comp))
                assigned |= comp
                stars.append(self._build_star(incidences))
        total = sum(s.size for s in stars)
        if total != 8 * len(self.regions):
            raise StructuralInconsistencyError(
                f"vertex stars cover {total} corner slots, expected "
                f"{8 * len(self.regions)}")
        return stars

    def _build_star(self, incidences) -> VertexStar:
        """Triangulate the link of a vertex and check it is a 2-sphere.

        One triangle per corner incidence.  A triangle vertex is a cube
        edge at the corner (a pair of labels); crossing face a identifies
        the two triangle vertices on that face with their images.
        """
        verts = {}
        for r, c in incidences:
            for pair in itertools.combinations(c, 2):
                key = (r, c, pair)
                verts[key] = key
        def find(x):
            while verts[x] != x:
                verts[x] = verts[verts[x]]
                x = verts[x]
            return x
        def union(x, y):
            rx, ry = find(x), find(y)
            if rx != ry:
                verts[rx] = ry
        for r, c in incidences:
            for cross in c:
                m = self.faces[(r, cross)]
                tid, tc = self._corner_step(r, cross, c)
                for other in c:
                    if other == cross:
                        continue
                    img = _canonical_pair(m.target[1],
                                          m.rotation.map_label(other))
                    union((r, c, _canonical_pair(cross, other)),
                          (tid, tc, img))
        F = len(incidences)
        E = 3 * F // 2
        V = len({find(k) for k in list(verts)})
        star = VertexStar(incidences, V, E, F)
        if 3 * F % 2 != 0 or star.link_euler != 2:
            raise StructuralInconsistencyError(
                f"vertex link has Euler characteristic {star.link_euler}, "
                "not a 2-sphere")
        return star

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        faces = []
        for rid in self.region_ids:
            for label in FACE_LABELS:
                m = self.faces[(rid, label)]
                faces.append({
                    "from": [m.source[0], m.source[1]],
                    "to": [m.target[0], m.target[1]],
                    "rot": [list(row) for row in m.rotation.rows],
                })
        out = {
            "L": self.L,
            "regions": [{"id": rid, "center": [float(x) for x in c]}
                        for rid, c in self.regions.items()],
            "faces": faces,
        }
        if self.name:
            out["name"] = self.name
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MulticubeStructure":
        regions = [(r["id"], r["center"]) for r in data["regions"]]
        maps = []
        for f in data["faces"]:
            maps.append(FaceMap(
                source=(f["from"][0], f["from"][1]),
                target=(f["to"][0], f["to"][1]),
                rotation=parse_rotation(f["rot"]),
            ))
        return cls(data["L"], regions, maps, name=data.get("name", ""))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "MulticubeStructure":
        if hasattr(source, "read"):
            data = json.load(source)
        elif isinstance(source, (dict,)):
            data = source
        else:
            text = str(source)
            if text.lstrip().startswith("{"):
                data = json.loads(text)
            else:
                with open(text) as fh:
                    data = json.load(fh)
        return cls.from_dict(data)

    def __eq__(self, other):
        if not isinstance(other, MulticubeStructure):
            return NotImplemented
        return (self.L == other.L
                and self.regions.keys() == other.regions.keys()
                and all(np.array_equal(self.regions[r], other.regions[r])
                        for r in self.regions)
                and self.faces.keys() == other.faces.keys()
                and all(self.faces[k].target == other.faces[k].target
                        and self.faces[k].rotation == other.faces[k].rotation
                        for k in self.faces))


def apply_face_map(structure: MulticubeStructure, m: FaceMap, point):
    return structure.apply_face_map(m, point)


def validate_structure(structure: MulticubeStructure) -> ValidationReport:
    return structure.validate()


def enumerate_edge_orbits(structure: MulticubeStructure) -> list:
    return structure.edge_orbits()


def enumerate_vertex_stars(structure: MulticubeStructure) -> list:
    return structure.vertex_stars()
