"""Pseudo-spectral biharmonic boundary-value solver.

Collocation on Chebyshev-Gauss-Lobatto nodes.  The fourth-order operator
(Laplacian squared) is assembled densely with replaced boundary rows:

* outer-layer nodes carry the Neumann condition (outward normal derivative);
  nodes shared by several domain faces carry the average of those faces'
  conditions,
* second-layer nodes carry the Dirichlet condition, enforcing the value of
  the solution at the nearest outer-layer node along each near-boundary
  axis (averaged when more than one axis is near a boundary),
* remaining interior nodes carry the biharmonic stencil.

Rows are equilibrated so every row group is O(1): interior rows are scaled
by N^-4 and Neumann rows by N^-2 (one factor N^2 per derivative order);
Dirichlet rows are already O(1).  Row scaling does not change the solution,
but it keeps the boundary conditions from being numerically dominated and
makes the condition-number estimate meaningful.

The operator is assembled on the reference domain [-1,1]^dim, so one LU
factorization serves every physical cube size; solve() applies the
chain-rule factors to the Neumann data and the source term instead.  The
factorizations are cached on disk keyed by (dimension, N, layout version).
"""

import hashlib
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

LAYOUT_VERSION = 1
CACHE_ENV = "MCUBE_CACHE_DIR"
DEFAULT_MAX_N_3D = 20

_MAGIC = b"MCLU"

# row roles
ROLE_INTERIOR = 0
ROLE_NEUMANN = 1
ROLE_DIRICHLET = 2


class ResolutionError(ValueError):
    """Requested N outside the supported range."""


class CacheError(RuntimeError):
    """Cache file unusable (wrong key or corrupted)."""


def gauss_lobatto_nodes(N: int) -> np.ndarray:
    """Chebyshev-Gauss-Lobatto nodes on [-1, 1], ascending."""
    if N < 2:
        raise ResolutionError("need at least two nodes")
    return -np.cos(np.pi * np.arange(N) / (N - 1))


def differentiation_matrix(N: int) -> np.ndarray:
    """Spectral differentiation matrix on the CGL nodes.

    Diagonal entries use the negative-sum trick, so the derivative of a
    constant vanishes identically (bitwise zero row sums).
    """
    x = gauss_lobatto_nodes(N)
    c = np.ones(N)
    c[0] = c[-1] = 2.0
    c = c * (-1.0) ** np.arange(N)
    X = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (X + np.eye(N))
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


@dataclass(frozen=True)
class SpectralMesh1D:
    """CGL nodes mapped to [-L/2, L/2] plus the matching derivative matrix."""

    N: int
    L: float
    nodes: np.ndarray
    D: np.ndarray


def build_mesh(N: int, L: float) -> SpectralMesh1D:
    if N < 6:
        raise ResolutionError(f"N={N} too small; layout needs N >= 6")
    nodes = gauss_lobatto_nodes(N) * (L / 2.0)
    D = differentiation_matrix(N) * (2.0 / L)
    return SpectralMesh1D(N, float(L), nodes, D)


def _axis_matrix(dimension: int, axis: int, M: np.ndarray) -> np.ndarray:
    """kron expansion of a 1D matrix acting on one axis of the tensor grid.

    Grid arrays are C-ordered with axis 0 slowest, so axis k gets the k-th
    slot of the kron product.
    """
    N = M.shape[0]
    eye = np.eye(N)
    out = None
    for k in range(dimension):
        term = M if k == axis else eye
        out = term if out is None else np.kron(out, term)
    return out


def _node_multi_indices(dimension: int, N: int) -> np.ndarray:
    """(n, dimension) integer array of grid indices in C order."""
    grids = np.meshgrid(*[np.arange(N)] * dimension, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


@dataclass
class BiharmonicOperator:
    """Dense replaced-row biharmonic operator on the reference domain."""

    dimension: int
    N: int
    L: float
    matrix: np.ndarray
    row_roles: np.ndarray
    # per Neumann row: list of (axis, side) faces averaged into it
    neumann_faces: dict
    # per Dirichlet row: flat indices of the boundary nodes averaged into it
    dirichlet_targets: dict
    interior_scale: float
    neumann_scale: float

    @property
    def size(self) -> int:
        return self.N ** self.dimension


def check_resolution(dimension: int, N: int, allow_huge: bool = False):
    """Refuse sizes the dense factorization cannot reasonably handle."""
    if N < 6:
        raise ResolutionError(f"N={N} too small; layout needs N >= 6")
    if dimension == 3 and N > DEFAULT_MAX_N_3D and not allow_huge:
        raise ResolutionError(
            f"3D N={N} exceeds the default cap {DEFAULT_MAX_N_3D}; "
            "pass allow_huge to override")


def assemble(dimension: int, N: int, L: float,
             allow_huge: bool = False) -> BiharmonicOperator:
    """Build the replaced-row operator matrix.

    dimension 2 or 3; N >= 6.  3D sizes above DEFAULT_MAX_N_3D are refused
    unless allow_huge is set (dense factorization grows as N^9).
    """
    if dimension not in (2, 3):
        raise ValueError("dimension must be 2 or 3")
    check_resolution(dimension, N, allow_huge)

    D = differentiation_matrix(N)
    D2 = D @ D
    D4 = D2 @ D2
    n = N ** dimension

    # Laplacian squared: sum of fourth derivatives plus mixed terms.
    M = _axis_matrix(dimension, 0, D4)
    for a in range(1, dimension):
        M += _axis_matrix(dimension, a, D4)
    for a in range(dimension):
        for b in range(a + 1, dimension):
            Ma = _axis_matrix(dimension, a, D2)
            Mb = _axis_matrix(dimension, b, D2)
            M += 2.0 * (Ma @ Mb)
            del Ma, Mb

    interior_scale = float(N) ** -4
    neumann_scale = float(N) ** -2
    M *= interior_scale

    idx = _node_multi_indices(dimension, N)
    on_outer = (idx == 0) | (idx == N - 1)
    on_second = (idx == 1) | (idx == N - 2)

    roles = np.full(n, ROLE_INTERIOR, dtype=np.int8)
    neumann_faces = {}
    dirichlet_targets = {}

    strides = [N ** (dimension - 1 - k) for k in range(dimension)]

    Drows = {}  # cache of single-axis derivative rows

    def axis_deriv_row(flat, axis):
        key = (flat, axis)
        if key not in Drows:
            row = np.zeros(n)
            i = idx[flat, axis]
            base = flat - i * strides[axis]
            cols = base + np.arange(N) * strides[axis]
            row[cols] = D[i]
            Drows[key] = row
        return Drows[key]

    outer_flat = np.nonzero(on_outer.any(axis=1))[0]
    for flat in outer_flat:
        faces = []
        row = np.zeros(n)
        for axis in range(dimension):
            i = idx[flat, axis]
            if i == 0:
                row -= axis_deriv_row(flat, axis)
                faces.append((axis, 0))
            elif i == N - 1:
                row += axis_deriv_row(flat, axis)
                faces.append((axis, 1))
        M[flat] = row * (neumann_scale / len(faces))
        roles[flat] = ROLE_NEUMANN
        neumann_faces[int(flat)] = faces

    second_flat = np.nonzero((~on_outer.any(axis=1)) & on_second.any(axis=1))[0]
    for flat in second_flat:
        targets = []
        for axis in range(dimension):
            i = idx[flat, axis]
            if i == 1:
                targets.append(flat - strides[axis])
            elif i == N - 2:
                targets.append(flat + strides[axis])
        row = np.zeros(n)
        row[targets] = 1.0 / len(targets)
        M[flat] = row
        roles[flat] = ROLE_DIRICHLET
        dirichlet_targets[int(flat)] = [int(t) for t in targets]

    return BiharmonicOperator(dimension, N, float(L), M, roles,
                              neumann_faces, dirichlet_targets,
                              interior_scale, neumann_scale)


@dataclass
class FactoredBiharmonicOperator:
    """LU factors of an assembled operator plus bookkeeping for reuse."""

    dimension: int
    N: int
    L: float
    lu: np.ndarray
    piv: np.ndarray
    row_roles: np.ndarray
    neumann_faces: dict
    dirichlet_targets: dict
    interior_scale: float
    neumann_scale: float
    max_row_sum: float
    cache_hit: bool = False
    factor_seconds: float = 0.0

    @property
    def size(self) -> int:
        return self.N ** self.dimension


def cache_dir(explicit=None) -> str:
    path = explicit or os.environ.get(CACHE_ENV) \
        or os.path.join(os.path.expanduser("~"), ".cache", "manifold-forge")
    os.makedirs(path, exist_ok=True)
    return path


def cache_path(dimension: int, N: int, directory=None) -> str:
    return os.path.join(cache_dir(directory),
                        f"bihar_{dimension}d_N{N}_v{LAYOUT_VERSION}.lu")


def _write_cache(path, dimension, N, lu, piv, max_row_sum):
    payload = lu.tobytes() + piv.astype("<i8").tobytes()
    checksum = hashlib.sha256(payload).digest()
    header = _MAGIC + struct.pack("<III Q d", LAYOUT_VERSION, dimension, N,
                                  lu.shape[0], max_row_sum) + checksum
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def _read_cache(path, dimension, N):
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC) + struct.calcsize("<III Q d") + 32)
        magic = head[:4]
        if magic != _MAGIC:
            raise CacheError("bad magic")
        version, dim, n_, size, max_row_sum = struct.unpack(
            "<III Q d", head[4:4 + struct.calcsize("<III Q d")])
        checksum = head[-32:]
        if (version, dim, n_) != (LAYOUT_VERSION, dimension, N):
            raise CacheError("key mismatch")
        # read straight into the destination buffer; a large factor file
        # must not be copied around several times
        payload = bytearray(size * size * 8 + size * 8)
        got = fh.readinto(payload)
    if got != len(payload):
        raise CacheError("truncated payload")
    if hashlib.sha256(payload).digest() != checksum:
        raise CacheError("checksum mismatch")
    nbytes = size * size * 8
    lu = np.frombuffer(payload, dtype="<f8", count=size * size).reshape(
        size, size)
    piv = np.frombuffer(payload, dtype="<i8", offset=nbytes).astype(np.intp)
    return lu, piv, max_row_sum


def _spot_check(op: BiharmonicOperator, lu, piv, rows=3) -> float:
    """Relative error of (L@U)[r] against (P@A)[r] on a few rows."""
    n = op.size
    perm = np.arange(n)
    for k, p in enumerate(piv):
        perm[k], perm[p] = perm[p], perm[k]
    rng = np.random.default_rng(12345)
    sel = rng.choice(n, size=min(rows, n), replace=False)
    err = 0.0
    for r in sel:
        # row r of L@U = U[r] + sum_{k<r} L[r,k] U[k], built columnwise to
        # avoid materializing the full triangular factors
        recon = np.zeros(n)
        recon[r:] = lu[r, r:]
        for k in range(r):
            recon[k:] += lu[r, k] * lu[k, k:]
        target = op.matrix[perm[r]]
        scale = max(np.abs(target).max(), 1e-300)
        err = max(err, np.abs(recon - target).max() / scale)
    return err


def factor(op: BiharmonicOperator, cache_directory=None,
           use_cache: bool = True) -> FactoredBiharmonicOperator:
    """LU-factor the operator, loading from / saving to the disk cache."""
    path = cache_path(op.dimension, op.N, cache_directory)
    max_row_sum = float(np.abs(op.matrix).sum(axis=1).max())
    if use_cache and os.path.exists(path):
        try:
            t0 = time.perf_counter()
            lu, piv, cached_row_sum = _read_cache(path, op.dimension, op.N)
            if _spot_check(op, lu, piv) > 1e-12:
                raise CacheError("reconstruction spot-check failed")
            return FactoredBiharmonicOperator(
                op.dimension, op.N, op.L, lu, piv, op.row_roles,
                op.neumann_faces, op.dirichlet_targets, op.interior_scale,
                op.neumann_scale, cached_row_sum, cache_hit=True,
                factor_seconds=time.perf_counter() - t0)
        except (CacheError, OSError, ValueError):
            pass  # fall through and recompute
    # the recorded phase covers computing the factors and persisting
    # them; a later cache hit replaces exactly this span
    t0 = time.perf_counter()
    lu, piv = lu_factor(op.matrix.copy())
    if use_cache:
        lock = path + ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            try:
                _write_cache(path, op.dimension, op.N, lu, piv, max_row_sum)
            finally:
                os.close(fd)
                os.unlink(lock)
        except FileExistsError:
            pass  # another job is writing; skip
    dt = time.perf_counter() - t0
    return FactoredBiharmonicOperator(
        op.dimension, op.N, op.L, lu, piv, op.row_roles,
        op.neumann_faces, op.dirichlet_targets, op.interior_scale,
        op.neumann_scale, max_row_sum, cache_hit=False, factor_seconds=dt)


_FACE_AXIS_SIDE = {
    "-x": (0, 0), "+x": (0, 1),
    "-y": (1, 0), "+y": (1, 1),
    "-z": (2, 0), "+z": (2, 1),
}


def face_label(axis: int, side: int) -> str:
    return ("-" if side == 0 else "+") + "xyz"[axis]


@dataclass
class SolveResult:
    U: np.ndarray
    dirichlet_residual: float
    neumann_residual: float


def solve(f: FactoredBiharmonicOperator, dirichlet, neumann,
          source=None) -> SolveResult:
    """Solve the replaced-row system.

    dirichlet: full-grid array; values are read at outer-layer nodes.
    neumann:   dict face label -> per-face array of the outward normal
               derivative on that face's (N,)/(N,N) grid, indexed by the
               remaining axes in order.  Missing faces default to zero.
    source:    full-grid array read at interior nodes (optional).

    The data is given on the physical cube of size f.L; the chain-rule
    scaling onto the reference-domain operator happens here.
    """
    dim, N, n = f.dimension, f.N, f.size
    h = np.zeros(n)
    dirichlet = np.zeros([N] * dim) if dirichlet is None else np.asarray(dirichlet)
    if not np.all(np.isfinite(dirichlet)):
        raise ValueError("non-finite Dirichlet data")
    flat_dirichlet = dirichlet.reshape(-1)

    neumann = dict(neumann or {})
    face_data = {}
    for label, arr in neumann.items():
        axis, side = _FACE_AXIS_SIDE[label]
        if axis >= dim:
            raise ValueError(f"face {label} outside dimension {dim}")
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (N,) * (dim - 1):
            raise ValueError(f"face {label}: expected shape {(N,)*(dim-1)}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite Neumann data on {label}")
        face_data[(axis, side)] = arr.reshape(-1)

    idx = _node_multi_indices(dim, N)
    neumann_scale = f.neumann_scale * f.L / 2.0

    def face_value(axis, side, flat):
        data = face_data.get((axis, side))
        if data is None:
            return 0.0
        other = [idx[flat, k] for k in range(dim) if k != axis]
        pos = 0
        for k in other:
            pos = pos * N + k
        return data[pos]

    for flat, faces in f.neumann_faces.items():
        val = sum(face_value(axis, side, flat) for axis, side in faces)
        h[flat] = neumann_scale * val / len(faces)

    for flat, targets in f.dirichlet_targets.items():
        h[flat] = flat_dirichlet[targets].mean()

    if source is not None:
        source = np.asarray(source)
        if not np.all(np.isfinite(source)):
            raise ValueError("non-finite source data")
        interior = f.row_roles == ROLE_INTERIOR
        h[interior] = (f.interior_scale * (f.L / 2.0) ** 4
                       * source.reshape(-1)[interior])

    U = lu_solve((f.lu, f.piv), h)
    Ug = U.reshape([N] * dim)

    # raw per-face boundary residuals of the solved field
    outer = f.row_roles == ROLE_NEUMANN
    dres = float(np.abs(U[outer] - flat_dirichlet[outer]).max())
    D = differentiation_matrix(N) * (2.0 / f.L)
    nres = 0.0
    for (axis, side), data in face_data.items():
        dU = np.tensordot(D[0 if side == 0 else N - 1], Ug,
                          axes=([0], [axis]))
        sign = -1.0 if side == 0 else 1.0
        nres = max(nres, float(np.abs(sign * dU - data.reshape(dU.shape)).max()))
    return SolveResult(Ug, dres, nres)


def condition_estimate(f: FactoredBiharmonicOperator) -> float:
    """Lower bound on the infinity-norm condition number.

    max row sum of the operator divided by the smallest |U_ii| of the
    factorization.
    """
    umin = float(np.abs(np.diagonal(f.lu)).min())
    if umin == 0.0:
        raise ZeroDivisionError("singular factorization: zero U diagonal")
    return max(f.max_row_sum / umin, 1.0)
