"""Collocation mesh, biharmonic operator, solver, and factor cache."""

import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from manifold_forge.spectral_solver import (
    CacheError,
    DEFAULT_MAX_N_3D,
    ResolutionError,
    assemble,
    build_mesh,
    cache_dir,
    cache_path,
    check_resolution,
    condition_estimate,
    differentiation_matrix,
    face_label,
    factor,
    gauss_lobatto_nodes,
    solve,
)


# ---------------------------------------------------------------------------
# nodes and differentiation


def test_nodes_ascending_with_unit_endpoints():
    for N in (6, 9, 16):
        x = gauss_lobatto_nodes(N)
        assert x.shape == (N,)
        assert x[0] == -1.0 and x[-1] == 1.0
        assert np.all(np.diff(x) > 0)
        assert np.allclose(x, -x[::-1], atol=1e-15)


def test_build_mesh_scales_to_cube_size():
    mesh = build_mesh(10, 3.0)
    assert mesh.nodes[0] == -1.5 and mesh.nodes[-1] == 1.5
    # derivative of x^3 on the scaled mesh
    d = mesh.D @ mesh.nodes**3
    assert np.allclose(d, 3.0 * mesh.nodes**2, atol=1e-11)


@given(coeffs=st.lists(st.floats(-2.0, 2.0), min_size=1, max_size=9))
@settings(max_examples=80, deadline=None)
def test_differentiation_exact_on_polynomials(coeffs):
    # degree <= N-1 polynomials are differentiated exactly
    N = 9
    x = gauss_lobatto_nodes(N)
    D = differentiation_matrix(N)
    p = np.polynomial.polynomial.polyval(x, coeffs)
    dp = np.polynomial.polynomial.polyval(
        x, np.polynomial.polynomial.polyder(coeffs))
    assert np.max(np.abs(D @ p - dp)) < 1e-10


def test_differentiation_kills_constants():
    D = differentiation_matrix(12)
    assert np.max(np.abs(D @ np.ones(12))) < 1e-13


# ---------------------------------------------------------------------------
# resolution guard


def test_check_resolution_limits():
    with pytest.raises(ResolutionError, match="N >= 6"):
        check_resolution(2, 5)
    with pytest.raises(ResolutionError, match="cap"):
        check_resolution(3, DEFAULT_MAX_N_3D + 1)
    check_resolution(3, DEFAULT_MAX_N_3D + 1, allow_huge=True)
    check_resolution(2, 50)  # 2D sizes are not capped


def test_assemble_rejects_bad_dimension():
    with pytest.raises(ValueError, match="dimension"):
        assemble(4, 8, 2.0)


def test_operator_size():
    assert assemble(2, 8, 2.0).size == 64
    assert assemble(3, 6, 2.0).size == 216


# ---------------------------------------------------------------------------
# manufactured solutions


def _grid(N, L, dim):
    nodes = build_mesh(N, L).nodes
    return np.meshgrid(*([nodes] * dim), indexing="ij"), nodes


def _solve_2d_cubic(N, L=2.0):
    """u = x^3 y, biharmonic with zero source."""
    (X, Y), nodes = _grid(N, L, 2)
    u = X**3 * Y
    half = L / 2.0
    neumann = {
        "+x": 3.0 * half**2 * nodes,
        "-x": -3.0 * half**2 * nodes,
        "+y": nodes**3,
        "-y": -(nodes**3),
    }
    f = factor(assemble(2, N, L))
    return u, solve(f, u, neumann)


def test_biharmonic_2d_cubic_exact():
    for N in (8, 12):
        u, res = _solve_2d_cubic(N)
        assert np.max(np.abs(res.U - u)) < 1e-9
        assert res.dirichlet_residual < 1e-12
        assert res.neumann_residual < 1e-12


def test_biharmonic_3d_cubic_exact():
    N, L = 8, 2.0
    (X, Y, Z), nodes = _grid(N, L, 3)
    u = X**3 * Y * Z
    half = L / 2.0
    yz = np.multiply.outer(nodes, nodes)
    neumann = {
        "+x": 3.0 * half**2 * yz,
        "-x": -3.0 * half**2 * yz,
        "+y": np.multiply.outer(nodes**3, nodes),
        "-y": -np.multiply.outer(nodes**3, nodes),
        "+z": np.multiply.outer(nodes**3, nodes),
        "-z": -np.multiply.outer(nodes**3, nodes),
    }
    res = solve(factor(assemble(3, N, L)), u, neumann)
    assert np.max(np.abs(res.U - u)) < 1e-8


def test_biharmonic_constant_exact():
    for dim in (2, 3):
        N = 8 if dim == 2 else 6
        u = np.full([N] * dim, 3.7)
        res = solve(factor(assemble(dim, N, 2.0)), u, {})
        assert np.max(np.abs(res.U - 3.7)) < 1e-12


def test_biharmonic_2d_with_source_term():
    # u = x^4 y has laplacian^2 u = 24 y
    N, L = 8, 2.0
    (X, Y), nodes = _grid(N, L, 2)
    u = X**4 * Y
    half = L / 2.0
    neumann = {
        "+x": 4.0 * half**3 * nodes,
        "-x": 4.0 * half**3 * nodes,  # x^3 is odd, outward sign flips twice
        "+y": nodes**4,
        "-y": -(nodes**4),
    }
    res = solve(factor(assemble(2, N, L)), u, neumann, source=24.0 * Y)
    assert np.max(np.abs(res.U - u)) < 1e-12


def test_solve_input_validation():
    f = factor(assemble(2, 8, 2.0))
    bad = np.full((8, 8), np.nan)
    with pytest.raises(ValueError, match="Dirichlet"):
        solve(f, bad, {})
    with pytest.raises(ValueError, match="shape"):
        solve(f, np.zeros((8, 8)), {"+x": np.zeros(7)})
    with pytest.raises(ValueError, match="outside dimension"):
        solve(f, np.zeros((8, 8)), {"+z": np.zeros(8)})


def test_face_labels():
    assert face_label(0, 1) == "+x"
    assert face_label(2, 0) == "-z"


def test_condition_estimate_grows_with_resolution():
    k8 = condition_estimate(factor(assemble(2, 8, 2.0)))
    k12 = condition_estimate(factor(assemble(2, 12, 2.0)))
    assert 10.0 < k8 < 100.0
    assert k12 > k8


# ---------------------------------------------------------------------------
# factor cache


def test_factor_cache_round_trip(tmp_path):
    op = assemble(2, 9, 2.0)
    first = factor(op, cache_directory=str(tmp_path))
    assert not first.cache_hit
    name = os.path.basename(cache_path(2, 9, str(tmp_path)))
    assert name == "bihar_2d_N9_v1.lu"
    assert os.path.exists(tmp_path / name)
    second = factor(op, cache_directory=str(tmp_path))
    assert second.cache_hit
    assert np.array_equal(second.lu, first.lu)


def test_factor_cached_solution_matches_fresh(tmp_path):
    op = assemble(2, 8, 2.0)
    fresh = factor(op, cache_directory=str(tmp_path))
    cached = factor(op, cache_directory=str(tmp_path))
    assert cached.cache_hit
    rng = np.random.default_rng(3)
    g = rng.normal(size=(8, 8))
    a = solve(fresh, g, {})
    b = solve(cached, g, {})
    assert np.array_equal(a.U, b.U)


def test_factor_recovers_from_corrupt_cache(tmp_path):
    op = assemble(2, 8, 2.0)
    factor(op, cache_directory=str(tmp_path))
    path = cache_path(2, 8, str(tmp_path))
    with open(path, "wb") as fh:
        fh.write(b"garbage")
    redo = factor(op, cache_directory=str(tmp_path))
    assert not redo.cache_hit
    # the rewrite leaves a valid file behind
    assert factor(op, cache_directory=str(tmp_path)).cache_hit


def test_factor_use_cache_false_writes_nothing(tmp_path):
    op = assemble(2, 8, 2.0)
    f = factor(op, cache_directory=str(tmp_path), use_cache=False)
    assert not f.cache_hit
    assert list(tmp_path.iterdir()) == []


def test_cache_dir_resolution(tmp_path, monkeypatch):
    assert cache_dir(str(tmp_path)) == str(tmp_path)
    monkeypatch.setenv("MCUBE_CACHE_DIR", str(tmp_path / "env"))
    assert cache_dir() == str(tmp_path / "env")
