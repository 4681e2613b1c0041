"""Corner metrics, the partition of unity, and the blended C0 field."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from manifold_forge import catalog
from manifold_forge.c0_metric import (
    CORNER_SIGNS,
    DEFAULT_PARTITION,
    DegenerateCornerError,
    MetricField,
    PartitionParams,
    assign_dihedral_angles,
    blend_weight,
    build_corner_metrics,
    c0_metric_at,
    corner_flat_metric,
    gram_determinant,
    grid_points,
    invert_symmetric3,
    partition_weights,
    sample_c0_field,
)
from manifold_forge.diagnostics import junction_report

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# corner flat metrics


def test_corner_metric_all_plus_corner_frozen():
    psi = TWO_PI / 5.0
    e = corner_flat_metric(psi, psi, psi, ("+x", "+y", "+z"))
    c = -np.cos(psi)  # = -0.30901699437494745
    assert e[0, 0] == e[1, 1] == e[2, 2] == 1.0
    assert e[0, 1] == pytest.approx(-0.30901699437494745, abs=1e-15)
    assert e[0, 2] == pytest.approx(c, abs=1e-15)
    assert e[1, 2] == pytest.approx(c, abs=1e-15)
    assert np.array_equal(e, e.T)


def test_corner_metric_sign_pattern_follows_corner_labels():
    # flipping one axis label flips the sign of the two couplings that
    # involve that axis and leaves the third alone
    psi = TWO_PI / 5.0
    base = corner_flat_metric(psi, psi, psi, ("+x", "+y", "+z"))
    flipped = corner_flat_metric(psi, psi, psi, ("-x", "+y", "+z"))
    assert flipped[0, 1] == pytest.approx(-base[0, 1], abs=1e-15)
    assert flipped[0, 2] == pytest.approx(-base[0, 2], abs=1e-15)
    assert flipped[1, 2] == pytest.approx(base[1, 2], abs=1e-15)


def test_corner_metric_right_angles_is_identity():
    e = corner_flat_metric(np.pi / 2, np.pi / 2, np.pi / 2, ("+x", "-y", "+z"))
    assert np.allclose(e, np.eye(3), atol=1e-16)


def test_corner_metric_three_largest_flat_angles_has_det_half():
    # 2*pi/3 on all three pairs is the tightest corner that occurs in the
    # bundled structures; its Gram determinant is exactly 1/2
    psi = TWO_PI / 3.0
    e = corner_flat_metric(psi, psi, psi, ("+x", "+y", "+z"))
    assert np.linalg.det(e) == pytest.approx(0.5, abs=1e-14)
    assert gram_determinant(psi, psi, psi) == pytest.approx(0.5, abs=1e-14)


def test_corner_metric_degenerate_angles_rejected():
    psi = np.pi / 3.0
    assert gram_determinant(psi, psi, psi) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(DegenerateCornerError):
        corner_flat_metric(psi, psi, psi, ("+x", "+y", "+z"))


@given(
    psi_xy=st.floats(1.8, 2.4),
    psi_xz=st.floats(1.8, 2.4),
    psi_yz=st.floats(1.8, 2.4),
)
@settings(max_examples=60, deadline=None)
def test_gram_determinant_matches_direct_determinant(psi_xy, psi_xz, psi_yz):
    # angles comfortably inside the nondegenerate band
    e = corner_flat_metric(psi_xy, psi_xz, psi_yz, ("+x", "+y", "+z"))
    assert np.linalg.det(e) == pytest.approx(
        gram_determinant(psi_xy, psi_xz, psi_yz), abs=1e-13)


def test_catalog_corner_determinants_bounded_below():
    # every bundled structure keeps all corner Gram determinants >= 1/2,
    # so the blended inverse metric stays uniformly positive definite
    for name in catalog.list_names():
        entry = catalog.get(name)
        table = build_corner_metrics(entry.structure)
        worst = min(float(np.linalg.det(table.inverse[rid]).min())
                    for rid in entry.structure.region_ids)
        assert worst > 0.499, name


def test_corner_table_inverse_pairs():
    entry = catalog.get("poincare")
    table = build_corner_metrics(entry.structure)
    rid = entry.structure.region_ids[0]
    assert table.inverse[rid].shape == (8, 3, 3)
    prod = np.einsum("cab,cbd->cad", table.metric[rid], table.inverse[rid])
    assert np.allclose(prod, np.eye(3), atol=1e-13)


def test_invert_symmetric3_round_trip():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(40, 3, 3))
    spd = np.einsum("nab,ncb->nac", a, a) + 3.0 * np.eye(3)
    inv = invert_symmetric3(spd)
    assert np.allclose(np.einsum("nab,nbc->nac", spd, inv), np.eye(3),
                       atol=1e-12)


# ---------------------------------------------------------------------------
# dihedral angle assignment


def test_dihedral_assignment_three_torus_all_right_angles():
    entry = catalog.get("three-torus")
    angles = assign_dihedral_angles(entry.structure)
    assert len(angles.by_slot) == 12 * len(entry.structure.region_ids)
    assert all(a == pytest.approx(np.pi / 2) for a in angles.by_slot.values())


def test_dihedral_assignment_poincare_orbit_angles():
    entry = catalog.get("poincare")
    angles = assign_dihedral_angles(entry.structure)
    values = sorted(set(round(a, 12) for a in angles.by_slot.values()))
    expected = sorted(round(TWO_PI / k, 12) for k in (3, 4, 5))
    assert values == expected
    # each orbit of length K covers K slots
    from collections import Counter
    counts = Counter(round(a, 12) for a in angles.by_slot.values())
    assert counts[round(TWO_PI / 3, 12)] == 3 * 20
    assert counts[round(TWO_PI / 4, 12)] == 4 * 30
    assert counts[round(TWO_PI / 5, 12)] == 5 * 12


def test_dihedral_angle_lookup_ignores_label_order():
    entry = catalog.get("poincare")
    angles = assign_dihedral_angles(entry.structure)
    rid = entry.structure.region_ids[0]
    assert angles.angle(rid, "+x", "-y") == angles.angle(rid, "-y", "+x")


# ---------------------------------------------------------------------------
# blend profile and partition of unity


def test_blend_weight_endpoints_exact():
    assert blend_weight(0.0) == 1.0
    assert blend_weight(1.0) == 0.0
    assert blend_weight(-1.0) == 0.0
    assert blend_weight(1.5) == 0.0
    assert blend_weight(-7.0) == 0.0


@given(s=st.floats(0.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_blend_weight_partition_identity(s):
    assert abs(blend_weight(s) + blend_weight(1.0 - s) - 1.0) < 1e-14


@given(s=st.floats(0.0, 1.0), k=st.integers(1, 4), ell=st.integers(1, 4))
@settings(max_examples=100, deadline=None)
def test_blend_weight_partition_identity_any_order(s, k, ell):
    params = PartitionParams(k=k, ell=ell)
    assert abs(blend_weight(s, params)
               + blend_weight(1.0 - s, params) - 1.0) < 1e-14


@given(s=st.floats(-1.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_blend_weight_even_and_bounded(s):
    h = blend_weight(s)
    assert blend_weight(-s) == h
    assert -1e-15 <= h <= 1.0 + 1e-15


def test_partition_weights_sum_to_one_at_1000_points():
    rng = np.random.default_rng(2024)
    L = 2.3
    pts = rng.uniform(-0.5 * L, 0.5 * L, size=(1000, 3))
    u = partition_weights(pts, L)
    assert u.shape == (1000, 8)
    assert np.all(u >= 0.0)
    assert np.max(np.abs(u.sum(axis=-1) - 1.0)) < 1e-14


def test_partition_weights_center_and_corner():
    L = 2.0
    at_center = partition_weights(np.zeros(3), L)
    assert np.allclose(at_center, 0.125, atol=1e-15)
    corner = 0.5 * L * CORNER_SIGNS[0]
    at_corner = partition_weights(corner, L)
    expected = np.zeros(8)
    expected[0] = 1.0
    assert np.array_equal(at_corner, expected)


def test_partition_weights_face_center_splits_four_ways():
    L = 2.0
    point = np.array([0.5 * L, 0.0, 0.0])
    u = partition_weights(point, L)
    on_face = CORNER_SIGNS[:, 0] > 0
    assert np.allclose(u[on_face], 0.25, atol=1e-15)
    assert np.all(u[~on_face] == 0.0)


def test_partition_weights_rejects_outside_points():
    with pytest.raises(ValueError, match="outside"):
        partition_weights(np.array([1.01, 0.0, 0.0]), 2.0)


# ---------------------------------------------------------------------------
# sampled fields


def test_metric_field_stage_tags():
    data = {0: np.zeros((6, 2, 2, 2))}
    with pytest.raises(ValueError, match="stage"):
        MetricField(stage="bogus", N=2, L=1.0, data=data)
    assert MetricField(stage="c0", N=2, L=1.0, data=data).is_metric
    assert not MetricField(stage="gauge_delta", N=2, L=1.0, data=data).is_metric


def test_metric_field_matrix_round_trip():
    rng = np.random.default_rng(5)
    raw = rng.normal(size=(4, 4, 4, 3, 3))
    sym = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    field = MetricField.from_matrices("c0", 4, 1.0, {7: sym})
    assert np.array_equal(field.matrices(7), sym)
    assert field.data[7].shape == (6, 4, 4, 4)


def test_check_positive_definite_catches_tampering():
    entry = catalog.get("three-torus")
    field = sample_c0_field(entry.structure, 6)
    field.check_positive_definite(tol=0.3)
    bad = field.copy()
    bad.data[next(iter(bad.data))][0, 0, 0, 0] = -1.0
    with pytest.raises(FloatingPointError, match="positive definite"):
        bad.check_positive_definite()


def test_three_torus_c0_field_is_flat_identity():
    entry = catalog.get("three-torus")
    field = sample_c0_field(entry.structure, 8)
    comp = field.data[entry.structure.region_ids[0]]
    # every corner metric is the identity up to the roundoff in cos(pi/2)
    for off in (1, 2, 4):
        assert np.max(np.abs(comp[off])) < 1e-15
    for diag in (0, 3, 5):
        assert np.max(np.abs(comp[diag] - 1.0)) < 1e-14


def test_pointwise_and_sampled_metric_agree():
    entry = catalog.get("l52")
    structure = entry.structure
    N = 7
    field = sample_c0_field(structure, N)
    table = build_corner_metrics(structure)
    rid = structure.region_ids[0]
    local = grid_points(N, structure.L)
    probe = local[2, 3, 5] + structure.center(rid)
    lower, upper = c0_metric_at(structure, table, rid, probe)
    assert np.allclose(lower, field.matrices(rid)[2, 3, 5], atol=1e-15)
    assert np.allclose(lower @ upper, np.eye(3), atol=1e-13)


def test_c0_field_positive_definite_on_curved_catalog_entries():
    for name in ("poincare", "seifert-weber", "sixth-turn"):
        entry = catalog.get(name)
        field = sample_c0_field(entry.structure, 6)
        field.check_positive_definite(tol=0.1)


def test_c0_field_continuous_across_interfaces(sixth_turn):
    # the corner construction matches angles across every face map, so
    # the blended field is already continuous before any refinement
    field = sample_c0_field(sixth_turn, 8)
    report = junction_report(sixth_turn, field)
    assert report.metric_jump_l2 < 1e-13


def test_c0_field_continuous_on_poincare(poincare, poincare_build8):
    report = junction_report(poincare, poincare_build8.stages["c0"])
    assert report.metric_jump_l2 < 1e-13
