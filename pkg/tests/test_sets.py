import numpy as np
import pytest

from app.services.dynamics import build_cstr_model, linear_model
from app.services.sets import (
    BoxSet, ShrinkageSpec, ZoneCostSpec, estimate_xd_max, estimate_xd_max_at_point,
    shrink_target, zone_cost,
)
from app.utils.errors import EmptyModifiedSet, EmptySet

TARGET = BoxSet([0.0, 348.0], [1.0, 352.0])


# ---------- BoxSet ----------

def test_box_basics():
    box = BoxSet([0.0, 1.0], [2.0, 5.0])
    assert box.dim == 2
    np.testing.assert_array_equal(box.center, [1.0, 3.0])
    assert box.contains([1.0, 5.0])
    assert not box.contains([2.1, 3.0])
    assert box.signed_margin([1.0, 3.0]) == pytest.approx(1.0)
    assert box.signed_margin([3.0, 3.0]) == pytest.approx(-1.0)
    assert BoxSet.from_dict(box.to_dict()) == box


def test_box_corners_first_axis_slowest():
    corners = BoxSet([0.0, 10.0], [1.0, 20.0]).corners()
    np.testing.assert_array_equal(corners, [[0, 10], [0, 20], [1, 10], [1, 20]])


def test_invalid_box_signals_empty_set():
    bad = BoxSet([1.0], [0.0])
    assert not bad.is_valid()
    with pytest.raises(EmptySet):
        bad.validate()
    with pytest.raises(EmptySet):
        zone_cost([0.5], ZoneCostSpec(1.0, 1.0, bad))


def test_box_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        BoxSet([0.0, 1.0], [1.0])


# ---------- zone cost ----------

def test_zone_cost_examples():
    spec = ZoneCostSpec(1.0, 1.0, TARGET)
    assert zone_cost([0.5, 350.0], spec) == 0.0
    assert zone_cost([353.0], ZoneCostSpec(1.0, 1.0, BoxSet([348.0], [352.0]))) == pytest.approx(2.0)
    assert zone_cost([1.2, 353.0], spec) == pytest.approx(2.24)


def test_zone_cost_weights_validated():
    with pytest.raises(ValueError):
        ZoneCostSpec(-1.0, 1.0, TARGET)
    with pytest.raises(ValueError):
        ZoneCostSpec(0.0, 0.0, TARGET)


def test_zone_cost_matches_brute_force_slack_minimization():
    rng = np.random.default_rng(0)
    spec = ZoneCostSpec(1.0, 1.0, TARGET)
    points = rng.uniform([-0.5, 340.0], [1.5, 360.0], size=(200, 2))
    axes = [np.linspace(TARGET.lb[i], TARGET.ub[i], 200) for i in range(2)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    spacing = TARGET.width / 199

    closed = zone_cost(points, spec)
    for x, c in zip(points, closed):
        d = np.abs(x - grid)
        brute = np.min(d.sum(axis=-1) + (d * d).sum(axis=-1))
        r = TARGET.residual(x)
        bound = np.sum(spacing) + np.sum(2 * r * spacing + spacing ** 2)
        assert c <= brute + 1e-9
        assert brute - c <= bound


def test_zone_cost_zero_iff_inside():
    rng = np.random.default_rng(1)
    spec = ZoneCostSpec(2.0, 3.0, TARGET)
    points = rng.uniform([-0.5, 346.0], [1.5, 354.0], size=(500, 2))
    costs = zone_cost(points, spec)
    np.testing.assert_array_equal(costs == 0.0, TARGET.contains(points))


def test_zone_cost_midpoint_convexity():
    rng = np.random.default_rng(2)
    spec = ZoneCostSpec(1e4, 1e4, TARGET)
    a = rng.uniform([-0.5, 340.0], [1.5, 360.0], size=(300, 2))
    b = rng.uniform([-0.5, 340.0], [1.5, 360.0], size=(300, 2))
    mid = zone_cost(0.5 * (a + b), spec)
    avg = 0.5 * (zone_cost(a, spec) + zone_cost(b, spec))
    assert np.all(mid <= avg + 1e-9 * np.maximum(1.0, avg))


# ---------- shrinkage ----------

def test_zero_shrink_is_identity():
    spec = ShrinkageSpec(gamma=0.0, tracked_mask=(1, 1), xd_max=(0.3, 0.5))
    assert shrink_target(TARGET, spec) == TARGET


def test_shrink_temperature_band():
    spec = ShrinkageSpec(gamma=1.0, tracked_mask=(0, 1), xd_max=(0.2, 0.511))
    out = shrink_target(TARGET, spec)
    np.testing.assert_allclose(out.lb, [0.0, 348.511])
    np.testing.assert_allclose(out.ub, [1.0, 351.489])
    assert out.is_subset_of(TARGET)


def test_shrink_too_large_raises():
    spec = ShrinkageSpec(gamma=1.0, tracked_mask=(1,), xd_max=(0.6,))
    with pytest.raises(EmptyModifiedSet):
        shrink_target(BoxSet([0.0], [1.0]), spec)


def test_shrink_uses_magnitude_and_scales_linearly():
    one = ShrinkageSpec(gamma=0.7, tracked_mask=(1, 1), xd_max=(-0.1, 0.4))
    two = ShrinkageSpec(gamma=1.4, tracked_mask=(1, 1), xd_max=(-0.1, 0.4))
    assert np.all(one.s >= 0)
    np.testing.assert_allclose(two.s, 2 * one.s, rtol=1e-15)
    assert shrink_target(TARGET, two).is_subset_of(shrink_target(TARGET, one))


def test_one_sided_shrink():
    spec = ShrinkageSpec(gamma=1.0, tracked_mask=(0, 1), xd_max=(0.0, 0.5),
                         lower_mask=(1, 0), upper_mask=(1, 1))
    out = shrink_target(TARGET, spec)
    np.testing.assert_allclose(out.lb, [0.0, 348.0])
    np.testing.assert_allclose(out.ub, [1.0, 351.5])


def test_shrinkage_spec_validation():
    with pytest.raises(ValueError):
        ShrinkageSpec(gamma=-1.0, tracked_mask=(1,), xd_max=(0.1,))
    with pytest.raises(ValueError):
        ShrinkageSpec(gamma=1.0, tracked_mask=(1, 0), xd_max=(0.1,))


# ---------- x^d_max ----------

E = np.array([[1.0, 2.0], [0.0, 1.0]])
W = BoxSet([-0.1, -2.0], [0.1, 2.0])


def _linear():
    return linear_model(np.eye(2), [[1.0], [0.0]], E)


def test_xd_max_zero_disturbance(cstr):
    est = estimate_xd_max(cstr, BoxSet([0.4, 349.0], [0.6, 351.0]), BoxSet([285.0], [315.0]),
                          BoxSet([0.0, 0.0], [0.0, 0.0]), (0, 1))
    np.testing.assert_array_equal(est.xd_max, [0.0, 0.0])


def test_xd_max_linear_corner_enumeration():
    est = estimate_xd_max(_linear(), BoxSet([0.0, 0.0], [1.0, 1.0]), BoxSet([-1.0], [1.0]), W, (1, 1))
    hand = max(np.linalg.norm(E @ w) for w in W.corners())
    assert est.norm == pytest.approx(hand, rel=1e-8)
    np.testing.assert_allclose(np.abs(est.xd_max), [4.1, 2.0], rtol=1e-8)
    np.testing.assert_allclose(np.abs(est.w), [0.1, 2.0])
    assert set(est.to_dict()) == {"xd_max", "argmax_x", "argmax_u", "argmax_w", "corner_index"}


def test_xd_max_mask_zeroes_untracked():
    est = estimate_xd_max(_linear(), BoxSet([0.0, 0.0], [1.0, 1.0]), BoxSet([-1.0], [1.0]), W, (0, 1))
    assert est.xd_max[0] == 0.0
    assert abs(est.xd_max[1]) == pytest.approx(2.0, rel=1e-8)


def test_xd_max_monotone_in_disturbance_box():
    rng = np.random.default_rng(3)
    for _ in range(20):
        E_rand = rng.normal(size=(2, 2))
        model = linear_model(np.eye(2), [[1.0], [1.0]], E_rand)
        inner_lb = -rng.uniform(0.0, 1.0, 2)
        inner_ub = rng.uniform(0.0, 1.0, 2)
        inner = BoxSet(inner_lb, inner_ub)
        outer = BoxSet(inner_lb - rng.uniform(0.0, 1.0, 2), inner_ub + rng.uniform(0.0, 1.0, 2))
        box, U = BoxSet([0.0, 0.0], [1.0, 1.0]), BoxSet([0.0], [1.0])
        small = estimate_xd_max(model, box, U, inner, (1, 1)).norm
        large = estimate_xd_max(model, box, U, outer, (1, 1)).norm
        assert large >= small - 1e-9


def test_xd_max_at_point_matches_full_enumeration_for_linear():
    model = _linear()
    full = estimate_xd_max(model, BoxSet([0.0, 0.0], [1.0, 1.0]), BoxSet([-1.0], [1.0]), W, (1, 1))
    local = estimate_xd_max_at_point(model, [0.5, 0.5], [0.0], W, (1, 1))
    assert local.norm == pytest.approx(full.norm, rel=1e-8)

def test_cstr_xd_max_on_temperature_axis(cstr):
    est = estimate_xd_max(cstr, BoxSet([0.4, 348.0], [0.6, 352.0]), BoxSet([285.0], [315.0]), W, (0, 1))
    assert est.xd_max[0] == 0.0
    assert est.w[1] in (-2.0, 2.0)


@pytest.mark.parametrize("sample_time, ca_high, expected", [
    (0.08, 0.7625, 0.5351),
    (0.1, 0.775, 1.2675),
])
def test_cstr_xd_max_argmax_face(sample_time, ca_high, expected):
    # CIS(X_t) 外包盒 (80x80 网格) 上的估计, 最大值在高浓度 / 高温 / 最大冷却温度面
    model = build_cstr_model(sample_time=sample_time)
    cis_box = BoxSet([0.25, 348.0], [ca_high, 352.0])
    est = estimate_xd_max(model, cis_box, BoxSet([285.0], [315.0]), W, (0, 1))
    assert est.norm == pytest.approx(expected, rel=1e-2)
    assert est.xd_max[1] > 0
    np.testing.assert_allclose(est.x, [ca_high, 352.0])
    np.testing.assert_allclose(est.u, [315.0])
    np.testing.assert_allclose(est.w, [0.1, 2.0])
