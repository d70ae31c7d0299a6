import numpy as np
import pytest

from app.services.cis import (
    GriddedInvariantSet, cell_centers, compute_cis, inner_box, input_lattice, verify_invariance,
)
from app.services.sets import BoxSet
from app.utils.errors import EmptyInvariantSet

U = BoxSet([-1.0], [1.0])


def test_cell_centers_and_input_lattice():
    centers = cell_centers(BoxSet([0.0, 10.0], [1.0, 20.0]), (2, 5))
    assert centers.shape == (2, 5, 2)
    np.testing.assert_allclose(centers[0, 0], [0.25, 11.0])
    np.testing.assert_allclose(centers[1, 4], [0.75, 19.0])
    assert input_lattice(BoxSet([3.0], [3.0]), (7,)).shape == (1, 1)


def test_stationary_witness_keeps_every_cell(integrator):
    cis = compute_cis(integrator, BoxSet([0.0], [1.0]), U, (10,), (5,))
    assert cis.membership.all()
    assert inner_box(cis) == BoxSet([0.0], [1.0])


def test_unstable_scalar_kernel_is_unit_interval(unstable):
    cis = compute_cis(unstable, BoxSet([-2.0], [2.0]), U, (200,), (201,))
    bbox = cis.member_bounding_box()
    cw = cis.cell_width[0]
    assert abs(bbox.lb[0] + 1.0) <= cw + 1e-9
    assert abs(bbox.ub[0] - 1.0) <= cw + 1e-9
    idx = np.flatnonzero(cis.membership)
    assert np.all(np.diff(idx) == 1)
    assert cis.iterations <= cis.membership.size


def test_member_cells_carry_witness_inputs(unstable):
    cis = compute_cis(unstable, BoxSet([-2.0], [2.0]), U, (40,), (81,))
    w = cis.witness_inputs[..., 0]
    assert np.all(np.isfinite(w[cis.membership]))
    assert np.all(np.isnan(w[~cis.membership]))
    assert np.all(np.abs(w[cis.membership]) <= 1.0)


def test_inner_box_of_unstable_scalar_is_verified(unstable):
    cis = compute_cis(unstable, BoxSet([-2.0], [2.0]), U, (200,), (201,))
    box = inner_box(cis, unstable, samples=200)
    assert box.is_subset_of(cis.member_bounding_box())
    assert abs(box.lb[0] + 1.0) <= cis.cell_width[0] + 1e-9
    assert abs(box.ub[0] - 1.0) <= cis.cell_width[0] + 1e-9
    assert verify_invariance(unstable, box, U, samples=200).passed


def test_infeasible_input_empties_the_set(unstable):
    with pytest.raises(EmptyInvariantSet):
        compute_cis(unstable, BoxSet([-1.0], [1.0]), BoxSet([5.0], [5.0]), (20,), (3,))


def test_l_shaped_membership_picks_larger_rectangle():
    member = np.zeros((7, 7), dtype=bool)
    member[3:7, 3:6] = True
    member[3:5, 3:7] = True
    cis = GriddedInvariantSet(
        region=BoxSet([0.0, 0.0], [7.0, 7.0]),
        cells_per_axis=(7, 7),
        membership=member,
        witness_inputs=np.zeros((7, 7, 1)),
        input_bounds=BoxSet([0.0], [0.0]),
        inputs_per_axis=(1,),
    )
    box = inner_box(cis)
    np.testing.assert_allclose(box.lb, [3.0, 3.0])
    np.testing.assert_allclose(box.ub, [7.0, 6.0])
    assert box.is_subset_of(cis.member_bounding_box())


def test_equilibrium_point_passes_with_zero_margin(integrator):
    report = verify_invariance(integrator, BoxSet.point([0.3]), U, samples=20)
    assert report.passed
    assert abs(report.worst_margin) <= 1e-9


def test_escaping_candidate_fails(unstable):
    report = verify_invariance(unstable, BoxSet([-1.5], [1.5]), U, samples=100)
    assert not report.passed
    assert report.worst_margin < 0
    assert abs(report.counterexample[0]) > 1.0


def test_nested_regions_give_nested_members(unstable):
    half_u = BoxSet([-0.5], [0.5])
    big = compute_cis(unstable, BoxSet([-2.0], [2.0]), half_u, (200,), (101,))
    small = compute_cis(unstable, BoxSet([-0.4], [0.4]), half_u, (40,), (101,))
    # 小区域的 40 个单元与大区域的第 80..119 个单元重合
    assert np.all(big.membership[80:120][small.membership])


def test_compute_cis_is_deterministic(unstable):
    a = compute_cis(unstable, BoxSet([-2.0], [2.0]), U, (100,), (101,))
    b = compute_cis(unstable, BoxSet([-2.0], [2.0]), U, (100,), (101,))
    assert np.array_equal(a.membership, b.membership)
    assert np.array_equal(a.witness_inputs, b.witness_inputs, equal_nan=True)
    assert inner_box(a) == inner_box(b)


def test_rejects_mismatched_grid(unstable):
    with pytest.raises(ValueError):
        compute_cis(unstable, BoxSet([-2.0], [2.0]), U, (10, 10), (11,))


@pytest.mark.slow
def test_cstr_zone_kernel_verifies(cstr):
    target = BoxSet([0.0, 348.0], [1.0, 352.0])
    cis = compute_cis(cstr, target, BoxSet([285.0], [315.0]), (40, 40), (61,))
    assert 0 < cis.member_fraction < 1
    box = inner_box(cis, cstr, samples=500)
    assert box.is_subset_of(target)
    assert verify_invariance(cstr, box, BoxSet([285.0], [315.0]), samples=500).passed
