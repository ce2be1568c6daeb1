import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridmim.errors import ConfigError, DimensionError, FormatError
from hybridmim.masking import GridSpec, MaskPlan, apply_mask, make_plan, masked_count, select_target_region

G64 = GridSpec((64, 64, 64), 32, 16)


@st.composite
def grids(draw):
    s2 = draw(st.sampled_from([1, 2, 4]))
    dims = [draw(st.integers(1, 3)) for _ in range(3)]
    return GridSpec(tuple(2 * s2 * d for d in dims), 2 * s2, s2)


def test_ratio_zero_and_one():
    empty, full = make_plan(G64, 0.0, 0), make_plan(G64, 1.0, 0)
    assert empty.n_masked == 0 and not empty.location_labels.any()
    assert np.all(empty.count_labels[:, 0] == 1)
    assert full.n_masked == 64 and full.location_labels.all()
    assert np.all(full.count_labels[:, 8] == 1)


def test_ratio_point_four_on_64_cube_masks_26():
    plan = make_plan(G64, 0.4, 11)
    assert plan.n_masked == 26
    recount = [sum(plan.masked[8 * r + k] for k in range(8)) for r in range(8)]
    assert list(plan.counts) == recount
    assert [int(np.argmax(row)) for row in plan.count_labels] == recount


def test_rounding_rule_is_half_up():
    assert masked_count(0.5, 5) == 3
    assert masked_count(0.25, 2) == 1
    assert masked_count(0.4, 64) == 26


@given(grids(), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_count_and_label_consistency(grid, ratio, seed):
    plan = make_plan(grid, ratio, seed)
    assert plan.n_masked == int(np.floor(ratio * grid.n_patches + 0.5))
    np.testing.assert_array_equal(plan.count_labels.argmax(axis=1), plan.location_labels.sum(axis=1))
    assert plan.count_labels.sum() == grid.n_subvolumes


def test_plan_is_deterministic_and_seeds_differ():
    assert make_plan(G64, 0.4, 5) == make_plan(G64, 0.4, 5)
    plans = {make_plan(G64, 0.4, s).masked.tobytes() for s in range(100)}
    assert len(plans) == 100


def test_patch_order_within_subvolume():
    grid = GridSpec((4, 4, 4), 4, 2)
    for k in range(8):
        masked = np.zeros(8, bool)
        masked[k] = True
        vm = MaskPlan(grid, 0.125, masked).voxel_mask()
        a, b, c = k >> 2, (k >> 1) & 1, k & 1
        expected = np.zeros((4, 4, 4), bool)
        expected[2 * a:2 * a + 2, 2 * b:2 * b + 2, 2 * c:2 * c + 2] = True
        np.testing.assert_array_equal(vm, expected)


def test_subvolume_order_is_c_order():
    grid = GridSpec((4, 2, 2), 2, 1)
    masked = np.zeros(grid.n_patches, bool)
    masked[8:16] = True  # sub-volume 1 = grid cell (1, 0, 0)
    vm = MaskPlan(grid, 0.5, masked).voxel_mask()
    assert vm[2:].all() and not vm[:2].any()


def test_apply_mask_zero_patches_is_identity(rng):
    x = rng.normal(size=(1, 64, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(apply_mask(x, make_plan(G64, 0.0, 0)), x)


def test_apply_mask_voxel_sum():
    out = apply_mask(np.ones((64, 64, 64), np.float32), make_plan(G64, 0.4, 3))
    assert out.sum() == 64**3 - 26 * 16**3 == 155648


@given(grids(), st.floats(0, 1), st.integers(0, 1000), st.floats(-3, 3))
def test_apply_mask_keeps_unmasked_voxels_bit_exact(grid, ratio, seed, fill):
    x = np.random.default_rng(seed).normal(size=(2,) + grid.volume_shape).astype(np.float32)
    plan = make_plan(grid, ratio, seed)
    out = apply_mask(x, plan, fill)
    vm = plan.voxel_mask()
    np.testing.assert_array_equal(out[:, ~vm], x[:, ~vm])
    assert np.all(out[:, vm] == np.float32(fill))


def test_apply_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        apply_mask(np.zeros((32, 32, 32)), make_plan(G64, 0.4, 0))


@pytest.mark.parametrize("shape,s1,s2", [((64, 64, 60), 32, 16), ((64,) * 3, 32, 8), ((64,) * 3, 0, 0)])
def test_grid_validation(shape, s1, s2):
    with pytest.raises(ConfigError):
        GridSpec(shape, s1, s2)


def test_ratio_out_of_range():
    with pytest.raises(ConfigError):
        make_plan(G64, 1.5, 0)


# -- binary record --------------------------------------------------------------------

@given(grids(), st.floats(0, 1), st.integers(0, 1000))
def test_plan_round_trip(grid, ratio, seed):
    plan = make_plan(grid, ratio, seed)
    assert MaskPlan.from_bytes(plan.to_bytes()) == plan


def test_plan_record_errors():
    blob = make_plan(G64, 0.4, 0).to_bytes()
    with pytest.raises(FormatError) as err:
        MaskPlan.from_bytes(b"XXXX" + blob[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError) as err:
        MaskPlan.from_bytes(blob[:-1])
    assert err.value.offset == len(blob) - 8
    with pytest.raises(FormatError):
        MaskPlan.from_bytes(blob[:10])


# -- target region -----------------------------------------------------------------------

def test_region_full_extent_selects_all():
    assert select_target_region(G64, 64).size == 8


def test_region_96_cube_64_closed_boundary():
    # centres 16/48/80 all lie on or inside [16, 80]
    region = select_target_region(GridSpec((96,) * 3, 32, 16), 64)
    assert region.size == 27


def test_region_64_cube_32_closed_boundary():
    assert select_target_region(G64, 32).size == 8


def test_region_centre_enumeration():
    grid = GridSpec((128, 128, 128), 16, 8)
    region = select_target_region(grid, 48)
    s1 = 16
    brute = [r for r, (a, b, c) in enumerate(itertools.product(range(8), repeat=3))
             if all(40 <= (i + 0.5) * s1 <= 88 for i in (a, b, c))]
    assert list(region.selected_subvolumes) == brute
    assert region.voxel_box() == ((32, 96),) * 3


def test_region_too_small_or_large():
    with pytest.raises(ConfigError):
        select_target_region(G64, 16)
    with pytest.raises(ConfigError):
        select_target_region(G64, 96)
