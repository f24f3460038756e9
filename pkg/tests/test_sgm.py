import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import census_bruteforce, chain_dp_exhaustive, chain_dp_viterbi, path_aggregate_oracle

from surround3d.geometry import default_rig, rectify_pair
from surround3d.scene import gt_disparity, render, sample_scene
from surround3d.sgm import (
    PATHS_8,
    DisparityMap,
    DisparityRangeTooLarge,
    ImageSizeMismatch,
    SgmError,
    SgmParams,
    aggregate_path,
    aggregate_paths,
    census_cost,
    census_transform,
    extract_disparity,
    matching_cost,
    median_filter_valid,
    sgm_disparity,
)


def textured(h=20, w=40, seed=0):
    return np.random.default_rng(seed).random((h, w))


@pytest.fixture(scope="module")
def rendered_pairs():
    rig = default_rig()
    out = []
    for seed in (0, 1):
        scene = sample_scene(seed)
        for s, t in rig.adjacent_pairs[:3]:
            pair = rectify_pair(rig, s, t)
            lv, rv = render(pair.left_camera(), scene), render(pair.right_camera(), scene)
            out.append((lv.intensity, rv.intensity, gt_disparity(pair, scene, (lv, rv))))
    return out


# ---------------------------------------------------------------- params


def test_params_validation_and_round_trip():
    p = SgmParams(p1=3, p2=40, num_paths=4)
    assert SgmParams.from_dict(p.to_dict()) == p
    for bad in [dict(p1=5, p2=4), dict(num_paths=6), dict(census_window=4), dict(uniqueness_ratio=1.0), dict(lr_threshold=-1)]:
        with pytest.raises(SgmError):
            SgmParams(**bad).validate()


# ---------------------------------------------------------------- matching cost


def test_census_matches_bruteforce():
    img = textured(9, 11, seed=3)
    got = census_transform(img, 5)
    want = census_bruteforce(img, 5)
    assert all(int(got[y, x]) == want[y, x] for y in range(9) for x in range(11))


def test_census_cost_is_hamming_distance():
    left, right = textured(8, 12, 1), textured(8, 12, 2)
    vol = census_cost(left, right, 4)
    cl, cr = census_bruteforce(left), census_bruteforce(right)
    for y in range(8):
        for x in range(12):
            for d in range(min(x + 1, 4)):
                assert vol[y, x, d] == bin(cl[y, x] ^ cr[y, x - d]).count("1")


def test_zero_shift_zero_cost():
    img = textured()
    vol = matching_cost(img, img, 8)
    assert vol.dtype.kind == "i"
    assert (vol[:, :, 0] == 0).all()


def test_constructed_shift_argmin():
    base = textured(20, 48, 5)
    left, right = base[:, :40], base[:, 3:43]  # left(x) = right(x - 3)
    vol = matching_cost(left, right, 8)[2:-2, 10:-2]
    # the true shift always costs zero; a local extremum has an all-ones code, so ties can occur
    assert (vol[..., 3] == 0).all()
    assert (vol.argmin(axis=2) == 3).mean() > 0.97


def test_constant_images_equal_costs():
    img = np.full((10, 20), 0.5)
    vol = matching_cost(img, img * 1.0, 6)
    assert (vol == vol[:, :1, :1]).all()


def test_out_of_range_gets_pixel_max():
    left, right = textured(6, 10, 7), textured(6, 10, 8)
    vol = matching_cost(left, right, 6)
    for x in range(5):
        for y in range(6):
            valid = vol[y, x, : x + 1]
            assert (vol[y, x, x + 1 :] == valid.max()).all()
    assert (vol >= 0).all()


def test_cost_errors():
    with pytest.raises(ImageSizeMismatch):
        matching_cost(np.zeros((4, 5)), np.zeros((4, 6)), 2)
    with pytest.raises(DisparityRangeTooLarge):
        matching_cost(np.zeros((4, 5)), np.zeros((4, 5)), 6)
    with pytest.raises(SgmError):
        matching_cost(np.zeros((4, 5)), np.zeros((4, 5)), 3, mode="sad")


def test_mutual_information_cost_bounds():
    left, right = textured(16, 32, 1), textured(16, 32, 1)
    vol = matching_cost(left, right, 6, mode="mutual_information")
    assert np.isfinite(vol).all() and vol.min() >= 0 and vol.max() <= 24 + 1e-9
    # identical images: the true disparity 0 wins almost everywhere
    assert (vol[:, 6:].argmin(axis=2) == 0).mean() > 0.9


# ---------------------------------------------------------------- aggregation


def test_chain_dp_small_by_hand():
    costs = np.array([[0, 5], [5, 0]])
    # two labels, P1 = 1: switching once costs 1, staying costs 5
    np.testing.assert_array_equal(chain_dp_exhaustive(costs, 1, 3), [[0, 5], [5, 1]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 6), st.integers(0, 20), st.integers(0, 2**32 - 1))
def test_viterbi_oracle_matches_enumeration(k, d, p1, extra, seed):
    costs = np.random.default_rng(seed).integers(0, 30, (k, d))
    np.testing.assert_array_equal(chain_dp_viterbi(costs, p1, p1 + extra), chain_dp_exhaustive(costs, p1, p1 + extra))


def test_single_path_matches_exhaustive_dp_6x4():
    vol = np.random.default_rng(0).integers(0, 20, (4, 6, 3))
    np.testing.assert_array_equal(aggregate_path(vol, (1, 0), 4, 9), path_aggregate_oracle(vol, (1, 0), 4, 9))


@pytest.mark.parametrize("direction", PATHS_8)
def test_every_direction_matches_exhaustive_dp(direction):
    rng = np.random.default_rng(hash(direction) % 1000)
    for _ in range(5):
        vol = rng.integers(0, 30, (5, 6, 3))
        p1 = int(rng.integers(0, 8))
        p2 = p1 + int(rng.integers(0, 20))
        np.testing.assert_array_equal(aggregate_path(vol, direction, p1, p2), path_aggregate_oracle(vol, direction, p1, p2))


def test_float_penalties_match_dp():
    vol = np.random.default_rng(4).random((4, 5, 3)) * 10
    got = aggregate_path(vol, (1, 0), 0.7, 2.5)
    np.testing.assert_allclose(got, path_aggregate_oracle(vol, (1, 0), 0.7, 2.5), atol=1e-12)


@pytest.mark.parametrize("paths", [4, 8])
def test_zero_penalties_scale_raw(paths):
    vol = np.random.default_rng(2).integers(0, 25, (7, 9, 5))
    agg = aggregate_paths(vol, SgmParams(p1=0, p2=0, num_paths=paths))
    np.testing.assert_array_equal(agg, paths * vol)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(2, 5)), elements=st.integers(0, 60)),
    st.integers(0, 20),
    st.integers(0, 60),
)
def test_aggregation_lower_bound(vol, p1, extra):
    params = SgmParams(p1=p1, p2=p1 + extra, num_paths=8)
    for direction in PATHS_8:
        assert (aggregate_path(vol, direction, params.p1, params.p2) >= vol).all()
    assert (aggregate_paths(vol, params) >= params.num_paths * vol).all()


def test_summation_order_irrelevant_for_integers():
    vol = np.random.default_rng(3).integers(0, 40, (6, 7, 4))
    paths = [aggregate_path(vol, d, 10, 120) for d in PATHS_8]
    rng = np.random.default_rng(0)
    total = aggregate_paths(vol, SgmParams())
    for _ in range(5):
        shuffled = sum(paths[i] for i in rng.permutation(8))
        np.testing.assert_array_equal(shuffled, total)


# ---------------------------------------------------------------- extraction


def test_unique_zero_at_two():
    vol = np.ones((3, 8, 5))
    vol[:, :, 2] = 0.0
    dmap = extract_disparity(vol)
    valid_cols = np.arange(8) >= 2
    assert (dmap.disparity[:, valid_cols] == 2.0).all()
    assert (dmap.valid == valid_cols[None, :]).all()


def test_all_equal_costs_pick_zero():
    dmap = extract_disparity(np.full((3, 6, 4), 7.0))
    assert (dmap.disparity == 0.0).all() and dmap.valid.all()


def test_quadratic_subpixel():
    d = np.arange(6.0)
    vol = np.broadcast_to((d - 2.5) ** 2, (2, 10, 6)).copy()
    dmap = extract_disparity(vol, SgmParams(lr_threshold=10))
    np.testing.assert_allclose(dmap.disparity[dmap.valid], 2.5, atol=1e-6)
    assert dmap.valid[:, 5:].all()


def test_parabola_closed_form():
    rng = np.random.default_rng(9)
    for _ in range(50):
        c = rng.random(5) + 1.0
        b = int(rng.integers(1, 4))
        c[b] = 0.0
        vol = np.broadcast_to(c, (1, 8, 5)).copy()
        got = extract_disparity(vol).disparity[0, 7]
        want = b + (c[b - 1] - c[b + 1]) / (2 * (c[b - 1] - 2 * c[b] + c[b + 1]))
        assert got == pytest.approx(want, abs=1e-12)


def test_uniqueness_check():
    vol = np.full((1, 10, 8), 10.0)
    vol[0, :, 1] = 4.0
    vol[0, :, 6] = 4.5  # distant runner-up within 20%
    assert extract_disparity(vol, SgmParams(uniqueness_ratio=0.0)).valid[0, 7]
    assert not extract_disparity(vol, SgmParams(uniqueness_ratio=0.2)).valid[0, 7]
    assert extract_disparity(vol, SgmParams(uniqueness_ratio=0.05)).valid[0, 7]


def test_left_right_check_rejects_inconsistent_match():
    vol = np.full((1, 8, 4), 5.0)
    vol[0, :, 0] = 1.0
    vol[0, 4, 0] = 0.0
    vol[0, 6, :] = [5.0, 5.0, 0.5, 5.0]  # x=6 claims d=2 -> right x=4, whose best is d=0
    dmap = extract_disparity(vol)
    assert not dmap.valid[0, 6]
    assert dmap.valid[0, 5]


def test_sentinel_on_invalid():
    dmap = DisparityMap(np.array([[1.0, 2.0]]), np.array([[True, False]]))
    np.testing.assert_array_equal(dmap.disparity, [[1.0, -1.0]])


def test_median_filter_bruteforce():
    rng = np.random.default_rng(6)
    dmap = DisparityMap(rng.random((7, 9)) * 10, rng.random((7, 9)) > 0.3)
    got = median_filter_valid(dmap)
    for y in range(7):
        for x in range(9):
            if not dmap.valid[y, x]:
                assert got.disparity[y, x] == -1.0
                continue
            ys, xs = slice(max(y - 1, 0), y + 2), slice(max(x - 1, 0), x + 2)
            vals = dmap.disparity[ys, xs][dmap.valid[ys, xs]]
            assert got.disparity[y, x] == np.median(vals)
    np.testing.assert_array_equal(got.valid, dmap.valid)


def _median(signal, valid=None):
    valid = np.ones(signal.shape, bool) if valid is None else valid
    return median_filter_valid(DisparityMap(signal, valid))


@pytest.mark.parametrize(
    "signal",
    [np.full((6, 8), 3.0), np.where(np.arange(8) < 4, 1.0, 9.0)[None, :].repeat(6, axis=0)],
    ids=["constant", "step"],
)
def test_median_filter_root_signals(signal):
    once = _median(signal)
    np.testing.assert_array_equal(once.disparity, signal)
    np.testing.assert_array_equal(_median(once.disparity).disparity, once.disparity)


@pytest.mark.parametrize(
    "signal",
    [np.tile(np.arange(8.0), (6, 1)), np.add.outer(np.arange(6.0), np.arange(8.0))],
    ids=["ramp", "plane"],
)
def test_median_filter_linear_interior(signal):
    # truncated border windows bend linear signals, so only the interior is preserved
    once = _median(signal)
    np.testing.assert_array_equal(once.disparity[1:-1, 1:-1], signal[1:-1, 1:-1])


def test_median_filter_reaches_fixed_point():
    rng = np.random.default_rng(4)
    valid = rng.random((12, 16)) > 0.2
    cur = _median(rng.integers(0, 8, (12, 16)).astype(float), valid)
    # even-sized windows average the middle pair, so convergence is geometric rather than finite
    for _ in range(120):
        cur = _median(cur.disparity, valid)
    np.testing.assert_allclose(_median(cur.disparity, valid).disparity, cur.disparity, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(cur.valid, valid)


# ---------------------------------------------------------------- full pipeline


def test_identical_images_zero_disparity():
    img = textured(24, 48, 11)
    dmap = sgm_disparity(img, img, 8)
    assert dmap.valid.mean() > 0.9
    assert (dmap.disparity[dmap.valid] == 0.0).all()


def test_sgm_deterministic():
    left, right = textured(20, 40, 1), textured(20, 40, 2)
    a, b = sgm_disparity(left, right, 8), sgm_disparity(left, right, 8)
    np.testing.assert_array_equal(a.disparity, b.disparity)
    np.testing.assert_array_equal(a.valid, b.valid)


def test_valid_range():
    left, right = textured(20, 40, 1), textured(20, 40, 2)
    dmap = sgm_disparity(left, right, 8)
    vals = dmap.disparity[dmap.valid]
    assert vals.min() >= 0 and vals.max() <= 7


def test_census_on_rendered_pairs(rendered_pairs):
    for left, right, gt in rendered_pairs:
        dmap = sgm_disparity(left, right, 32)
        both = dmap.valid & gt.valid
        assert both.sum() > 0.8 * gt.valid.sum()
        assert (np.abs(dmap.disparity - gt.disparity)[both] <= 1.0).mean() >= 0.95


def test_mutual_information_on_rendered_pairs(rendered_pairs):
    left, right, gt = rendered_pairs[0]
    dmap = sgm_disparity(left, right, 32, mode="mutual_information")
    both = dmap.valid & gt.valid
    assert (np.abs(dmap.disparity - gt.disparity)[both] <= 1.0).mean() >= 0.7
