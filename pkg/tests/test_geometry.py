import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surround3d.geometry import (
    BehindCamera,
    Camera,
    CameraIntrinsics,
    CameraPose,
    CameraRig,
    DegenerateBaseline,
    GeometryError,
    InvalidDepthRange,
    NonPositiveDepth,
    bilinear_sample,
    compute_overlap_mask,
    correspondence,
    default_rig,
    disparity_from_depth,
    inverse_depth_samples,
    project,
    rectify_pair,
    unproject,
    warp_image,
    yaw_rotation,
)

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def identity_camera(k=K100):
    return Camera(k, CameraPose.identity())


@pytest.fixture(scope="module")
def rig():
    return default_rig()


# ---------------------------------------------------------------- types


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 4)


def test_pose_rejects_reflection_and_skew():
    with pytest.raises(GeometryError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        CameraPose(np.eye(3) * 1.01, np.zeros(3))


def test_rig_invariants():
    cam = identity_camera()
    with pytest.raises(GeometryError):
        CameraRig((cam,))
    with pytest.raises(GeometryError):
        CameraRig((cam, cam), ((0, 0),))
    with pytest.raises(GeometryError):
        CameraRig((cam, cam), ((0, 2),))


def test_rig_dict_round_trip(rig):
    again = CameraRig.from_dict(rig.to_dict())
    assert again.adjacent_pairs == rig.adjacent_pairs
    for a, b in zip(rig.cameras, again.cameras):
        assert a.intrinsics == b.intrinsics
        np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
        np.testing.assert_array_equal(a.pose.translation, b.pose.translation)


def test_rig_dict_rotation_is_row_major(rig):
    d = rig.to_dict()
    np.testing.assert_array_equal(np.array(d["cameras"][1]["rotation"]).reshape(3, 3), rig[1].pose.rotation)


# ---------------------------------------------------------------- project / unproject


def test_project_principal_axis():
    pix, depth = project(identity_camera(), (0.0, 0.0, 2.0))
    np.testing.assert_array_equal(pix, [50.0, 50.0])
    assert depth == 2.0


def test_project_off_axis():
    pix, depth = project(identity_camera(), (1.0, 0.0, 2.0))
    np.testing.assert_array_equal(pix, [100.0, 50.0])
    assert depth == 2.0


def test_project_behind():
    with pytest.raises(BehindCamera):
        project(identity_camera(), (0.0, 0.0, -1.0))
    with pytest.raises(BehindCamera):
        project(identity_camera(), (0.0, 0.0, 1e-7))


def test_unproject_examples():
    np.testing.assert_array_equal(unproject(identity_camera(), (50.0, 50.0), 2.0), [0.0, 0.0, 2.0])
    with pytest.raises(NonPositiveDepth):
        unproject(identity_camera(), (50.0, 50.0), 0.0)


def test_round_trip_1000_random(rig):
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(1000):
        cam = rig[i % len(rig)]
        px = rng.uniform([0, 0], [cam.width - 1, cam.height - 1])
        z = rng.uniform(0.1, 100.0)
        back, depth = project(cam, unproject(cam, px, z))
        worst = max(worst, np.abs(back - px).max(), abs(depth - z))
    assert worst < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    yaw=st.floats(-math.pi, math.pi),
    u=st.floats(0, 127),
    v=st.floats(0, 79),
    z=st.floats(0.05, 500.0),
    center=st.tuples(*[st.floats(-5, 5)] * 3),
)
def test_round_trip_property(yaw, u, v, z, center):
    k = CameraIntrinsics(102.4, 102.4, 64.0, 40.0, 128, 80)
    cam = Camera(k, CameraPose.from_center(yaw_rotation(yaw), center))
    back, depth = project(cam, unproject(cam, (u, v), z))
    assert np.abs(back - [u, v]).max() < 1e-9
    assert abs(depth - z) < 1e-9 * max(1.0, z)


# ---------------------------------------------------------------- correspondence


def test_correspondence_same_camera_is_identity(rig):
    two = CameraRig((rig[0], rig[0]))
    rng = np.random.default_rng(1)
    for _ in range(50):
        px = rng.uniform([0, 0], [127, 79])
        np.testing.assert_allclose(correspondence(two, 0, 1, px, rng.uniform(1, 50)), px, atol=1e-9)


def test_correspondence_pure_translation():
    b = 0.3
    left = identity_camera()
    right = Camera(K100, CameraPose.from_center(np.eye(3), (b, 0.0, 0.0)))
    two = CameraRig((left, right))
    for xs, ys, z in [(80.0, 20.0, 5.0), (60.5, 70.25, 12.0), (99.0, 0.0, 3.0)]:
        xt, yt = correspondence(two, 0, 1, (xs, ys), z)
        assert xt == pytest.approx(xs - K100.fx * b / z, abs=1e-9)
        assert yt == pytest.approx(ys, abs=1e-9)


def test_correspondence_invalid_cases():
    left = identity_camera()
    back = Camera(K100, CameraPose.from_center(yaw_rotation(math.pi), (0.0, 0.0, 0.0)))
    two = CameraRig((left, back))
    assert correspondence(two, 0, 1, (50.0, 50.0), 5.0) is None
    side = Camera(K100, CameraPose.from_center(np.eye(3), (100.0, 0.0, 0.0)))
    assert correspondence(CameraRig((left, side)), 0, 1, (50.0, 50.0), 5.0) is None


def test_reverse_correspondence_on_overlap(rig):
    """Forward then backward through the same 3-D point returns the pixel."""
    rng = np.random.default_rng(2)
    worst = 0.0
    checked = 0
    for s, t in rig.adjacent_pairs:
        mask, _ = compute_overlap_mask(rig, s, t)
        inner = mask.mask.copy()
        inner[[0, -1], :] = inner[:, [0, -1]] = False  # round-off can push border pixels out
        ys, xs = np.nonzero(inner)
        for i in rng.choice(len(xs), 20, replace=False):
            z = rng.uniform(2.0, 60.0)
            world = unproject(rig[s], (xs[i], ys[i]), z)
            pt, zt = project(rig[t], world)
            if not rig[t].intrinsics.contains(pt[0], pt[1]):
                continue
            back = correspondence(rig, t, s, pt, zt)
            worst = max(worst, np.abs(back - [xs[i], ys[i]]).max())
            checked += 1
    assert checked > 50
    assert worst < 1e-6


# ---------------------------------------------------------------- overlap masks


def test_inverse_depth_samples():
    d = inverse_depth_samples(1.0, 60.0, 16)
    assert d[0] == 1.0 and d[-1] == pytest.approx(60.0, rel=1e-12)
    np.testing.assert_allclose(np.diff(1.0 / d), np.full(15, (1 / 60 - 1) / 15), atol=1e-15)
    for bad in [(0.0, 10.0, 4), (5.0, 5.0, 4), (1.0, 10.0, 1)]:
        with pytest.raises(InvalidDepthRange):
            inverse_depth_samples(*bad)


def test_overlap_identical_cameras_full():
    cam = Camera(CameraIntrinsics(50.0, 50.0, 20.0, 15.0, 40, 30), CameraPose.identity())
    mask, field = compute_overlap_mask(CameraRig((cam, cam)), 0, 1)
    assert mask.fraction == 1.0
    assert field.valid.all()


def test_overlap_opposite_cameras_empty():
    k = CameraIntrinsics(50.0, 50.0, 20.0, 15.0, 40, 30)
    a = Camera(k, CameraPose.from_center(yaw_rotation(0.0), (0.0, 0.0, 0.0)))
    b = Camera(k, CameraPose.from_center(yaw_rotation(math.pi), (0.0, 0.0, 0.0)))
    mask, field = compute_overlap_mask(CameraRig((a, b)), 0, 1, (1.0, 60.0))
    assert mask.fraction == 0.0
    assert (field.target_xy[~field.valid] == field.SENTINEL).all()


def test_overlap_default_rig_fraction(rig):
    for s, t in rig.adjacent_pairs:
        mask, _ = compute_overlap_mask(rig, s, t)
        assert 0.0 < mask.fraction <= 0.20
        assert mask.mask.shape == (rig[s].height, rig[s].width)
        assert mask.fraction == mask.mask.sum() / mask.mask.size


def test_overlap_dense_oracle(rig):
    """Per-pixel frustum check at every sampled depth, written out longhand."""
    s, t = rig.adjacent_pairs[0]
    mask, _ = compute_overlap_mask(rig, s, t, (1.0, 60.0), 16)
    depths = 1.0 / np.linspace(1.0, 1.0 / 60.0, 16)
    src, tgt = rig[s], rig[t]
    for v in range(0, src.height, 7):
        for u in range(src.width):
            hit = False
            for z in depths:
                pc = np.array([(u - 64.0) / src.intrinsics.fx * z, (v - 40.0) / src.intrinsics.fy * z, z])
                world = src.pose.rotation.T @ (pc - src.pose.translation)
                q = tgt.pose.rotation @ world + tgt.pose.translation
                if q[2] > 1e-6:
                    x = tgt.intrinsics.fx * q[0] / q[2] + 64.0
                    y = tgt.intrinsics.fy * q[1] / q[2] + 40.0
                    hit |= 0 <= x <= 127 and 0 <= y <= 79
            assert mask.mask[v, u] == hit, (u, v)


def test_overlap_yaw_symmetry(rig):
    fractions = [compute_overlap_mask(rig, s, t)[0].fraction for s, t in rig.adjacent_pairs]
    assert max(fractions) - min(fractions) < 1e-6


def test_overlap_mask_monotone_in_range(rig):
    s, t = rig.adjacent_pairs[2]
    # inverse-depth step of the narrow range divides the wide one, so samples nest
    narrow, _ = compute_overlap_mask(rig, s, t, (1.0 / 0.5, 1.0 / 0.1), 5)
    wide, _ = compute_overlap_mask(rig, s, t, (1.0 / 0.9, 1.0 / 0.1), 9)
    assert not (narrow.mask & ~wide.mask).any()
    assert wide.mask.sum() >= narrow.mask.sum()


def test_overlap_representative_depth(rig):
    s, t = rig.adjacent_pairs[0]
    _, field = compute_overlap_mask(rig, s, t, (1.0, 64.0))
    assert np.allclose(field.depth, 8.0)
    depth_map = np.full((80, 128), 5.0)
    _, field5 = compute_overlap_mask(rig, s, t, (1.0, 64.0), depth_map=depth_map)
    ys, xs = np.nonzero(field5.valid)
    for y, x in list(zip(ys, xs))[:20]:
        np.testing.assert_allclose(field5.target_xy[y, x], correspondence(rig, s, t, (x, y), 5.0), atol=1e-9)
    assert (field5.target_xy[~field5.valid] == -1).all()


# ---------------------------------------------------------------- rectification


def test_rectify_fronto_parallel_is_identity():
    left = identity_camera()
    right = Camera(K100, CameraPose.from_center(np.eye(3), (0.4, 0.0, 0.0)))
    pair = rectify_pair(CameraRig((left, right)), 0, 1)
    np.testing.assert_allclose(pair.left_rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(pair.right_rotation, np.eye(3), atol=1e-9)
    assert pair.baseline == pytest.approx(0.4)


def test_rectify_degenerate():
    cam = identity_camera()
    with pytest.raises(DegenerateBaseline):
        rectify_pair(CameraRig((cam, cam)), 0, 1)


def test_rectify_row_alignment(rig):
    rng = np.random.default_rng(3)
    for s, t in rig.adjacent_pairs:
        pair = rectify_pair(rig, s, t)
        assert pair.baseline > 0
        r = pair.rotation
        assert abs(np.linalg.det(r) - 1.0) < 1e-9
        assert np.abs(r @ r.T - np.eye(3)).max() < 1e-9
        lc, rc = pair.left_camera(cropped=False), pair.right_camera(cropped=False)
        pts = []
        while len(pts) < 200:
            p = rng.uniform([-30, -30, -2], [30, 30, 6])
            zl, zr = lc.to_camera(p)[2], rc.to_camera(p)[2]
            if zl > 0.5 and zr > 0.5:
                pts.append(p)
        pl, _ = lc.project_points(np.array(pts))
        pr, _ = rc.project_points(np.array(pts))
        assert np.abs(pl[:, 1] - pr[:, 1]).max() < 0.05
        # positive disparity for points in front
        assert (pl[:, 0] - pr[:, 0] > 0).all()


def test_rectified_y_axis_points_down(rig):
    pair = rectify_pair(rig, *rig.adjacent_pairs[0])
    assert pair.rotation[1] @ np.array([0.0, 0.0, 1.0]) < -0.99


def test_rectify_crop_keeps_overlap_band(rig):
    s, t = rig.adjacent_pairs[0]
    mask, _ = compute_overlap_mask(rig, s, t)
    pair = rectify_pair(rig, s, t, (64, 80), overlap_mask=mask.mask)
    band = warp_image(mask.mask.astype(np.uint8), rig[s], pair.left_camera(), nearest=True).astype(bool)
    assert band.any()
    cols = np.flatnonzero(band.any(axis=0))
    assert cols.max() == 64 - 1 - 4


def test_rectify_resamples_images(rig):
    s, t = rig.adjacent_pairs[0]
    imgs = (np.full((80, 128), 0.25), np.full((80, 128), 0.75))
    pair = rectify_pair(rig, s, t, (64, 80), images=imgs)
    left, right = pair.images
    assert left.shape == (80, 64)
    assert np.allclose(left[left > 0], 0.25) and np.allclose(right[right > 0], 0.75)


def test_disparity_from_depth():
    left = identity_camera()
    right = Camera(K100, CameraPose.from_center(np.eye(3), (0.5, 0.0, 0.0)))
    pair = rectify_pair(CameraRig((left, right)), 0, 1)
    assert pair.focal == 100.0
    assert disparity_from_depth(pair, 25.0) == pytest.approx(2.0, abs=1e-12)
    assert disparity_from_depth(pair, 1e9) < 1e-6
    with pytest.raises(NonPositiveDepth):
        disparity_from_depth(pair, 0.0)
    z = np.sort(np.random.default_rng(4).uniform(0.1, 100, 500))
    assert (np.diff(disparity_from_depth(pair, z)) < 0).all()


# ---------------------------------------------------------------- resampling


def test_bilinear_sample_matches_weighted_sum():
    rng = np.random.default_rng(5)
    img = rng.random((6, 7))
    for u, v in rng.uniform([0, 0], [6, 5], (50, 2)):
        x0, y0 = int(u), int(v)
        a, b = u - x0, v - y0
        x1, y1 = min(x0 + 1, 6), min(y0 + 1, 5)
        want = (1 - a) * (1 - b) * img[y0, x0] + a * (1 - b) * img[y0, x1] + (1 - a) * b * img[y1, x0] + a * b * img[y1, x1]
        assert bilinear_sample(img, np.array(u), np.array(v)) == pytest.approx(want, abs=1e-12)


def test_warp_identity():
    cam = identity_camera(CameraIntrinsics(20.0, 20.0, 8.0, 6.0, 16, 12))
    img = np.random.default_rng(6).random((12, 16))
    np.testing.assert_allclose(warp_image(img, cam, cam), img, atol=1e-12)


def test_default_rig_layout(rig):
    assert len(rig) == 6
    k = rig[0].intrinsics
    assert (k.width, k.height) == (128, 80)
    assert k.fx == pytest.approx(64.0 / math.tan(math.radians(32.0)))
    for i, j in itertools.combinations(range(6), 2):
        assert np.linalg.norm(rig[i].center[:2]) == pytest.approx(0.5)
        assert rig[i].center[2] == pytest.approx(1.5)
    assert rig.adjacent_pairs == tuple(((i + 1) % 6, i) for i in range(6))
