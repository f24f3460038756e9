import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surround3d.geometry import Camera, CameraIntrinsics, CameraPose, CameraRig, rectify_pair, yaw_rotation
from surround3d.scene import (
    Box,
    InfeasiblePlacement,
    Scene,
    SceneParams,
    cast_rays,
    gt_disparity,
    intersect_box,
    render,
    sample_scene,
    texture,
    value_noise,
)

K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def level_camera(center=(0.0, 0.0, 1.5), yaw=0.0, k=K):
    return Camera(k, CameraPose.from_center(yaw_rotation(yaw), center))


def slab_hit(origin, direction, box):
    """Scalar slab test written independently of the renderer."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rel = np.asarray(origin) - box.center
    o = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
    d = np.array([c * direction[0] + s * direction[1], -s * direction[0] + c * direction[1], direction[2]])
    lo, hi = -np.inf, np.inf
    for a in range(3):
        h = box.size[a] / 2
        if abs(d[a]) < 1e-15:
            if abs(o[a]) > h:
                return np.inf
            continue
        t1, t2 = (-h - o[a]) / d[a], (h - o[a]) / d[a]
        lo, hi = max(lo, min(t1, t2)), min(hi, max(t1, t2))
    return lo if lo <= hi and lo > 1e-9 else np.inf


# ---------------------------------------------------------------- sample_scene


def test_empty_scene():
    scene = sample_scene(3, SceneParams(num_boxes=0))
    assert scene.boxes == ()
    view = render(level_camera(), scene)
    assert (view.instance == -1).all()


def test_sample_scene_deterministic():
    assert sample_scene(11) == sample_scene(11)
    assert sample_scene(11) != sample_scene(12)


def test_exclusion_radius_1000_seeds():
    params = SceneParams(num_boxes=5)
    for seed in range(1000):
        scene = sample_scene(seed, params)
        assert len(scene.boxes) == 5
        for b in scene.boxes:
            assert math.hypot(b.center[0], b.center[1]) > params.ring_radius + b.half_diagonal
            assert b.center[2] == pytest.approx(b.size[2] / 2)
            assert min(b.size) > 0 and 0 <= b.class_id < params.num_classes


def test_infeasible_placement():
    params = SceneParams(num_boxes=40, placement_radius=(4.0, 4.5), max_retries=50)
    with pytest.raises(InfeasiblePlacement):
        sample_scene(0, params)


def test_invalid_params():
    with pytest.raises(ValueError):
        sample_scene(0, SceneParams(length_range=(2.0, 1.0)))
    with pytest.raises(ValueError):
        Box((0.0, 0.0, 1.0), (1.0, 0.0, 1.0), 0.0, 0)
    with pytest.raises(ValueError):
        Scene((Box((5.0, 0.0, 1.0), (1.0, 1.0, 1.0), 0.0, 7),))


def test_scene_dict_round_trip():
    scene = sample_scene(5)
    assert Scene.from_dict(scene.to_dict()) == scene


# ---------------------------------------------------------------- render


def test_ground_depth_example():
    view = render(level_camera(), Scene())
    np.testing.assert_allclose(view.depth[60], 15.0, rtol=1e-12)
    # every ground row follows Z = h * fy / (v - cy)
    for v in range(51, 101):
        np.testing.assert_allclose(view.depth[v], 1.5 * 100 / (v - 50), rtol=1e-12)


def test_sky_above_horizon():
    view = render(level_camera(), Scene())
    assert np.isinf(view.depth[:50]).all()
    assert (view.instance[:51] == -1).all()
    assert np.isfinite(view.intensity).all()
    assert view.intensity.min() >= 0 and view.intensity.max() <= 1


def test_box_occludes_ground_brute_force():
    k = CameraIntrinsics(12.0, 12.0, 8.0, 8.0, 16, 16)
    cam = Camera(k, CameraPose.from_center(yaw_rotation(0.3), (0.0, 0.0, 1.5)))
    boxes = (Box((4.0, 1.0, 0.6), (1.5, 1.0, 1.2), 0.4, 0), Box((7.0, 3.5, 1.0), (2.0, 2.0, 2.0), -0.2, 1))
    scene = Scene(boxes)
    view = render(cam, scene)
    origin = cam.center
    for v in range(16):
        for u in range(16):
            d = cam.pose.rotation.T @ np.array([(u - 8.0) / 12.0, (v - 8.0) / 12.0, 1.0])
            best, inst = (1.5 / -d[2] if d[2] < 0 else np.inf), -1
            for i, b in enumerate(boxes):
                t = slab_hit(origin, d, b)
                if t < best:
                    best, inst = t, i
            assert view.instance[v, u] == inst, (u, v)
            if np.isfinite(best):
                assert view.depth[v, u] == pytest.approx(best, rel=1e-9)
    assert (view.instance == 0).any() and (view.instance == 1).any()


def test_depth_instance_consistency():
    scene = sample_scene(21)
    cam = level_camera(yaw=math.atan2(scene.boxes[0].center[1], scene.boxes[0].center[0]))
    view = render(cam, scene)
    uu, vv = cam.pixel_grid()
    dirs = cam.pixel_rays(uu, vv) @ cam.pose.rotation
    for i, box in enumerate(scene.boxes):
        sel = view.instance == i
        if not sel.any():
            continue
        t, _ = intersect_box(cam.center, dirs[sel], box)
        np.testing.assert_allclose(view.depth[sel], t, rtol=1e-12)
    assert (view.instance == 0).any()


def test_render_deterministic():
    scene = sample_scene(8)
    a, b = render(level_camera(), scene), render(level_camera(), scene)
    np.testing.assert_array_equal(a.intensity, b.intensity)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_cast_rays_miss_upwards():
    t, inst, _ = cast_rays(np.array([0.0, 0.0, 1.0]), np.array([[0.0, 0.0, 1.0]]), Scene())
    assert np.isinf(t[0]) and inst[0] == -1


def test_texture_has_contrast_and_is_seed_stable():
    pts = np.random.default_rng(0).uniform(-20, 20, (2000, 3))
    fp = np.full(2000, 0.01)
    a = texture(pts, 4, fp)
    np.testing.assert_array_equal(a, texture(pts, 4, fp))
    assert a.std() > 0.05
    assert not np.array_equal(a, texture(pts, 5, fp))
    # coarse footprint fades the fine octaves away
    assert texture(pts, 4, np.full(2000, 10.0)).std() < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 2**31 - 1))
def test_value_noise_range(p, seed):
    val = value_noise(np.array([p]), 0.7, seed)
    assert 0.0 <= val[0] < 1.0


# ---------------------------------------------------------------- gt_disparity


def wall_pair(baseline=0.5, distance=10.0):
    left = level_camera()
    right_center = np.array([0.0, 0.0, 1.5]) + baseline * left.pose.rotation[0]
    right = level_camera(tuple(right_center))
    pair = rectify_pair(CameraRig((left, right)), 0, 1)
    wall = Box((distance + 0.5, 0.0, 20.0), (1.0, 40.0, 40.0), 0.0, 0)
    return pair, Scene((wall,))


def test_wall_disparity_constant():
    pair, scene = wall_pair()
    assert pair.focal == 100.0 and pair.baseline == pytest.approx(0.5)
    lv = render(pair.left_camera(), scene)
    dmap = gt_disparity(pair, scene)
    on_wall = dmap.valid & (lv.instance == 0)
    assert on_wall.sum() > 0.5 * dmap.valid.size
    np.testing.assert_allclose(dmap.disparity[on_wall], 5.0, atol=1e-6)
    # the leftmost columns lose their match
    assert not dmap.valid[:, :5].any()


def test_sky_is_invalid():
    left = level_camera()
    right = level_camera(tuple(np.array([0.0, 0.0, 1.5]) + 0.5 * left.pose.rotation[0]))
    pair = rectify_pair(CameraRig((left, right)), 0, 1)
    dmap = gt_disparity(pair, Scene())
    assert not dmap.valid[:50].any()
    assert (dmap.disparity[~dmap.valid] == dmap.SENTINEL).all()


def test_occlusion_flags_against_visibility():
    pair, _ = wall_pair(baseline=0.5, distance=12.0)
    post = Box((6.0, 0.0, 1.0), (0.4, 0.4, 2.0), 0.0, 1)
    scene = Scene((Box((12.5, 0.0, 20.0), (1.0, 40.0, 40.0), 0.0, 0), post))
    lcam, rcam = pair.left_camera(), pair.right_camera()
    lv, rv = render(lcam, scene), render(rcam, scene)
    dmap = gt_disparity(pair, scene, (lv, rv))
    uu, vv = lcam.pixel_grid()
    pts = lcam.unproject_points(uu, vv, np.where(np.isfinite(lv.depth), lv.depth, 1.0))
    agree = total = 0
    for v in range(0, 101, 2):
        for u in range(101):
            if not np.isfinite(lv.depth[v, u]):
                continue
            p = pts[v, u]
            (pu, pv), z = rcam.project_points(p)
            if not (0 <= pu <= 100):
                assert not dmap.valid[v, u]
                continue
            seg = p - rcam.center
            dist = np.linalg.norm(seg)
            blocked = any(slab_hit(rcam.center, seg / dist, b) < dist * 0.99 for b in scene.boxes)
            agree += dmap.valid[v, u] == (not blocked)
            total += 1
    assert total > 3000
    # disagreements are confined to the one-pixel band along occlusion edges
    assert agree / total > 0.99
    assert (~dmap.valid & np.isfinite(lv.depth)).sum() > 50
