"""Pinhole camera rig geometry.

Conventions: camera frame is x-right, y-down, z-forward. The world frame is
right-handed with z up. Poses map world points into the camera frame,
``X_cam = R @ X_world + t``. Pixel centres sit at integer coordinates and a
pixel is in bounds when ``0 <= u <= width - 1`` and ``0 <= v <= height - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEPTH_EPS = 1e-6
ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometry errors."""


class BehindCamera(GeometryError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class InvalidDepthRange(GeometryError):
    pass


class DegenerateBaseline(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 2 or self.height < 2:
            raise GeometryError(f"image must be at least 2x2, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, u, v):
        """Boolean test (vectorised) for pixel coordinates inside the image."""
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() >= ORTHO_TOL or np.linalg.det(r) <= 0:
            raise GeometryError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def from_center(cls, rotation, center) -> "CameraPose":
        r = np.asarray(rotation, dtype=np.float64)
        return cls(r, -r @ np.asarray(center, dtype=np.float64))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera-frame points (..., 3)."""
        return points @ self.pose.rotation.T + self.pose.translation

    def project_points(self, points: np.ndarray):
        """Vectorised projection without error checks.

        Returns ``(pixels, depth)`` with shapes (..., 2) and (...). Pixels of
        points with depth <= ``DEPTH_EPS`` are NaN.
        """
        pc = self.to_camera(np.asarray(points, dtype=np.float64))
        z = pc[..., 2]
        k = self.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = z > DEPTH_EPS
            safe = np.where(ok, z, 1.0)
            u = np.where(ok, k.fx * pc[..., 0] / safe + k.cx, np.nan)
            v = np.where(ok, k.fy * pc[..., 1] / safe + k.cy, np.nan)
        return np.stack([u, v], axis=-1), z

    def pixel_rays(self, u, v) -> np.ndarray:
        """Camera-frame ray directions with unit z for pixel coordinates."""
        k = self.intrinsics
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)

    def unproject_points(self, u, v, depth) -> np.ndarray:
        """Vectorised unprojection of pixels at camera-frame depth ``Z_c``."""
        pc = self.pixel_rays(u, v) * np.asarray(depth, dtype=np.float64)[..., None]
        return (pc - self.pose.translation) @ self.pose.rotation

    def pixel_grid(self):
        vv, uu = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return uu, vv


def project(camera: Camera, world_point) -> tuple[np.ndarray, float]:
    p = np.asarray(world_point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise GeometryError("world point must be finite")
    pc = camera.pose.rotation @ p + camera.pose.translation
    if pc[2] <= DEPTH_EPS:
        raise BehindCamera(f"point has camera depth {pc[2]:.3g} m")
    k = camera.intrinsics
    pixel = np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])
    return pixel, float(pc[2])


def unproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    return camera.unproject_points(np.array(u), np.array(v), np.array(depth))


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]
    adjacent_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        pairs = tuple((int(a), int(b)) for a, b in self.adjacent_pairs)
        object.__setattr__(self, "adjacent_pairs", pairs)
        if len(self.cameras) < 2:
            raise GeometryError("a rig needs at least two cameras")
        n = len(self.cameras)
        for a, b in pairs:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise GeometryError(f"invalid adjacent pair ({a}, {b})")

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, idx: int) -> Camera:
        return self.cameras[idx]

    def to_dict(self) -> dict:
        cams = []
        for cam in self.cameras:
            k = cam.intrinsics
            cams.append(
                {
                    "fx": k.fx,
                    "fy": k.fy,
                    "cx": k.cx,
                    "cy": k.cy,
                    "width": k.width,
                    "height": k.height,
                    "rotation": cam.pose.rotation.reshape(-1).tolist(),
                    "translation": cam.pose.translation.tolist(),
                }
            )
        return {"cameras": cams, "adjacent_pairs": [list(p) for p in self.adjacent_pairs]}

    @classmethod
    def from_dict(cls, data: dict) -> "CameraRig":
        cams = []
        for c in data["cameras"]:
            k = CameraIntrinsics(
                float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]), int(c["width"]), int(c["height"])
            )
            pose = CameraPose(np.array(c["rotation"], dtype=np.float64).reshape(3, 3), np.array(c["translation"]))
            cams.append(Camera(k, pose))
        return cls(tuple(cams), tuple(tuple(p) for p in data.get("adjacent_pairs", [])))


def yaw_rotation(yaw: float) -> np.ndarray:
    """World-to-camera rotation for a level camera looking along ``yaw``."""
    c, s = math.cos(yaw), math.sin(yaw)
    right = [s, -c, 0.0]
    down = [0.0, 0.0, -1.0]
    forward = [c, s, 0.0]
    return np.array([right, down, forward])


def default_rig(
    num_cameras: int = 6,
    hfov_deg: float = 64.0,
    width: int = 128,
    height: int = 80,
    ring_radius: float = 0.5,
    mount_height: float = 1.5,
) -> CameraRig:
    """Ring of outward-looking cameras at equal yaw spacing.

    Pairs are listed as ``(left, right)`` when viewed from outside the ring:
    camera ``i + 1`` sits counter-clockwise of camera ``i``.
    """
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    k = CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)
    cams = []
    for i in range(num_cameras):
        yaw = 2.0 * math.pi * i / num_cameras
        center = [ring_radius * math.cos(yaw), ring_radius * math.sin(yaw), mount_height]
        cams.append(Camera(k, CameraPose.from_center(yaw_rotation(yaw), center)))
    pairs = tuple(((i + 1) % num_cameras, i) for i in range(num_cameras))
    return CameraRig(tuple(cams), pairs)


def correspondence(rig: CameraRig, source_idx: int, target_idx: int, pixel, depth: float):
    """Map a source pixel at ``depth`` into the target camera.

    Returns the sub-pixel target coordinates, or ``None`` when the point is
    behind the target camera or lands outside its image.
    """
    src, tgt = rig[source_idx], rig[target_idx]
    world = unproject(src, pixel, depth)
    pix, z = tgt.project_points(world)
    if not z > DEPTH_EPS or not tgt.intrinsics.contains(pix[0], pix[1]):
        return None
    return pix


@dataclass
class OverlapMask:
    camera_index: int
    mask: np.ndarray

    @property
    def fraction(self) -> float:
        return float(self.mask.sum()) / self.mask.size


@dataclass
class CorrespondenceField:
    """Per-pixel mapping into a target camera; invalid pixels hold -1."""

    valid: np.ndarray
    target_xy: np.ndarray
    depth: np.ndarray

    SENTINEL = -1.0


def inverse_depth_samples(d_min: float, d_max: float, count: int) -> np.ndarray:
    if not (d_min > 0 and d_max > d_min):
        raise InvalidDepthRange(f"need 0 < d_min < d_max, got [{d_min}, {d_max}]")
    if count < 2:
        raise InvalidDepthRange(f"need at least 2 samples per ray, got {count}")
    return 1.0 / np.linspace(1.0 / d_min, 1.0 / d_max, count)


def _map_pixels(src: Camera, tgt: Camera, uu, vv, depth):
    world = src.unproject_points(uu, vv, depth)
    pix, z = tgt.project_points(world)
    ok = (z > DEPTH_EPS) & tgt.intrinsics.contains(pix[..., 0], pix[..., 1])
    return ok, pix


def frustum_overlap(view: Camera, targets: Sequence[Camera], depths: np.ndarray) -> np.ndarray:
    """Pixels of ``view`` whose ray lands inside every target at some sampled depth."""
    uu, vv = view.pixel_grid()
    mask = np.zeros(uu.shape, dtype=bool)
    for z in depths:
        hit = np.ones(uu.shape, dtype=bool)
        for tgt in targets:
            ok, _ = _map_pixels(view, tgt, uu, vv, np.full(uu.shape, z))
            hit &= ok
        mask |= hit
    return mask


def compute_overlap_mask(
    rig: CameraRig,
    source_idx: int,
    target_idx: int,
    depth_range: tuple[float, float] = (1.0, 60.0),
    samples_per_ray: int = 16,
    depth_map: np.ndarray | None = None,
) -> tuple[OverlapMask, CorrespondenceField]:
    """Frustum-intersection overlap mask of ``source_idx`` towards ``target_idx``.

    A pixel is in the overlap when its ray, sampled uniformly in inverse depth
    over ``depth_range``, lands inside the target image for at least one
    sample. The correspondence field is evaluated at ``depth_map`` when given
    (true scene depth), else at the geometric mean of the range.
    """
    d_min, d_max = depth_range
    depths = inverse_depth_samples(d_min, d_max, samples_per_ray)
    src, tgt = rig[source_idx], rig[target_idx]
    mask = frustum_overlap(src, [tgt], depths)

    uu, vv = src.pixel_grid()
    if depth_map is None:
        rep = np.full(uu.shape, math.sqrt(d_min * d_max))
    else:
        rep = np.asarray(depth_map, dtype=np.float64)
    finite = np.isfinite(rep) & (rep > 0)
    ok, pix = _map_pixels(src, tgt, uu, vv, np.where(finite, rep, 1.0))
    ok &= finite
    target_xy = np.where(ok[..., None], pix, CorrespondenceField.SENTINEL)
    field_ = CorrespondenceField(ok, target_xy, np.where(finite, rep, CorrespondenceField.SENTINEL))
    return OverlapMask(source_idx, mask), field_


def rotation_homography(src: Camera, dst: Camera) -> np.ndarray:
    """Pixel homography from ``dst`` to ``src`` for cameras sharing a centre."""
    r = src.pose.rotation @ dst.pose.rotation.T
    return src.intrinsics.matrix @ r @ np.linalg.inv(dst.intrinsics.matrix)


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray, fill: float = 0.0) -> np.ndarray:
    h, w = image.shape[:2]
    tol = 1e-9  # homography round-off at the border
    inside = (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.minimum(np.floor(uc).astype(int), w - 2)
    v0 = np.minimum(np.floor(vc).astype(int), h - 2)
    a = uc - u0
    b = vc - v0
    out = (
        image[v0, u0] * (1 - a) * (1 - b)
        + image[v0, u0 + 1] * a * (1 - b)
        + image[v0 + 1, u0] * (1 - a) * b
        + image[v0 + 1, u0 + 1] * a * b
    )
    return np.where(inside, out, fill)


def warp_image(image: np.ndarray, src: Camera, dst: Camera, nearest: bool = False, fill: float = 0.0) -> np.ndarray:
    """Resample an image of ``src`` into ``dst``; both cameras share a centre."""
    hmg = rotation_homography(src, dst)
    uu, vv = dst.pixel_grid()
    pts = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ hmg.T
    with np.errstate(divide="ignore", invalid="ignore"):
        front = pts[..., 2] > 0
        su = np.where(front, pts[..., 0] / pts[..., 2], -1.0)
        sv = np.where(front, pts[..., 1] / pts[..., 2], -1.0)
    if nearest:
        ru, rv = np.rint(su).astype(int), np.rint(sv).astype(int)
        inside = src.intrinsics.contains(ru, rv) & front
        out = np.full(uu.shape, fill, dtype=np.asarray(image).dtype)
        out[inside] = image[rv[inside], ru[inside]]
        return out
    return bilinear_sample(np.asarray(image, dtype=np.float64), su, sv, fill)


@dataclass
class RectifiedPair:
    """Row-aligned virtual stereo pair built from two rig cameras.

    ``rotation`` maps world into the shared rectified frame;
    ``left_rotation`` / ``right_rotation`` map each original camera frame into
    it. ``crop`` is ``(x0, y0, width, height)`` in rectified pixels and applies
    to both views.
    """

    source_idx: int
    target_idx: int
    intrinsics: CameraIntrinsics
    rotation: np.ndarray
    left_rotation: np.ndarray
    right_rotation: np.ndarray
    left_center: np.ndarray
    right_center: np.ndarray
    baseline: float
    crop: tuple[int, int, int, int]
    images: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def focal(self) -> float:
        return self.intrinsics.fx

    def _camera(self, center, cropped: bool) -> Camera:
        k = self.intrinsics
        if cropped:
            x0, y0, w, h = self.crop
            k = CameraIntrinsics(k.fx, k.fy, k.cx - x0, k.cy - y0, w, h)
        return Camera(k, CameraPose.from_center(self.rotation, center))

    def left_camera(self, cropped: bool = True) -> Camera:
        return self._camera(self.left_center, cropped)

    def right_camera(self, cropped: bool = True) -> Camera:
        return self._camera(self.right_center, cropped)


def _rectifying_rotation(left: Camera, right: Camera) -> np.ndarray:
    baseline = right.center - left.center
    x_axis = baseline / np.linalg.norm(baseline)
    z_mean = left.pose.rotation[2] + right.pose.rotation[2]
    z_axis = z_mean - (z_mean @ x_axis) * x_axis
    norm = np.linalg.norm(z_axis)
    if norm < 1e-9:
        raise DegenerateBaseline("optical axes are parallel to the baseline")
    z_axis /= norm
    y_axis = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y_axis, z_axis])


def rectify_pair(
    rig: CameraRig,
    source_idx: int,
    target_idx: int,
    overlap_crops: tuple[int, int] | None = None,
    images: tuple[np.ndarray, np.ndarray] | None = None,
    overlap_mask: np.ndarray | None = None,
    right_margin: int = 4,
) -> RectifiedPair:
    """Rectify a camera pair with the source as the left view.

    ``overlap_crops`` is the ``(width, height)`` of the crop window. The
    window's right edge is placed ``right_margin`` pixels past the source
    overlap band (so matches at positive disparity stay inside); without an
    ``overlap_mask`` the window is centred. When ``images`` are given they are
    resampled into the cropped rectified views.
    """
    left, right = rig[source_idx], rig[target_idx]
    baseline = float(np.linalg.norm(right.center - left.center))
    if baseline <= 1e-6:
        raise DegenerateBaseline(f"camera centres coincide (baseline {baseline:.3g} m)")
    rot = _rectifying_rotation(left, right)

    kl, kr = left.intrinsics, right.intrinsics
    k = CameraIntrinsics(
        (kl.fx + kr.fx) / 2, (kl.fy + kr.fy) / 2, (kl.cx + kr.cx) / 2, (kl.cy + kr.cy) / 2,
        kl.width, kl.height,
    )  # fmt: skip
    full_w, full_h = k.width, k.height
    crop_w, crop_h = overlap_crops if overlap_crops is not None else (full_w, full_h)
    crop_w, crop_h = min(int(crop_w), full_w), min(int(crop_h), full_h)
    y0 = (full_h - crop_h) // 2
    x0 = (full_w - crop_w) // 2
    if overlap_mask is not None:
        virt = Camera(k, CameraPose.from_center(rot, left.center))
        band = warp_image(overlap_mask.astype(np.uint8), left, virt, nearest=True)
        cols = np.flatnonzero(band.any(axis=0))
        if cols.size:
            x0 = int(np.clip(cols.max() + 1 + right_margin - crop_w, 0, full_w - crop_w))

    pair = RectifiedPair(
        source_idx, target_idx, k, rot,
        rot @ left.pose.rotation.T, rot @ right.pose.rotation.T,
        left.center.copy(), right.center.copy(), baseline, (x0, y0, crop_w, crop_h),
    )  # fmt: skip
    if images is not None:
        pair.images = (
            warp_image(images[0], left, pair.left_camera()),
            warp_image(images[1], right, pair.right_camera()),
        )
    return pair


def disparity_from_depth(pair: RectifiedPair, depth):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise NonPositiveDepth("depth must be positive")
    d = pair.focal * pair.baseline / depth
    return float(d) if d.ndim == 0 else d
