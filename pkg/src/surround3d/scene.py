"""Synthetic box-world scenes and an exact ray-cast renderer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, RectifiedPair
from .sgm import DisparityMap

SKY_DEPTH = np.inf
SKY_INTENSITY = 0.6
LIGHT_DIR = np.array([0.4, 0.3, 0.866])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.5
OCCLUSION_TOL = 0.01

# (cell size in metres, amplitude) per value-noise octave
TEXTURE_OCTAVES = ((1.2, 0.45), (0.45, 0.35), (0.16, 0.2))


class InfeasiblePlacement(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")
        if self.center[2] < 0:
            raise ValueError("box centre must not be below the ground plane")

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.sqrt(sum(s * s for s in self.size))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw, "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(tuple(map(float, d["center"])), tuple(map(float, d["size"])), float(d["yaw"]), int(d["class_id"]))


@dataclass(frozen=True)
class Scene:
    boxes: tuple[Box, ...] = ()
    seed: int = 0
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for b in self.boxes:
            if not 0 <= b.class_id < self.num_classes:
                raise ValueError(f"class id {b.class_id} outside [0, {self.num_classes})")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "num_classes": self.num_classes, "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(Box.from_dict(b) for b in d.get("boxes", [])), int(d.get("seed", 0)), int(d.get("num_classes", 3)))


@dataclass
class SceneParams:
    num_boxes: int = 3
    placement_radius: tuple[float, float] = (4.0, 14.0)
    length_range: tuple[float, float] = (0.8, 4.0)
    width_range: tuple[float, float] = (0.8, 2.0)
    height_range: tuple[float, float] = (1.0, 2.0)
    ring_radius: float = 0.5
    num_classes: int = 3
    max_retries: int = 1000

    def validate(self):
        for name in ("placement_radius", "length_range", "width_range", "height_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be positive and ordered, got {(lo, hi)}")
        if self.num_boxes < 0:
            raise ValueError("num_boxes must be non-negative")


def sample_scene(rng_seed: int, params: SceneParams | None = None) -> Scene:
    """Random boxes resting on the ground outside the camera ring.

    Boxes keep their centre further than ``ring_radius + half_diagonal`` from
    the rig axis and do not overlap each other's bounding circles.
    """
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng(rng_seed)
    boxes: list[Box] = []
    for _ in range(params.num_boxes):
        for _attempt in range(params.max_retries):
            size = (
                rng.uniform(*params.length_range),
                rng.uniform(*params.width_range),
                rng.uniform(*params.height_range),
            )
            radius = rng.uniform(*params.placement_radius)
            angle = rng.uniform(-math.pi, math.pi)
            yaw = rng.uniform(-math.pi, math.pi)
            cls_id = int(rng.integers(params.num_classes))
            box = Box((radius * math.cos(angle), radius * math.sin(angle), size[2] / 2), size, yaw, cls_id)
            if radius <= params.ring_radius + box.half_diagonal:
                continue
            if any(
                math.dist(box.center[:2], other.center[:2]) <= box.half_diagonal + other.half_diagonal
                for other in boxes
            ):
                continue
            boxes.append(box)
            break
        else:
            raise InfeasiblePlacement(f"could not place box {len(boxes)} after {params.max_retries} tries")
    return Scene(tuple(boxes), rng_seed, params.num_classes)


@dataclass
class RenderedView:
    intensity: np.ndarray
    depth: np.ndarray
    instance: np.ndarray
    normal: np.ndarray = field(repr=False, default=None)


def _hash_lattice(ix, iy, iz, seed: int) -> np.ndarray:
    """Deterministic value in [0, 1) per integer lattice point."""
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
        ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ np.uint64(seed * 0x27D4EB2F165667C5 % (1 << 64))
    )
    h ^= h >> np.uint64(31)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """Trilinear value noise with smoothstep weights, values in [0, 1)."""
    p = points / cell
    base = np.floor(p)
    frac = p - base
    w = frac * frac * (3.0 - 2.0 * frac)
    b = base.astype(np.int64)
    out = np.zeros(points.shape[:-1])
    with np.errstate(over="ignore"):
        for dx in (0, 1):
            wx = w[..., 0] if dx else 1 - w[..., 0]
            for dy in (0, 1):
                wy = w[..., 1] if dy else 1 - w[..., 1]
                for dz in (0, 1):
                    wz = w[..., 2] if dz else 1 - w[..., 2]
                    out += wx * wy * wz * _hash_lattice(b[..., 0] + dx, b[..., 1] + dy, b[..., 2] + dz, seed)
    return out


def texture(points: np.ndarray, seed: int, footprint: np.ndarray) -> np.ndarray:
    """Multi-octave value noise; octaves finer than ~2 px of footprint fade out."""
    acc = np.zeros(points.shape[:-1])
    for k, (cell, amp) in enumerate(TEXTURE_OCTAVES):
        fade = np.clip(cell / (2.0 * footprint) - 0.5, 0.0, 1.0)
        acc += amp * fade * (value_noise(points, cell, seed + 7919 * k) - 0.5)
    return np.clip(0.55 + acc, 0.0, 1.0)


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def intersect_box(origin: np.ndarray, dirs: np.ndarray, box: Box):
    """Slab test. Returns (t_hit, world normal); t_hit is inf on a miss."""
    rot = _yaw_matrix(box.yaw)
    o = (origin - np.asarray(box.center)) @ rot
    d = dirs @ rot
    half = np.asarray(box.size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = d == 0
    inside = np.abs(o) <= half
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    axis = tmin.argmax(axis=-1)
    local_n = np.zeros(dirs.shape)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1)[..., 0])
    np.put_along_axis(local_n, axis[..., None], sign[..., None], axis=-1)
    return np.where(hit, t_near, np.inf), local_n @ rot.T


def cast_rays(origin: np.ndarray, dirs: np.ndarray, scene: Scene):
    """Nearest hit along rays ``origin + t * dirs`` (t > 0).

    Returns ``(t, instance, normal)``; misses have ``t = inf`` and instance -1.
    """
    shape = dirs.shape[:-1]
    t_best = np.full(shape, np.inf)
    inst = np.full(shape, -1, dtype=np.int64)
    normal = np.zeros(dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    ground = t_ground > 0
    t_best = np.where(ground, t_ground, np.inf)
    normal[ground] = (0.0, 0.0, 1.0)
    for i, box in enumerate(scene.boxes):
        t, n = intersect_box(origin, dirs, box)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        inst[closer] = i
        normal[closer] = n[closer]
    return t_best, inst, normal


def render(camera: Camera, scene: Scene) -> RenderedView:
    """Ray-cast ``scene`` from ``camera``.

    Depth is the camera-frame ``Z`` of the nearest surface (+inf for sky).
    Intensity is value-noise texture times Lambertian shading under a fixed
    directional light.
    """
    uu, vv = camera.pixel_grid()
    rays = camera.pixel_rays(uu, vv)  # unit z, so ray parameter == camera depth
    dirs = rays @ camera.pose.rotation
    origin = camera.center
    t, inst, normal = cast_rays(origin, dirs, scene)
    hit = np.isfinite(t)
    pts = origin + dirs * np.where(hit, t, 0.0)[..., None]

    # lateral footprint only: rows of a rectified pair see the same surface points
    ray_len = np.linalg.norm(dirs, axis=-1)
    footprint = np.where(hit, t * ray_len / camera.intrinsics.fx, 1.0)
    # box textures live in box-local coordinates so they move with the box
    tex_pts = pts.copy()
    for i, box in enumerate(scene.boxes):
        sel = inst == i
        if sel.any():
            tex_pts[sel] = (pts[sel] - np.asarray(box.center)) @ _yaw_matrix(box.yaw) + 100.0 * (i + 1)
    tex = texture(tex_pts, scene.seed, footprint)
    shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, 1.0)
    intensity = np.where(hit, np.clip(tex * shade, 0.0, 1.0), SKY_INTENSITY)
    depth = np.where(hit, t, SKY_DEPTH)
    return RenderedView(intensity, depth, np.where(hit, inst, -1), normal)


def gt_disparity(pair: RectifiedPair, scene: Scene, views=None) -> DisparityMap:
    """Analytic disparity of the cropped rectified left view.

    Pixels are invalid for sky, when the match falls outside the right crop,
    or when the right view's depth at the match disagrees by more than 1%
    (occlusion).
    """
    if views is None:
        views = render(pair.left_camera(), scene), render(pair.right_camera(), scene)
    left, right = views
    zl = left.depth
    sky = ~np.isfinite(zl)
    disp = np.where(sky, 0.0, pair.focal * pair.baseline / np.where(sky, 1.0, zl))
    h, w = zl.shape
    uu = np.arange(w)[None, :] - disp
    inside = (uu >= 0) & (uu <= w - 1) & ~sky
    u0 = np.clip(np.floor(uu).astype(int), 0, w - 1)
    u1 = np.clip(u0 + 1, 0, w - 1)
    rows = np.arange(h)[:, None]
    zr0 = right.depth[rows, u0]
    zr1 = right.depth[rows, u1]
    with np.errstate(invalid="ignore"):
        err = np.minimum(np.abs(zr0 - zl), np.abs(zr1 - zl)) / np.where(sky, 1.0, zl)
    visible = err <= OCCLUSION_TOL
    return DisparityMap(np.where(sky, 0.0, disp), inside & visible)
