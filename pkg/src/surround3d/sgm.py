"""Semi-global matching for pseudo ground-truth disparity.

Census (default) or mutual-information matching costs, 4/8-path aggregation,
winner-take-all with parabola sub-pixel refinement, uniqueness and
left-right consistency checks, and a valid-only 3x3 median filter.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter


class SgmError(ValueError):
    pass


class ImageSizeMismatch(SgmError):
    pass


class DisparityRangeTooLarge(SgmError):
    pass


@dataclass
class DisparityMap:
    """Disparity in pixels plus a validity flag; invalid entries hold -1."""

    disparity: np.ndarray
    valid: np.ndarray

    SENTINEL = -1.0

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        self.disparity = np.where(self.valid, np.asarray(self.disparity, dtype=np.float64), self.SENTINEL)


@dataclass
class SgmParams:
    p1: float = 10
    p2: float = 120
    num_paths: int = 8
    census_window: int = 5
    uniqueness_ratio: float = 0.0
    lr_threshold: float = 1.0
    mi_bins: int = 64
    mi_iterations: int = 3

    def validate(self):
        if not 0 <= self.p1 <= self.p2:
            raise SgmError(f"need 0 <= P1 <= P2, got P1={self.p1}, P2={self.p2}")
        if self.num_paths not in (4, 8):
            raise SgmError(f"num_paths must be 4 or 8, got {self.num_paths}")
        if self.census_window < 3 or self.census_window % 2 == 0:
            raise SgmError(f"census window must be odd and >= 3, got {self.census_window}")
        if not 0 <= self.uniqueness_ratio < 1:
            raise SgmError("uniqueness ratio must lie in [0, 1)")
        if self.lr_threshold < 0:
            raise SgmError("LR threshold must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SgmParams":
        return cls(**d).validate()


PATHS_4 = ((1, 0), (-1, 0), (0, 1), (0, -1))
PATHS_8 = PATHS_4 + ((1, 1), (-1, -1), (1, -1), (-1, 1))


def census_transform(image: np.ndarray, window: int = 5) -> np.ndarray:
    """Bit string per pixel, one bit per neighbour darker than the centre."""
    r = window // 2
    img = np.asarray(image, dtype=np.float64)
    padded = np.pad(img, r, mode="edge")
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.uint64)
    for dy in range(window):
        for dx in range(window):
            if dy == r and dx == r:
                continue
            out = (out << np.uint64(1)) | (padded[dy : dy + h, dx : dx + w] < img).astype(np.uint64)
    return out


def _fill_out_of_range(volume: np.ndarray) -> np.ndarray:
    """Pixels with x < d get the maximum valid cost of that pixel."""
    h, w, dmax = volume.shape
    xs = np.arange(w)[:, None]
    ds = np.arange(dmax)[None, :]
    oob = np.broadcast_to(ds > xs, (h, w, dmax))
    # costs are non-negative and d = 0 is always in range, so -1 never wins
    worst = np.where(oob, volume.dtype.type(-1), volume).max(axis=2, keepdims=True)
    return np.where(oob, worst, volume)


def census_cost(left: np.ndarray, right: np.ndarray, num_disp: int, window: int = 5) -> np.ndarray:
    cl = census_transform(left, window)
    cr = census_transform(right, window)
    h, w = cl.shape
    vol = np.zeros((h, w, num_disp), dtype=np.int64)
    for d in range(num_disp):
        vol[:, d:, d] = np.bitwise_count(cl[:, d:] ^ cr[:, : w - d])
    return _fill_out_of_range(vol)


def _mi_table(left_q: np.ndarray, right_q: np.ndarray, disp: np.ndarray, valid: np.ndarray, bins: int) -> np.ndarray:
    """Cost lookup ``-mi(i, k)`` from pixels paired through ``disp``."""
    h, w = left_q.shape
    xs = np.arange(w)[None, :] - np.rint(disp).astype(int)
    ok = valid & (xs >= 0)
    rows = np.broadcast_to(np.arange(h)[:, None], (h, w))
    li = left_q[ok]
    ri = right_q[rows[ok], xs[ok]]
    joint = np.zeros((bins, bins))
    np.add.at(joint, (li, ri), 1.0)
    n = max(ok.sum(), 1)
    joint /= n
    eps = 1e-7
    h_joint = gaussian_filter(-np.log(gaussian_filter(joint, 1.0) + eps), 1.0)
    pl = joint.sum(axis=1)
    pr = joint.sum(axis=0)
    h_l = gaussian_filter(-np.log(gaussian_filter(pl, 1.0) + eps), 1.0)
    h_r = gaussian_filter(-np.log(gaussian_filter(pr, 1.0) + eps), 1.0)
    mi = h_l[:, None] + h_r[None, :] - h_joint
    cost = -mi
    cost -= cost.min()
    span = cost.max()
    return 24.0 * cost / span if span > 0 else cost


def mi_cost(left, right, num_disp: int, params: SgmParams, seed: int = 0) -> np.ndarray:
    """Mutual-information cost, refined by re-matching from a random warp."""
    bins = params.mi_bins
    lq = np.clip((np.asarray(left) * bins).astype(int), 0, bins - 1)
    rq = np.clip((np.asarray(right) * bins).astype(int), 0, bins - 1)
    h, w = lq.shape
    rng = np.random.default_rng(seed)
    disp = rng.integers(0, num_disp, size=(h, w)).astype(np.float64)
    valid = np.ones((h, w), dtype=bool)
    vol = None
    for it in range(params.mi_iterations):
        table = _mi_table(lq, rq, disp, valid, bins)
        vol = np.zeros((h, w, num_disp))
        for d in range(num_disp):
            vol[:, d:, d] = table[lq[:, d:], rq[:, : w - d]]
        vol = _fill_out_of_range(vol)
        if it + 1 < params.mi_iterations:
            dm = extract_disparity(aggregate_paths(vol, params), params)
            disp, valid = np.maximum(dm.disparity, 0.0), dm.valid
    return vol


def matching_cost(left, right, num_disp: int, mode: str = "census", params: SgmParams | None = None) -> np.ndarray:
    """H x W x D cost volume; entry (y, x, d) compares left (x, y) with right (x - d, y)."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 2:
        raise ImageSizeMismatch(f"images must be equal 2-D shapes, got {left.shape} and {right.shape}")
    if num_disp < 2:
        raise SgmError("need at least 2 disparities")
    if num_disp > left.shape[1]:
        raise DisparityRangeTooLarge(f"D={num_disp} exceeds image width {left.shape[1]}")
    params = params or SgmParams()
    if mode == "census":
        return census_cost(left, right, num_disp, params.census_window)
    if mode == "mutual_information":
        return mi_cost(left, right, num_disp, params)
    raise SgmError(f"unknown matching mode {mode!r}")


def _step(cost_slice, prev, p1, p2):
    """One SGM recurrence step; ``prev`` is the predecessor's path cost."""
    prev_min = prev.min(axis=-1, keepdims=True)
    up = np.empty_like(prev)
    down = np.empty_like(prev)
    big = np.iinfo(np.int64).max // 4 if prev.dtype.kind == "i" else np.inf
    up[..., :-1] = prev[..., 1:]
    up[..., -1] = big
    down[..., 1:] = prev[..., :-1]
    down[..., 0] = big
    best = np.minimum(np.minimum(prev, np.minimum(up, down) + p1), prev_min + p2)
    return cost_slice + best - prev_min


def aggregate_path(volume: np.ndarray, direction: tuple[int, int], p1, p2) -> np.ndarray:
    """Path costs along one direction ``(dx, dy)``; pixels with no predecessor start at C."""
    dx, dy = direction
    if volume.dtype.kind == "i" and float(p1).is_integer() and float(p2).is_integer():
        p1, p2 = int(p1), int(p2)
    else:
        volume = volume.astype(np.float64)
    if dx == 0:
        return aggregate_path(volume.transpose(1, 0, 2), (dy, 0), p1, p2).transpose(1, 0, 2)
    h, w, _ = volume.shape
    out = np.empty_like(volume)
    xs = range(w) if dx > 0 else range(w - 1, -1, -1)
    first = True
    for x in xs:
        if first:
            out[:, x] = volume[:, x]
            first = False
            continue
        prev = out[:, x - dx]
        if dy == 0:
            out[:, x] = _step(volume[:, x], prev, p1, p2)
            continue
        # predecessor of row y is row y - dy
        col = volume[:, x].copy()
        if dy > 0:
            col[dy:] = _step(volume[dy:, x], prev[:-dy], p1, p2)
        else:
            col[:dy] = _step(volume[:dy, x], prev[-dy:], p1, p2)
        out[:, x] = col
    return out


def aggregate_paths(volume: np.ndarray, params: SgmParams) -> np.ndarray:
    """Sum of path costs over 4 or 8 directions, accumulated in a fixed order."""
    params.validate()
    paths = PATHS_4 if params.num_paths == 4 else PATHS_8
    total = None
    for direction in paths:
        path = aggregate_path(volume, direction, params.p1, params.p2)
        total = path if total is None else total + path
    return total


def _right_wta(volume: np.ndarray) -> np.ndarray:
    """Right-view winner-take-all from the left volume: C_R(x, d) = C(x + d, d)."""
    h, w, dmax = volume.shape
    vol = volume.astype(np.float64)
    right = np.full((h, w, dmax), np.inf)
    for d in range(dmax):
        right[:, : w - d, d] = vol[:, d:, d]
    return right.argmin(axis=2)


def extract_disparity(aggregated: np.ndarray, params: SgmParams | None = None) -> DisparityMap:
    """Winner-take-all (ties -> smaller d), parabola refinement, validity checks."""
    params = params or SgmParams()
    vol = np.asarray(aggregated, dtype=np.float64)
    h, w, dmax = vol.shape
    best = vol.argmin(axis=2)
    c0 = np.take_along_axis(vol, best[..., None], axis=2)[..., 0]
    disp = best.astype(np.float64)

    interior = (best > 0) & (best < dmax - 1)
    bm = np.clip(best - 1, 0, dmax - 1)
    bp = np.clip(best + 1, 0, dmax - 1)
    cm = np.take_along_axis(vol, bm[..., None], axis=2)[..., 0]
    cp = np.take_along_axis(vol, bp[..., None], axis=2)[..., 0]
    denom = cm - 2 * c0 + cp
    refine = interior & (denom > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(refine, (cm - cp) / (2 * np.where(refine, denom, 1.0)), 0.0)
    disp = disp + offset

    valid = np.ones((h, w), dtype=bool)
    if params.uniqueness_ratio > 0:
        ds = np.arange(dmax)[None, None, :]
        far = np.abs(ds - best[..., None]) > 1
        second = np.where(far, vol, np.inf).min(axis=2)
        valid &= ~(second * (1 - params.uniqueness_ratio) < c0)

    right = _right_wta(vol)
    xr = np.arange(w)[None, :] - best
    xr_c = np.clip(xr, 0, w - 1)
    d_right = np.take_along_axis(right, xr_c, axis=1)
    valid &= (xr >= 0) & (np.abs(d_right - best) <= params.lr_threshold)
    return DisparityMap(disp, valid)


def median_filter_valid(dmap: DisparityMap) -> DisparityMap:
    """3x3 median over valid neighbours only; validity is unchanged."""
    vals = np.where(dmap.valid, dmap.disparity, np.nan)
    padded = np.pad(vals, 1, constant_values=np.nan)
    windows = sliding_window_view(padded, (3, 3)).reshape(*vals.shape, 9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(windows, axis=-1)
    return DisparityMap(np.where(dmap.valid, med, DisparityMap.SENTINEL), dmap.valid.copy())


def sgm_disparity(left, right, num_disp: int = 32, params: SgmParams | None = None, mode: str = "census") -> DisparityMap:
    params = (params or SgmParams()).validate()
    volume = matching_cost(left, right, num_disp, mode, params)
    agg = aggregate_paths(volume, params)
    return median_filter_valid(extract_disparity(agg, params))
