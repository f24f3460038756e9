"""Toy query-based 3D detector with an adversarial overlap-region discriminator.

One decoder round: every query's reference point is projected into all
cameras, image features are bilinearly sampled and averaged, and a residual
MLP refines the query. Class and box heads sit on top; a small discriminator
tries to tell overlap-region queries from the rest through a gradient
reversal layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import CameraRig

BOX_DIM = 7  # center (3), log-size (3), yaw
POSITIONAL_SCALE = 3.0  # lifts the (u^2, v) channel to the scale of the sampled features


class TooFewQueries(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


@dataclass
class DetectorConfig:
    num_queries: int = 16
    feature_dim: int = 32
    disc_hidden: int = 32
    num_classes: int = 3

    def __post_init__(self):
        if self.num_queries < 1 or self.feature_dim < 1 or self.disc_hidden < 1:
            raise ValueError("detector sizes must be positive")


@dataclass
class LossWeights:
    cls: float = 1.0
    box: float = 1.0
    disparity: float = 1.0
    region: float = 0.1

    def __post_init__(self):
        if min(self.cls, self.box, self.disparity, self.region) < 0:
            raise ValueError("loss weights must be non-negative")


def _dense(rng, n_in, n_out, name, zero=False):
    w = np.zeros((n_in, n_out)) if zero else rng.normal(0, math.sqrt(2.0 / n_in), (n_in, n_out))
    return Tensor(w, requires_grad=True, name=f"{name}.w"), Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")


def mlp2(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return ad.relu(x @ w1 + b1) @ w2 + b2


# ---------------------------------------------------------------- sampling


@dataclass
class QuerySampling:
    """Constant bilinear sampling operator for a set of reference points."""

    matrix: np.ndarray  # (Q, num_cams * h * w), rows average the valid views
    positional: np.ndarray  # (Q, 2) mean over valid views of (u_n ** 2, v_n)
    valid: np.ndarray  # (Q,) at least one valid view
    views: np.ndarray  # (Q, num_cams) per-camera validity


def bilinear_weights(u: float, v: float, h: int, w: int) -> list[tuple[int, int, float]]:
    """(row, col, weight) taps of a bilinear sample at (u, v), clamped to the grid."""
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    u0 = min(int(math.floor(u)), w - 2) if w > 1 else 0
    v0 = min(int(math.floor(v)), h - 2) if h > 1 else 0
    a, b = u - u0, v - v0
    taps = [(v0, u0, (1 - a) * (1 - b)), (v0, u0 + 1, a * (1 - b)), (v0 + 1, u0, (1 - a) * b), (v0 + 1, u0 + 1, a * b)]
    return [t for t in taps if t[2] != 0.0]


def build_sampling(ref_points: np.ndarray, rig: CameraRig, feat_hw: tuple[int, int], factor: int) -> QuerySampling:
    """Project reference points into every camera and record bilinear taps.

    Feature cell ``j`` is centred on image pixel ``factor * j``.
    """
    pts = np.asarray(ref_points, dtype=np.float64).reshape(-1, 3)
    q, ncam = len(pts), len(rig)
    h, w = feat_hw
    mat = np.zeros((q, ncam * h * w))
    pos = np.zeros((q, 2))
    views = np.zeros((q, ncam), dtype=bool)
    for c, cam in enumerate(rig.cameras):
        pix, z = cam.project_points(pts)
        ok = (z > 0) & cam.intrinsics.contains(pix[:, 0], pix[:, 1])
        views[:, c] = ok
    counts = views.sum(axis=1)
    for i in range(q):
        if counts[i] == 0:
            continue
        for c, cam in enumerate(rig.cameras):
            if not views[i, c]:
                continue
            (u, v), _ = cam.project_points(pts[i])
            k = cam.intrinsics
            pos[i] += (((u - k.cx) / k.cx) ** 2, (v - k.cy) / k.cy)
            for r, col, wt in bilinear_weights(u / factor, v / factor, h, w):
                mat[i, c * h * w + r * w + col] += wt / counts[i]
        pos[i] /= counts[i]
    return QuerySampling(mat, pos, counts > 0, views)


def sample_query_features(queries: Tensor, feature_maps: Tensor, sampling: QuerySampling, params: dict) -> Tensor:
    """Refine query features from multi-camera samples.

    ``feature_maps`` is (num_cams, C, h, w). Queries with no valid
    projection keep their prior features.
    """
    n, c, h, w = feature_maps.shape
    flat = ad.reshape(ad.transpose(feature_maps, (0, 2, 3, 1)), (n * h * w, c))
    sampled = ad.matmul(sampling.matrix, flat)
    x = ad.concat([sampled, Tensor(sampling.positional * POSITIONAL_SCALE)], axis=1)
    delta = mlp2(x, params["refine.l1.w"], params["refine.l1.b"], params["refine.l2.w"], params["refine.l2.b"])
    gate = sampling.valid.astype(np.float64)[:, None]
    return queries + delta * gate


def assign_region_label(points: np.ndarray, rig: CameraRig, overlap_masks: dict[int, np.ndarray]) -> np.ndarray:
    """1 where a point projects (nearest pixel) into any camera's overlap mask."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.zeros(len(pts), dtype=np.int64)
    for c, mask in overlap_masks.items():
        cam = rig[c]
        pix, z = cam.project_points(pts)
        ok = (z > 0) & cam.intrinsics.contains(pix[:, 0], pix[:, 1])
        u = np.where(ok, np.rint(np.nan_to_num(pix[:, 0])), 0).astype(int)
        v = np.where(ok, np.rint(np.nan_to_num(pix[:, 1])), 0).astype(int)
        labels |= (ok & mask[v, u]).astype(np.int64)
    return labels


# ---------------------------------------------------------------- model


class Detector:
    """Parameters for query refinement, detection heads and the discriminator."""

    def __init__(self, config: DetectorConfig, in_channels: int, rng: np.random.Generator):
        self.config = config
        f = config.feature_dim
        p: dict[str, Tensor] = {}
        p["query.embed"] = Tensor(rng.normal(0, 0.1, (config.num_queries, f)), requires_grad=True, name="query.embed")
        for name, (n_in, n_out) in {
            "refine.l1": (in_channels + 2, f),
            "refine.l2": (f, f),
            "head.cls": (f, config.num_classes + 1),
            "head.box": (f, BOX_DIM),
        }.items():
            p[f"{name}.w"], p[f"{name}.b"] = _dense(rng, n_in, n_out, name)
        # small heads so early predictions sit near the reference points
        p["head.box.w"].data *= 0.1
        p["head.cls.w"].data *= 0.1
        self.params = p
        d: dict[str, Tensor] = {}
        d["disc.l1.w"], d["disc.l1.b"] = _dense(rng, f, config.disc_hidden, "disc.l1")
        d["disc.l2.w"], d["disc.l2.b"] = _dense(rng, config.disc_hidden, 2, "disc.l2", zero=True)
        self.disc = d

    def heads(self, q: Tensor, ref_points: np.ndarray):
        """Class logits (Q, K + 1) and decoded boxes (Q, 7)."""
        p = self.params
        logits = q @ p["head.cls.w"] + p["head.cls.b"]
        raw = q @ p["head.box.w"] + p["head.box.b"]
        offset = np.zeros((len(ref_points), BOX_DIM))
        offset[:, :3] = ref_points
        return logits, raw + offset


def discriminate(disc: dict, features: Tensor) -> Tensor:
    """Two-logit region classifier (index 1 = overlap)."""
    if features.shape[-1] != disc["disc.l1.w"].shape[0]:
        raise ad.ShapeMismatch(f"features {features.shape} vs discriminator input {disc['disc.l1.w'].shape[0]}")
    return mlp2(features, disc["disc.l1.w"], disc["disc.l1.b"], disc["disc.l2.w"], disc["disc.l2.b"])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyBatch("cross-entropy over an empty batch")
    if logits.shape[0] != len(labels):
        raise ad.ShapeMismatch(f"{logits.shape[0]} rows vs {len(labels)} labels")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ad.sum_(ad.log_softmax(logits, axis=1) * onehot) * (-1.0 / len(labels))


def region_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return cross_entropy(logits, labels)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)


def box_targets(boxes) -> np.ndarray:
    """(n, 7) rows of center, log-size, yaw."""
    return np.array([[*b.center, *np.log(b.size), b.yaw] for b in boxes], dtype=np.float64).reshape(-1, BOX_DIM)


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost assignment of every column to a distinct row."""
    rows, cols = linear_sum_assignment(np.asarray(cost, dtype=np.float64))
    order = np.argsort(cols)
    return rows[order], cols[order]


def match_cost(logits: np.ndarray, boxes: np.ndarray, gt_classes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """(Q, n): class cross-entropy plus L1 centre distance."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -logp[:, gt_classes]
    l1 = np.abs(boxes[:, None, :3] - gt_boxes[None, :, :3]).sum(axis=-1)
    return ce + l1


@dataclass
class DetectionLoss:
    cls: Tensor
    box: Tensor
    rows: np.ndarray
    cols: np.ndarray


def match_and_detect_loss(logits: Tensor, boxes: Tensor, gt_classes, gt_boxes: np.ndarray, num_classes: int) -> DetectionLoss:
    """Hungarian-matched set loss.

    Unmatched queries target the background class ``num_classes``. The box
    loss is the mean L1 over matched queries and the 7 box components, with
    the yaw difference wrapped to (-pi, pi].
    """
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    q, n = logits.shape[0], len(gt_classes)
    if n > q:
        raise TooFewQueries(f"{n} ground-truth boxes but only {q} queries")
    targets = np.full(q, num_classes, dtype=np.int64)
    if n == 0:
        return DetectionLoss(cross_entropy(logits, targets), Tensor(0.0), np.zeros(0, int), np.zeros(0, int))
    rows, cols = hungarian(match_cost(logits.data, boxes.data, gt_classes, gt_boxes))
    targets[rows] = gt_classes[cols]
    l_cls = cross_entropy(logits, targets)
    matched = boxes[rows]
    diff = matched - gt_boxes[cols]
    # shift yaw by a constant multiple of 2 pi so the residual lands in (-pi, pi]
    shift = np.zeros((n, BOX_DIM))
    shift[:, 6] = wrap_angle(diff.data[:, 6]) - diff.data[:, 6]
    l_box = ad.mean(ad.absolute(diff + shift))
    return DetectionLoss(l_cls, l_box, rows, cols)


def total_loss(l_cls: float, l_box: float, l_d: float, l_r: float, weights: LossWeights) -> float:
    """Reported scalar: cls + box + disparity terms minus the weighted region loss."""
    return weights.cls * l_cls + weights.box * l_box + weights.disparity * l_d - weights.region * l_r


def adversarial_term(disc: dict, features: Tensor, labels: np.ndarray, lambda_r: float, mode: str = "grl"):
    """Region-loss contribution to the training objective.

    Returns ``(objective_term, region_loss, logits)``.

    ``grl``: features pass through a gradient reversal layer; the
    discriminator minimises L_r and the features receive ``-lambda_r * dL_r``.
    ``negloss``: no reversal, the objective gets ``-lambda_r * L_r`` for all
    parameters. ``both``: reversal and the negative term together.
    """
    if mode == "grl":
        logits = discriminate(disc, ad.grl(features, lambda_r))
        l_r = region_loss(logits, labels)
        return l_r, l_r, logits
    if mode == "negloss":
        logits = discriminate(disc, features)
        l_r = region_loss(logits, labels)
        return l_r * (-lambda_r), l_r, logits
    if mode == "both":
        logits = discriminate(disc, ad.grl(features, lambda_r))
        l_r = region_loss(logits, labels)
        return l_r * (-lambda_r), l_r, logits
    raise ValueError(f"unknown adversarial mode {mode!r}")
