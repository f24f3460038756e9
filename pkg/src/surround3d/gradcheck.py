"""Finite-difference gradient suite over every autodiff op and the model losses.

Each case builds a scalar function of a few small float64 leaves. Inputs are
drawn away from the kinks of relu/abs so central differences are accurate.
For the reversal layer the reference gradient is ``-lambda`` times the finite
difference of the (identity) forward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .detector import (
    Detector,
    DetectorConfig,
    build_sampling,
    discriminate,
    match_and_detect_loss,
    region_loss,
    sample_query_features,
)
from .disparity_head import (
    Encoder,
    EncoderConfig,
    LossParams,
    build_cost_volume,
    disparity_forward,
    stereo_focal_loss,
)
from .geometry import default_rig

EPS = 1e-5
TOLERANCE = 1e-5


@dataclass
class GradCase:
    name: str
    fn: Callable[[], Tensor]
    leaves: list[Tensor]
    scales: list[float] | None = None  # reference = scale * finite difference


@dataclass
class CaseResult:
    name: str
    error: float
    passed: bool
    seconds: float


def _leaf(rng, shape, lo=-1.0, hi=1.0, away=0.0):
    """Uniform values whose magnitude is at least ``away``."""
    x = rng.uniform(lo, hi, shape)
    if away:
        x = np.where(np.abs(x) < away, np.sign(x + 1e-300) * away + x, x)
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Random linear functional so every output element matters."""
    return ad.sum_(out * rng.normal(size=out.shape))


def _cases(rng: np.random.Generator) -> list[GradCase]:
    cases: list[GradCase] = []

    def add(name, fn, *leaves, scales=None):
        cases.append(GradCase(name, fn, list(leaves), scales))

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    w = rng.normal(size=(3, 4))
    add("add", lambda: ad.sum_(ad.add(a, b) * w), a, b)
    add("sub", lambda: ad.sum_(ad.sub(a, b) * w), a, b)
    c = _leaf(rng, (3, 1))
    add("mul", lambda: ad.sum_(ad.mul(a, c) * w), a, c)
    m1, m2 = _leaf(rng, (3, 5)), _leaf(rng, (5, 2))
    wm = rng.normal(size=(3, 2))
    add("matmul", lambda: ad.sum_(ad.matmul(m1, m2) * wm), m1, m2)

    for stride in (1, 2):
        x = _leaf(rng, (2, 2, 7, 7))
        k = _leaf(rng, (3, 2, 3, 3))
        bias = _leaf(rng, (3,))
        out_shape = ad.conv2d(x, k, bias, stride=stride).shape
        wc = rng.normal(size=out_shape)
        add(f"conv2d/stride{stride}", lambda x=x, k=k, bias=bias, s=stride, wc=wc: ad.sum_(ad.conv2d(x, k, bias, stride=s) * wc), x, k, bias)

    r = _leaf(rng, (4, 5), away=0.05)
    wr = rng.normal(size=(4, 5))
    add("relu", lambda: ad.sum_(ad.relu(r) * wr), r)
    add("abs", lambda: ad.sum_(ad.absolute(r) * wr), r)
    p = _leaf(rng, (4, 5), lo=0.2, hi=2.0)
    add("log", lambda: ad.sum_(ad.log(p, floor=1e-12) * wr), p)
    add("exp", lambda: ad.sum_(ad.exp(r) * wr), r)
    add("softmax", lambda: ad.sum_(ad.softmax(r, axis=-1) * wr), r)
    add("log_softmax", lambda: ad.sum_(ad.log_softmax(r, axis=0) * wr), r)
    add("sum/axis", lambda: ad.sum_(ad.sum_(r, axis=1) * wr[:, 0]), r)
    add("mean", lambda: ad.sum_(ad.mean(r, axis=0, keepdims=True) * wr[:1]), r)
    sel = rng.random((4, 5)) > 0.5
    add("gather", lambda: ad.sum_(ad.gather(r, sel) * wr[sel]), r)
    add("getitem", lambda: ad.sum_(r[1:3, ::2] * wr[1:3, ::2]), r)
    add("reshape", lambda: ad.sum_(ad.reshape(r, (5, 4)) * wr.reshape(5, 4)), r)
    add("transpose", lambda: ad.sum_(ad.transpose(r, (1, 0)) * wr.T), r)
    wp = rng.normal(size=(6, 8))
    add("pad", lambda: ad.sum_(ad.pad(r, ((1, 1), (2, 1))) * wp), r)
    s2 = _leaf(rng, (4, 5))
    ws = rng.normal(size=(4, 2, 5))
    add("stack", lambda: ad.sum_(ad.stack([r, s2], axis=1) * ws), r, s2)
    wcat = rng.normal(size=(4, 10))
    add("concat", lambda: ad.sum_(ad.concat([r, s2], axis=1) * wcat), r, s2)

    g = _leaf(rng, (3, 4))
    lam = 0.7
    add("grl", lambda: ad.sum_(ad.grl(g, lam) * w), g, scales=[-lam])

    # stereo focal loss on a correlation volume, both weighting variants
    fl, fr = _leaf(rng, (1, 3, 2, 6)), _leaf(rng, (1, 3, 2, 6))
    d_gt = rng.uniform(0, 3, (1, 2, 6))
    mask = rng.random((1, 2, 6)) > 0.3
    mask[0, 0, 0] = True
    for down in (False, True):
        params = LossParams(alpha=1.0, num_disp=4, downweight=down)
        add(
            f"focal_loss/{'down' if down else 'up'}weight",
            lambda params=params: stereo_focal_loss(disparity_forward(fl, fr, 4).prob, d_gt, mask, params),
            fl, fr,
        )  # fmt: skip
    wv = rng.normal(size=(1, 2, 6, 4))
    add("cost_volume", lambda: ad.sum_(build_cost_volume(fl, fr, 4) * wv), fl, fr)

    enc = Encoder(EncoderConfig(widths=(2, 3), strides=(2, 2)), np.random.default_rng(int(rng.integers(1 << 31))))
    imgs = rng.random((2, 8, 8))
    we = rng.normal(size=(2, 3, 2, 2))
    add("encoder", lambda: ad.sum_(enc(imgs) * we), *enc.parameters())

    # discriminator behind the reversal layer: disc params see +grad, features -lambda * grad
    det_cfg = DetectorConfig(num_queries=6, feature_dim=5, disc_hidden=4, num_classes=2)
    det = Detector(det_cfg, in_channels=3, rng=np.random.default_rng(int(rng.integers(1 << 31))))
    det.disc["disc.l2.w"].data = rng.normal(0, 0.5, det.disc["disc.l2.w"].shape)
    feats = _leaf(rng, (6, 5))
    labels = rng.integers(0, 2, 6)
    lam_r = 0.1
    disc_leaves = list(det.disc.values())
    add(
        "grl+discriminator",
        lambda: region_loss(discriminate(det.disc, ad.grl(feats, lam_r)), labels),
        feats, *disc_leaves,
        scales=[-lam_r] + [1.0] * len(disc_leaves),
    )  # fmt: skip

    # query sampling, heads and the matched detection loss
    rig = default_rig()
    refs = np.array([[6.0, 0.5, 1.0], [4.0, 3.0, 0.8], [-5.0, 2.0, 1.2], [0.5, -7.0, 0.6], [9.0, -4.0, 1.1], [0.0, 0.0, 30.0]])
    sampling = build_sampling(refs, rig, (5, 8), 4)
    maps = _leaf(rng, (len(rig), 3, 5, 8))
    gt_classes = np.array([0, 1])
    gt_boxes = np.array([[6.2, 0.3, 0.9, 0.4, -0.1, 0.3, 0.2], [-4.8, 2.2, 1.0, 0.1, 0.2, -0.2, 3.0]])

    def detect():
        q = sample_query_features(det.params["query.embed"], maps, sampling, det.params)
        logits, boxes = det.heads(q, refs)
        dl = match_and_detect_loss(logits, boxes, gt_classes, gt_boxes, det_cfg.num_classes)
        return dl.cls + dl.box

    add("detector", detect, maps, *det.params.values())
    return cases


def run_case(case: GradCase, eps: float = EPS) -> float:
    for t in case.leaves:
        t.zero_grad()
    case.fn().backward()
    worst = 0.0
    scales = case.scales or [1.0] * len(case.leaves)
    for t, s in zip(case.leaves, scales):
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = ad.numeric_gradient(case.fn, t.data, eps) * s
        worst = max(worst, ad.relative_error(num, ana))
    return worst


def run_suite(seed: int = 0, eps: float = EPS, tolerance: float = TOLERANCE) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    results = []
    for case in _cases(rng):
        t0 = time.perf_counter()
        err = run_case(case, eps)
        results.append(CaseResult(case.name, err, err < tolerance, time.perf_counter() - t0))
    return results
