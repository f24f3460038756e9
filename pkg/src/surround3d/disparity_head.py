"""Stereo disparity head: shared conv encoder, correlation cost volume and
the stereo focal loss over overlap pixels."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASKED_SCORE = -30.0  # small enough to vanish, large enough to keep p < 1 in float64
LOG_FLOOR = 1e-12


class IndivisibleFactor(ValueError):
    pass


class EmptyOverlapWarning(UserWarning):
    pass


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (8, 16)
    strides: tuple[int, ...] = (2, 2)
    kernel: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must have equal, non-zero length")
        if min(self.widths) < 1 or min(self.strides) < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("widths/strides must be >= 1 and the kernel odd")

    @property
    def factor(self) -> int:
        return int(np.prod(self.strides))

    @property
    def pad(self) -> int:
        """Input padding that centres feature cell j on input pixel ``factor * j``."""
        half = self.kernel // 2
        return int(sum(half * np.prod(self.strides[:i]) for i in range(len(self.strides))))


class Encoder:
    """Conv stack shared by both stereo views and the detector's camera images."""

    def __init__(self, config: EncoderConfig | None = None, rng: np.random.Generator | None = None, in_channels: int = 1):
        self.config = config or EncoderConfig()
        rng = rng or np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c = in_channels
        k = self.config.kernel
        for i, w in enumerate(self.config.widths):
            std = np.sqrt(2.0 / (c * k * k))
            self.weights.append(Tensor(rng.normal(0, std, (w, c, k, k)), requires_grad=True, name=f"enc.w{i}"))
            self.biases.append(Tensor(np.zeros(w), requires_grad=True, name=f"enc.b{i}"))
            c = w

    @property
    def channels(self) -> int:
        return self.config.widths[-1]

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def __call__(self, images: np.ndarray) -> Tensor:
        """(N, H, W) intensities -> (N, C, H / factor, W / factor) features.

        Each image is standardised to zero mean and unit variance first.
        """
        imgs = np.asarray(images, dtype=np.float64)
        n, h, w = imgs.shape
        f = self.config.factor
        if h % f or w % f:
            raise IndivisibleFactor(f"image {h}x{w} not divisible by feature factor {f}")
        p = self.config.pad
        mu = imgs.mean(axis=(1, 2), keepdims=True)
        sd = imgs.std(axis=(1, 2), keepdims=True) + 1e-3
        x = Tensor(np.pad((imgs - mu) / sd, ((0, 0), (p, p), (p, p)), mode="edge")[:, None])
        last = len(self.weights) - 1
        for i, (wt, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.conv2d(x, wt, b, stride=self.config.strides[i])
            if i < last:
                x = ad.relu(x)
        ho, wo = h // f, w // f
        if x.shape[2] < ho or x.shape[3] < wo:
            raise IndivisibleFactor(f"encoder output {x.shape[2:]} smaller than {(ho, wo)}")
        if x.shape[2:] != (ho, wo):
            x = x[:, :, :ho, :wo]
        return x


def build_cost_volume(left: Tensor, right: Tensor, num_disp: int) -> Tensor:
    """Correlation volume (N, h, w, D): mean over channels of left(x) * right(x - d).

    Entries with ``x < d`` get ``MASKED_SCORE``.
    """
    left, right = ad.as_tensor(left), ad.as_tensor(right)
    if left.shape != right.shape or left.ndim != 4:
        raise ad.ShapeMismatch(f"feature maps differ: {left.shape} vs {right.shape}")
    n, c, h, w = left.shape
    if num_disp > w:
        raise ad.ShapeMismatch(f"D={num_disp} exceeds feature width {w}")
    planes = []
    for d in range(num_disp):
        prod = left[:, :, :, d:] * right[:, :, :, : w - d] if d else left * right
        score = prod.sum(axis=1) * (1.0 / c)
        planes.append(ad.pad(score, ((0, 0), (0, 0), (d, 0))) if d else score)
    vol = ad.stack(planes, axis=-1)
    xs = np.arange(w)[:, None]
    ds = np.arange(num_disp)[None, :]
    penalty = np.where(ds > xs, MASKED_SCORE, 0.0)
    return vol + penalty[None, None]


def target_distribution(d_gt, num_disp: int) -> np.ndarray:
    """Softmax over bins of ``-2 |d - d_gt|``; broadcasts over a leading shape."""
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if not np.all(np.isfinite(d_gt)):
        raise ValueError("target disparity must be finite")
    logits = -2.0 * np.abs(np.arange(num_disp) - d_gt[..., None])
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LossParams:
    alpha: float = 1.0
    num_disp: int = 16
    # False: weight (1 - P)^(-alpha) as written; True: the classic (1 - P)^(+alpha)
    downweight: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.num_disp < 2:
            raise ValueError("need alpha >= 0 and at least 2 disparity bins")


def focal_weights(target: np.ndarray, params: LossParams) -> np.ndarray:
    exponent = params.alpha if params.downweight else -params.alpha
    return (1.0 - target) ** exponent


def stereo_focal_loss(pred: Tensor, d_gt: np.ndarray, mask: np.ndarray, params: LossParams | None = None) -> Tensor:
    """Focal-weighted cross-entropy averaged over masked pixels.

    ``pred`` holds per-pixel probabilities (..., D); ``d_gt`` is in bins;
    ``mask`` selects the overlap pixels with a valid target. Pixels outside
    the mask never enter the graph, so they get exactly zero gradient.
    """
    params = params or LossParams()
    pred = ad.as_tensor(pred)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape[-1] != params.num_disp or pred.shape[:-1] != mask.shape or np.shape(d_gt) != mask.shape:
        raise ad.ShapeMismatch(f"prediction {pred.shape}, target {np.shape(d_gt)}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        warnings.warn("overlap mask is empty; disparity loss is zero", EmptyOverlapWarning, stacklevel=2)
        return ad.mul(ad.sum_(pred), 0.0)
    target = target_distribution(np.asarray(d_gt)[mask], params.num_disp)
    coeff = focal_weights(target, params) * target
    picked = ad.gather(pred, mask)
    terms = ad.log(picked, floor=LOG_FLOOR) * (-coeff)
    return ad.sum_(terms) * (1.0 / count)


def mask_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Cell is set when strictly more than half of its pixels are set."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise IndivisibleFactor(f"factor {factor} does not divide {h}x{w}")
    blocks = mask.reshape(*mask.shape[:-2], h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(-3, -1)) * 2 > factor * factor


def disparity_downsample(disp: np.ndarray, valid: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Block mean of valid full-resolution disparities, still in full-res pixels.

    A cell is valid when more than half its pixels are.
    """
    valid = np.asarray(valid, dtype=bool)
    cell_valid = mask_downsample(valid, factor)
    h, w = valid.shape[-2:]
    shape = (*valid.shape[:-2], h // factor, factor, w // factor, factor)
    total = np.where(valid, disp, 0.0).reshape(shape).sum(axis=(-3, -1))
    count = valid.reshape(shape).sum(axis=(-3, -1))
    mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return np.where(cell_valid, mean, 0.0), cell_valid


def expected_disparity(prob: np.ndarray) -> np.ndarray:
    """Sub-pixel expectation over bins (feature-resolution units)."""
    return (np.asarray(prob) * np.arange(prob.shape[-1])).sum(axis=-1)


@dataclass
class DisparityOutput:
    volume: Tensor
    prob: Tensor
    extra: dict = field(default_factory=dict)


def disparity_forward(encoder_left: Tensor, encoder_right: Tensor, num_disp: int) -> DisparityOutput:
    vol = build_cost_volume(encoder_left, encoder_right, num_disp)
    return DisparityOutput(vol, ad.softmax(vol, axis=-1))
