"""Co-training loop, evaluation and the region probe."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ExperimentConfig
from .detector import (
    Detector,
    QuerySampling,
    adversarial_term,
    assign_region_label,
    box_targets,
    build_sampling,
    discriminate,
    match_and_detect_loss,
    region_loss,
    sample_query_features,
    total_loss,
)
from .disparity_head import (
    Encoder,
    disparity_downsample,
    disparity_forward,
    expected_disparity,
    mask_downsample,
    stereo_focal_loss,
)
from .geometry import CameraRig, RectifiedPair, compute_overlap_mask, default_rig, rectify_pair, warp_image
from .io import load_rig
from .scene import Scene, gt_disparity, render, sample_scene
from .sgm import sgm_disparity

log = logging.getLogger(__name__)

CSV_VERSION = "# surround3d-metrics v1"
CSV_COLUMNS = ("step", "L_cls", "L_box", "L_d", "L_r", "total", "disc_acc", "epe")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class PairData:
    left: np.ndarray
    right: np.ndarray
    target: np.ndarray  # supervision disparity in feature bins
    target_mask: np.ndarray  # feature-resolution supervision cells
    true_disp: np.ndarray  # analytic disparity per cell, full-res pixels
    eval_mask: np.ndarray  # overlap cells with valid analytic disparity


@dataclass
class SceneData:
    scene: Scene
    images: np.ndarray
    crops_left: np.ndarray
    crops_right: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray
    true_disp: np.ndarray
    eval_mask: np.ndarray
    ref_points: np.ndarray
    labels: np.ndarray
    sampling: QuerySampling
    gt_classes: np.ndarray
    gt_boxes: np.ndarray


class DataSource:
    """Scene rendering, pseudo ground truth and query sampling, cached per seed."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.rig: CameraRig = load_rig(config.rig) if config.rig else default_rig()
        self.factor = config.encoder.factor
        dr, spr = tuple(config.depth_range), config.samples_per_ray
        self.camera_masks: dict[int, np.ndarray] = {}
        self.pairs: list[RectifiedPair] = []
        self.pair_masks: list[np.ndarray] = []
        for s, t in self.rig.adjacent_pairs:
            m_st, _ = compute_overlap_mask(self.rig, s, t, dr, spr)
            m_ts, _ = compute_overlap_mask(self.rig, t, s, dr, spr)
            for cam, m in ((s, m_st.mask), (t, m_ts.mask)):
                self.camera_masks[cam] = self.camera_masks.get(cam, np.zeros_like(m)) | m
            pair = rectify_pair(self.rig, s, t, tuple(config.crop), overlap_mask=m_st.mask)
            self.pairs.append(pair)
            band = warp_image(m_st.mask.astype(np.uint8), self.rig[s], pair.left_camera(), nearest=True)
            self.pair_masks.append(band.astype(bool))
        h, w = self.rig[0].height, self.rig[0].width
        self.feat_hw = (h // self.factor, w // self.factor)
        self._cache: dict[int, SceneData] = {}

    def _pair_data(self, idx: int, scene: Scene) -> PairData:
        cfg = self.config
        pair = self.pairs[idx]
        lcam, rcam = pair.left_camera(), pair.right_camera()
        lv, rv = render(lcam, scene), render(rcam, scene)
        truth = gt_disparity(pair, scene, (lv, rv))
        # overlap at the true depth: the 3-D point must land inside the original target image
        uu, vv = lcam.pixel_grid()
        finite = np.isfinite(lv.depth)
        pts = lcam.unproject_points(uu, vv, np.where(finite, lv.depth, 1.0))
        tgt = self.rig[pair.target_idx]
        pix, z = tgt.project_points(pts)
        seen = finite & (z > 0) & tgt.intrinsics.contains(pix[..., 0], pix[..., 1])
        overlap = self.pair_masks[idx] & seen

        if cfg.pseudo_gt == "sgm":
            pseudo = sgm_disparity(lv.intensity, rv.intensity, cfg.sgm_num_disp, cfg.sgm, cfg.sgm_mode)
        else:
            pseudo = truth
        f = self.factor
        cell_overlap = mask_downsample(overlap, f)
        target, target_ok = disparity_downsample(pseudo.disparity, pseudo.valid, f)
        true_disp, true_ok = disparity_downsample(truth.disparity, truth.valid, f)
        bins = target / f
        target_ok &= bins <= cfg.loss.num_disp - 1
        return PairData(
            lv.intensity, rv.intensity, bins, cell_overlap & target_ok, true_disp, cell_overlap & true_ok
        )

    def _reference_points(self, seed: int):
        cfg = self.config
        q = cfg.detector.num_queries
        rng = np.random.default_rng([seed, 7])
        want = (q // 2, q - q // 2)  # (non-overlap, overlap)
        picked: list[list[np.ndarray]] = [[], []]
        for _ in range(50):
            n = 4000
            ang = rng.uniform(-math.pi, math.pi, n)
            rad = rng.uniform(*cfg.ref_radius, n)
            z = rng.uniform(*cfg.ref_height, n)
            pts = np.stack([rad * np.cos(ang), rad * np.sin(ang), z], axis=1)
            visible = np.zeros(n, dtype=bool)
            for cam in self.rig.cameras:
                pix, depth = cam.project_points(pts)
                visible |= (depth > 0) & cam.intrinsics.contains(pix[:, 0], pix[:, 1])
            labels = assign_region_label(pts, self.rig, self.camera_masks)
            for lab in (0, 1):
                room = want[lab] - len(picked[lab])
                if room > 0:
                    picked[lab].extend(pts[visible & (labels == lab)][:room])
            if all(len(picked[i]) >= want[i] for i in (0, 1)):
                break
        else:
            raise RuntimeError("could not sample balanced reference points")
        pts = np.array(picked[0] + picked[1])
        order = rng.permutation(len(pts))
        pts = pts[order]
        return pts, assign_region_label(pts, self.rig, self.camera_masks)

    def get(self, seed: int) -> SceneData:
        if seed in self._cache:
            return self._cache[seed]
        cfg = self.config
        scene = sample_scene(seed, cfg.scene)
        images = np.stack([render(cam, scene).intensity for cam in self.rig.cameras])
        pdata = [self._pair_data(i, scene) for i in range(len(self.pairs))]
        refs, labels = self._reference_points(seed)
        sampling = build_sampling(refs, self.rig, self.feat_hw, self.factor)
        data = SceneData(
            scene=scene,
            images=images,
            crops_left=np.stack([p.left for p in pdata]),
            crops_right=np.stack([p.right for p in pdata]),
            target=np.stack([p.target for p in pdata]),
            target_mask=np.stack([p.target_mask for p in pdata]),
            true_disp=np.stack([p.true_disp for p in pdata]),
            eval_mask=np.stack([p.eval_mask for p in pdata]),
            ref_points=refs,
            labels=labels,
            sampling=sampling,
            gt_classes=np.array([b.class_id for b in scene.boxes], dtype=np.int64),
            gt_boxes=box_targets(scene.boxes),
        )
        self._cache[seed] = data
        return data


class Model:
    """Shared encoder, detector and discriminator parameters."""

    def __init__(self, config: ExperimentConfig, seed: int | None = None):
        rng = np.random.default_rng([config.seed if seed is None else seed, 1])
        self.config = config
        self.encoder = Encoder(config.encoder, rng)
        self.detector = Detector(config.detector, self.encoder.channels, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {t.name: t for t in self.encoder.parameters()}
        out.update(self.detector.params)
        out.update(self.detector.disc)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        if set(state) != set(params):
            raise ValueError(f"checkpoint keys differ from the model: {sorted(set(state) ^ set(params))}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} vs model {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)


@dataclass
class StepResult:
    objective: Tensor
    l_cls: float
    l_box: float
    l_d: float
    l_r: float
    total: float
    disc_acc: float
    epe: float
    bad1: float
    center_err: float
    features: np.ndarray
    eval_cells: int


def forward(model: Model, data: SceneData, config: ExperimentConfig, with_disc: bool | None = None) -> StepResult:
    """Full forward pass on one scene; builds the training objective."""
    weights = config.effective_weights
    enc = model.encoder
    feats_cam = enc(data.images)
    crops = np.concatenate([data.crops_left, data.crops_right])
    feats_crop = enc(crops)
    n_pairs = len(data.crops_left)
    out = disparity_forward(feats_crop[:n_pairs], feats_crop[n_pairs:], config.loss.num_disp)
    l_d = stereo_focal_loss(out.prob, data.target, data.target_mask, config.loss)

    det = model.detector
    q = sample_query_features(det.params["query.embed"], feats_cam, data.sampling, det.params)
    logits, boxes = det.heads(q, data.ref_points)
    dl = match_and_detect_loss(logits, boxes, data.gt_classes, data.gt_boxes, config.detector.num_classes)

    objective = dl.cls * weights.cls + dl.box * weights.box + l_d * weights.disparity
    use_disc = config.adversarial if with_disc is None else with_disc
    if use_disc:
        term, l_r, disc_logits = adversarial_term(det.disc, q, data.labels, weights.region, config.adversarial_mode)
        objective = objective + term
    else:
        disc_logits = discriminate(det.disc, Tensor(q.data))
        l_r = region_loss(disc_logits, data.labels)

    pred = np.argmax(disc_logits.data, axis=1)  # ties -> class 0
    acc = float((pred == data.labels).mean())
    exp_full = expected_disparity(out.prob.data) * enc.config.factor
    err = np.abs(exp_full - data.true_disp)[data.eval_mask]
    epe = float(err.mean()) if err.size else 0.0
    bad1 = float((err > 1.0).mean()) if err.size else 0.0
    if dl.rows.size:
        center_err = float(np.linalg.norm(boxes.data[dl.rows, :3] - data.gt_boxes[dl.cols, :3], axis=1).mean())
    else:
        center_err = 0.0
    lc, lb, ld, lr = dl.cls.item(), dl.box.item(), l_d.item(), l_r.item()
    return StepResult(
        objective, lc, lb, ld, lr, total_loss(lc, lb, ld, lr, weights), acc, epe, bad1, center_err, q.data.copy(),
        int(err.size),
    )  # fmt: skip


@dataclass
class MetricsReport:
    epe: float
    bad1_rate: float
    disc_accuracy: float
    center_error: float
    label_base_rate: float
    losses: dict[str, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epe": self.epe,
            "bad1_rate": self.bad1_rate,
            "disc_accuracy": self.disc_accuracy,
            "center_error": self.center_error,
            "label_base_rate": self.label_base_rate,
            "losses": self.losses,
        }


def evaluate(model: Model, source: DataSource, config: ExperimentConfig) -> MetricsReport:
    """Metrics over the held-out seeds; parameters are not touched."""
    errs_w, cells, accs, centers, zeros, losses = 0.0, 0, [], [], [], {"L_cls": 0.0, "L_box": 0.0, "L_d": 0.0, "L_r": 0.0}
    bad = 0.0
    for s in config.eval_seeds:
        data = source.get(s)
        r = forward(model, data, config, with_disc=False)
        errs_w += r.epe * r.eval_cells
        bad += r.bad1 * r.eval_cells
        cells += r.eval_cells
        accs.append(r.disc_acc)
        centers.append(r.center_err)
        zeros.append(float((data.labels == 0).mean()))
        for k, v in zip(losses, (r.l_cls, r.l_box, r.l_d, r.l_r)):
            losses[k] += v / len(config.eval_seeds)
    return MetricsReport(
        errs_w / max(cells, 1), bad / max(cells, 1), float(np.mean(accs)), float(np.mean(centers)),
        float(np.mean(zeros)), losses,
    )  # fmt: skip


@dataclass
class TrainingResult:
    initial: MetricsReport
    final: MetricsReport
    history: list[dict]
    model: Model


def _fmt(x) -> str:
    return x if isinstance(x, str) else format(x, ".17g") if isinstance(x, float) else str(x)


def write_metrics_csv(path, history: list[dict]):
    with open(path, "w", newline="") as fh:
        fh.write(CSV_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in history:
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    with open(path) as fh:
        first = fh.readline().strip()
        if first != CSV_VERSION:
            raise ValueError(f"{path}: unexpected metrics header {first!r}")
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def run_training(config: ExperimentConfig, out_dir=None, source: DataSource | None = None, progress=None) -> TrainingResult:
    """Co-train encoder, disparity head, detector and discriminator with SGD.

    Each step draws one training scene (seeded), runs the full forward pass,
    back-propagates the routed objective and applies ``p -= lr * g``.
    """
    config.validate()
    source = source or DataSource(config)
    model = Model(config)
    initial = evaluate(model, source, config)
    rng = np.random.default_rng([config.seed, 2])
    params = list(model.named_parameters().values())
    history: list[dict] = []
    for step in range(1, config.steps + 1):
        seed = config.train_seed_base + int(rng.integers(config.train_pool))
        data = source.get(seed)
        for p in params:
            p.zero_grad()
        res = forward(model, data, config)
        if not math.isfinite(res.objective.item()):
            raise NonFiniteLoss(f"step {step}: objective {res.objective.item()} (scene seed {seed})")
        res.objective.backward()
        new = ad.sgd_step([p.data for p in params], [p.grad for p in params], config.lr)
        for p, v in zip(params, new):
            if not np.all(np.isfinite(v)):
                raise NonFiniteLoss(f"step {step}: parameter {p.name} became non-finite")
            p.data = v
        if step % config.log_every == 0 or step == config.steps:
            history.append(
                {
                    "step": step,
                    "L_cls": res.l_cls,
                    "L_box": res.l_box,
                    "L_d": res.l_d,
                    "L_r": res.l_r,
                    "total": res.total,
                    "disc_acc": res.disc_acc,
                    "epe": res.epe,
                }
            )
        if progress is not None:
            progress(step, res)
    final = evaluate(model, source, config)
    result = TrainingResult(initial, final, history, model)
    if out_dir is not None:
        save_run(result, out_dir)
    return result


def save_run(result: TrainingResult, out_dir):
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", result.history)
    ad.save_checkpoint(out / "checkpoint.or3d", result.model.state_dict())
    with open(out / "report.json", "w") as fh:
        json.dump({"initial": result.initial.to_dict(), "final": result.final.to_dict()}, fh, indent=2, sort_keys=True)


def run_eval(checkpoint, config: ExperimentConfig, source: DataSource | None = None) -> MetricsReport:
    """Evaluate a checkpoint (path or state dict) on the held-out seeds."""
    state = ad.load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    model = Model(config)
    model.load_state_dict(state)
    return evaluate(model, source or DataSource(config), config)


def collect_features(model: Model, source: DataSource, config: ExperimentConfig, seeds) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for s in seeds:
        data = source.get(s)
        r = forward(model, data, config, with_disc=False)
        feats.append(r.features)
        labels.append(data.labels)
    return np.concatenate(feats), np.concatenate(labels)


def train_probe(
    model: Model,
    source: DataSource,
    config: ExperimentConfig,
    train_scenes: int = 72,
    heldout_seeds=tuple(range(32)),
    steps: int = 1500,
    lr: float = 0.1,
    weight_decay: float = 1e-2,
    seed: int = 0,
) -> float:
    """Fit a fresh discriminator on frozen query features; held-out accuracy.

    The probe trains on ``train_scenes`` scenes from the training seed range
    (the pool plus its continuation) and is scored on ``heldout_seeds``.
    """
    lo = config.train_seed_base
    if any(lo <= s < lo + train_scenes for s in heldout_seeds):
        raise ValueError("probe held-out seeds overlap its training scenes")
    x_tr, y_tr = collect_features(model, source, config, [lo + i for i in range(train_scenes)])
    x_ev, y_ev = collect_features(model, source, config, heldout_seeds)
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-6
    x_tr, x_ev = (x_tr - mu) / sd, (x_ev - mu) / sd
    probe = Detector(config.detector, model.encoder.channels, np.random.default_rng([seed, 3])).disc
    params = list(probe.values())
    xt = Tensor(x_tr)
    for _ in range(steps):
        for p in params:
            p.zero_grad()
        loss = region_loss(discriminate(probe, xt), y_tr)
        loss.backward()
        grads = [p.grad + weight_decay * p.data for p in params]
        for p, v in zip(params, ad.sgd_step([p.data for p in params], grads, lr)):
            p.data = v
    pred = np.argmax(discriminate(probe, Tensor(x_ev)).data, axis=1)
    return float((pred == y_ev).mean())
