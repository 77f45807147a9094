"""Training, inference, and experiment helpers for the slice-stack detector.

All randomness flows from a single experiment seed through named
sub-streams (sample order, anchor sampling, augmentation, model init), so
reruns with the same configuration are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorConfig, assign_targets
from .backbone import BackboneConfig
from .data import SliceSample, augment, clip_hu, extract_window, resample_z
from .detector import Detector, decode_and_nms, detection_loss
from .tensor import Tensor
from .nn import SGD


@dataclass
class ModelSettings:
    """Desk-scale detector configuration (paper-scale widths by default)."""
    variant: str = "MP3D63"
    pooling_policy: str = "anisotropic"
    conversion: str = "GTM"
    input_slices: int = 9
    stem_channels: int = 64
    stage_blocks: tuple = (3, 4, 6, 3)
    stage_channels: tuple = (256, 512, 1024, 2048)
    gn_groups: int = 32
    fpn_channels: int = 256
    head_channels: int = None

    def backbone_config(self):
        return BackboneConfig(variant=self.variant, pooling_policy=self.pooling_policy,
                              conversion=self.conversion, input_slices=self.input_slices,
                              stage_blocks=self.stage_blocks, stage_channels=self.stage_channels,
                              stem_channels=self.stem_channels, gn_groups=self.gn_groups)


@dataclass
class TrainSettings:
    epochs: int = 20
    base_lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    # step decay by 10x at these schedule fractions (epochs 13 and 18 of 20)
    decay_fractions: tuple = (0.65, 0.9)
    anchor_batch: int = 256
    pos_fraction: float = 0.5
    augment_flips: bool = True
    augment_scales: tuple = None      # None: keep native resolution
    grad_clip: float = 10.0


def build_detector(settings: ModelSettings, seed=0) -> Detector:
    return Detector(settings.backbone_config(), AnchorConfig(),
                    fpn_channels=settings.fpn_channels,
                    head_channels=settings.head_channels, seed=seed)


def preprocess_volume(volume: Volume) -> Volume:
    """Standard CT path: z-resampling to the target spacing, HU clip+map."""
    return clip_hu(resample_z(volume))


def make_samples(dataset, depth, include_empty=True):
    """One training/eval sample per (volume, target slice).

    Target slices are every slice carrying a GT box plus, when
    include_empty, every remaining slice (these supply pure negatives,
    including the confuser slices)."""
    samples = []
    for vol_idx, sv in enumerate(dataset):
        vol = preprocess_volume(sv.volume)
        for s in range(vol.num_slices):
            has_boxes = s in sv.boxes_by_slice and len(sv.boxes_by_slice[s]) > 0
            if not has_boxes and not include_empty:
                continue
            sample = extract_window(vol, s, depth)
            boxes = sv.boxes_by_slice.get(s)
            if boxes is not None and len(boxes):
                sample = SliceSample(sample.window, s, np.asarray(boxes, dtype=np.float32))
            samples.append((f"volume_{vol_idx:04d}/slice_{s:03d}", sample))
    return samples


def _lr_at(step, total_steps, settings: TrainSettings):
    lr = settings.base_lr
    for frac in settings.decay_fractions:
        if step >= frac * total_steps:
            lr *= 0.1
    return lr


def train_detector(model: Detector, samples, settings: TrainSettings,
                   loss_csv_path=None, loss_threshold=None, epoch_callback=None):
    """SGD training loop; returns history rows (step, loss_cls, loss_reg,
    loss_total). Aborts on non-finite loss. When loss_threshold is given,
    also reports the first step whose running-mean loss drops below it.
    epoch_callback(epoch, mean_epoch_loss) fires after each epoch."""
    ss = np.random.SeedSequence([settings.seed, 0x7EA1])
    order_rng, sampler_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    opt = SGD(model, settings.base_lr, settings.momentum)
    anchor_cache = {}
    history = []
    step = 0
    total_steps = settings.epochs * len(samples)
    first_below = None
    window_losses = []
    for epoch in range(settings.epochs):
        idx = order_rng.permutation(len(samples))
        for i in idx:
            _, sample = samples[i]
            if settings.augment_flips or settings.augment_scales:
                scales = settings.augment_scales or (sample.window.shape[1],)
                flip_p = 0.5 if settings.augment_flips else 0.0
                sample = augment(sample, aug_rng.integers(2**63), scales=scales,
                                 flip_prob=flip_p)
            hw = sample.window.shape[1:]
            if hw not in anchor_cache:
                anchor_cache[hw] = model.image_anchors(hw)
            anchors = anchor_cache[hw]
            x = Tensor(sample.window[None, None], dtype=np.float32)
            logits, deltas = model(x)
            assignment = assign_targets(anchors, sample.gt_boxes)
            loss, l_cls, l_reg = detection_loss(
                logits, deltas, assignment, sampler_rng,
                batch_size=settings.anchor_batch, pos_fraction=settings.pos_fraction)
            total = loss.item()
            if not np.isfinite(total):
                raise FloatingPointError(
                    f"training diverged at step {step}: loss={total} "
                    f"(cls={l_cls}, reg={l_reg})")
            opt.zero_grad()
            loss.backward()
            if settings.grad_clip:
                _clip_gradients(opt.params, settings.grad_clip)
            opt.lr = _lr_at(step, total_steps, settings)
            opt.step()
            history.append((step, l_cls, l_reg, total))
            window_losses.append(total)
            if len(window_losses) > 20:
                window_losses.pop(0)
            if loss_threshold is not None and first_below is None \
                    and len(window_losses) == 20 \
                    and float(np.mean(window_losses)) < loss_threshold:
                first_below = step
            step += 1
        if epoch_callback is not None:
            epoch_losses = [r[3] for r in history[-len(samples):]]
            epoch_callback(epoch, float(np.mean(epoch_losses)))
    if loss_csv_path:
        write_loss_csv(history, loss_csv_path)
    if loss_threshold is not None:
        return history, first_below
    return history


def _clip_gradients(params, max_norm):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def write_loss_csv(history, path):
    with open(path, "w") as f:
        f.write("step,loss_cls,loss_reg,loss_total\n")
        for step, l_cls, l_reg, total in history:
            f.write(f"{step},{l_cls:.6f},{l_reg:.6f},{total:.6f}\n")


def read_loss_csv(path):
    rows = []
    with open(path) as f:
        next(f)
        for line in f:
            step, l_cls, l_reg, total = line.strip().split(",")
            rows.append((int(step), float(l_cls), float(l_reg), float(total)))
    return rows


def predict(model: Detector, sample: SliceSample, score_thresh=0.05,
            nms_iou=0.5, max_dets=100):
    """Detections for one slice window."""
    hw = sample.window.shape[1:]
    anchors = model.image_anchors(hw)
    x = Tensor(sample.window[None, None], dtype=np.float32)
    logits, deltas = model(x)
    return decode_and_nms(logits.data, deltas.data, anchors, hw,
                          score_thresh=score_thresh, nms_iou=nms_iou, max_dets=max_dets)


def predict_dataset(model: Detector, samples, score_thresh=0.05):
    """preds/gts keyed by sample id, ready for the eval kit."""
    preds, gts = {}, {}
    for sample_id, sample in samples:
        dets = predict(model, sample, score_thresh=score_thresh)
        preds[sample_id] = [(d.score, d.box) for d in dets]
        gts[sample_id] = [tuple(b) for b in sample.gt_boxes]
    return preds, gts


def write_predictions_csv(preds_by_image, path):
    """Prediction CSV: image_id,x1,y1,x2,y2,score (4 decimal places)."""
    with open(path, "w") as f:
        f.write("image_id,x1,y1,x2,y2,score\n")
        for image_id in sorted(preds_by_image):
            for score, box in preds_by_image[image_id]:
                f.write(f"{image_id}," + ",".join(f"{v:.4f}" for v in box)
                        + f",{score:.4f}\n")


def read_predictions_csv(path):
    preds = {}
    with open(path) as f:
        next(f)
        for line in f:
            parts = line.strip().split(",")
            image_id = parts[0]
            x1, y1, x2, y2, score = (float(v) for v in parts[1:6])
            preds.setdefault(image_id, []).append((score, (x1, y1, x2, y2)))
    return preds


def read_gt_csv(path):
    gts = {}
    with open(path) as f:
        next(f)
        for line in f:
            parts = line.strip().split(",")
            image_id = f"{parts[0]}/slice_{int(parts[1]):03d}"
            box = tuple(float(v) for v in parts[2:6])
            gts.setdefault(image_id, []).append(box)
    return gts
