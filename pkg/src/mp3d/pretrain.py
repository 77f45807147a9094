"""Simulated 2D-image pre-training and the channel/slice reinterpretation
bridging it to volumetric inputs.

An RGB image [3, H, W] and a 3-slice stack [1, 3, H, W] are the same bytes
viewed differently; training a 3-slice detector on synthetic "photographic"
images therefore yields a weight store that depth transfer can widen to any
slice count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SliceSample, _add_ellipsoid
from .train import ModelSettings, TrainSettings, build_detector, train_detector
from .weights import WeightStore


def rgb_to_volume(image):
    """Reinterpret a channels-first RGB image [3, H, W] as a single-channel
    3-slice volume [1, 3, H, W]. Bijective with volume_to_rgb."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got shape {image.shape}")
    return image.reshape(1, *image.shape)


def volume_to_rgb(volume):
    """Inverse of rgb_to_volume."""
    volume = np.asarray(volume)
    if volume.ndim != 4 or volume.shape[:2] != (1, 3):
        raise ValueError(f"expected a [1, 3, H, W] volume, got shape {volume.shape}")
    return volume.reshape(*volume.shape[1:])


@dataclass
class PretrainConfig:
    num_images: int = 60
    height: int = 64
    width: int = 64
    objects_per_image: tuple = (1, 3)
    radius_xy: tuple = (5.0, 9.0)
    contrast: tuple = (0.25, 0.45)
    noise_sigma: float = 0.04
    seed: int = 0


def generate_rgb_detection_set(config: PretrainConfig):
    """Seed-deterministic list of (image [3, H, W], boxes [n, 4]).

    Objects are blurry blobs spanning all three channels with slight
    channel-to-channel spread, so the stand-in "photographic" task still
    rewards cross-channel mixing."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x26B]))
    out = []
    margin = config.radius_xy[1] + 2
    for _ in range(config.num_images):
        data = np.zeros((3, config.height, config.width), dtype=np.float32)
        boxes = []
        for _ in range(int(rng.integers(config.objects_per_image[0],
                                        config.objects_per_image[1] + 1))):
            a = rng.uniform(*config.radius_xy)
            b = rng.uniform(*config.radius_xy)
            cy = rng.uniform(margin, config.height - margin)
            cx = rng.uniform(margin, config.width - margin)
            amp = rng.uniform(*config.contrast)
            # channel extent ~2 keeps all three channels lit unevenly
            slice_boxes = _add_ellipsoid(data, 1.0, cy, cx, a, b,
                                         rng.uniform(1.6, 2.4), amp)
            boxes.append(slice_boxes[1])
        data += rng.normal(0.0, config.noise_sigma, size=data.shape).astype(np.float32)
        out.append((np.clip(data, 0.0, 1.0).astype(np.float32),
                    np.asarray(boxes, dtype=np.float32)))
    return out


def simulate_pretraining(model_settings: ModelSettings, pretrain_config: PretrainConfig,
                         train_settings: TrainSettings, loss_csv_path=None) -> WeightStore:
    """Train a 3-slice detector on the synthetic image set and return its
    weight store (metadata records the pooling policy and slice count).

    Zero epochs returns the freshly initialized weights unchanged, which is
    still a valid store for transfer experiments.
    """
    if model_settings.input_slices != 3:
        raise ValueError("simulated pre-training runs at 3 input slices "
                         f"(got {model_settings.input_slices})")
    model = build_detector(model_settings, seed=train_settings.seed)
    images = generate_rgb_detection_set(pretrain_config)
    samples = []
    for i, (image, boxes) in enumerate(images):
        window = rgb_to_volume(image)[0]   # [3, H, W] slice stack
        samples.append((f"image_{i:04d}", SliceSample(window, 1, boxes)))
    if train_settings.epochs > 0:
        train_detector(model, samples, train_settings, loss_csv_path=loss_csv_path)
    elif loss_csv_path:
        from .train import write_loss_csv
        write_loss_csv([], loss_csv_path)
    return WeightStore.from_model(model, metadata={
        "pooling_policy": model_settings.pooling_policy,
        "training_slices": model_settings.input_slices,
    })
