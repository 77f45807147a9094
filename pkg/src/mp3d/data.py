"""CT-style preprocessing, augmentation, and the synthetic benchmark
generator.

The synthetic volumes are the package's reason to exist at desk scale:
true lesions are 3D ellipsoid intensity bumps spanning several slices,
while "confusers" are single-slice disks whose in-plane appearance matches
a lesion cross-section but which vanish in adjacent slices. A detector
restricted to one slice cannot tell them apart; one with inter-slice
context can.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

HU_CLIP_MIN = -1024.0
HU_CLIP_MAX = 1050.0
TARGET_Z_SPACING_MM = 2.5
AUGMENT_SCALES = (448, 512, 576)


@dataclass
class Volume:
    """CT-like scalar field [S, H, W] with slice-spacing metadata."""
    data: np.ndarray
    z_spacing_mm: float
    xy_spacing_mm: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError(f"volume must be [S, H, W] with S >= 1, got {self.data.shape}")
        if self.z_spacing_mm <= 0 or self.xy_spacing_mm <= 0:
            raise ValueError("spacings must be positive")

    @property
    def num_slices(self):
        return self.data.shape[0]


@dataclass
class SliceSample:
    """A depth window around a target slice plus its center-slice boxes."""
    window: np.ndarray            # [D, H, W], values in [0, 1]
    center_index: int
    gt_boxes: np.ndarray          # [n, 4] on the center slice

    def __post_init__(self):
        self.window = np.asarray(self.window, dtype=np.float32)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float32).reshape(-1, 4)
        if self.window.shape[0] % 2 == 0:
            raise ValueError("window depth must be odd")


def clip_hu(volume: Volume) -> Volume:
    """Clamp to the CT intensity window and map linearly to [0, 1]."""
    clipped = np.clip(volume.data, HU_CLIP_MIN, HU_CLIP_MAX)
    normalized = (clipped - HU_CLIP_MIN) / (HU_CLIP_MAX - HU_CLIP_MIN)
    return Volume(normalized.astype(np.float32), volume.z_spacing_mm, volume.xy_spacing_mm)


def resample_z(volume: Volume, target_mm=TARGET_Z_SPACING_MM) -> Volume:
    """Linear interpolation along z at positions k * target_mm from slice 0.

    Output slice count is floor((S-1) * spacing / target) + 1. A
    single-slice volume passes through unchanged (nothing to interpolate).
    """
    s = volume.num_slices
    spacing = volume.z_spacing_mm
    if spacing == target_mm:
        return Volume(volume.data.copy(), target_mm, volume.xy_spacing_mm)
    if s == 1:
        import warnings
        warnings.warn("single-slice volume: z-resampling is a passthrough")
        return Volume(volume.data.copy(), target_mm, volume.xy_spacing_mm)
    n_out = int(np.floor((s - 1) * spacing / target_mm)) + 1
    positions = np.arange(n_out) * target_mm / spacing   # in input-slice units
    lo = np.floor(positions).astype(np.int64)
    lo = np.minimum(lo, s - 1)
    hi = np.minimum(lo + 1, s - 1)
    frac = (positions - lo).astype(np.float32).reshape(-1, 1, 1)
    out = (1.0 - frac) * volume.data[lo] + frac * volume.data[hi]
    return Volume(out.astype(np.float32), target_mm, volume.xy_spacing_mm)


def extract_window(volume: Volume, center: int, depth: int) -> SliceSample:
    """Depth window [center - (D-1)/2, center + (D-1)/2], edge-replicated
    past the volume boundaries."""
    if depth % 2 == 0:
        raise ValueError("window depth must be odd")
    s = volume.num_slices
    if not 0 <= center < s:
        raise ValueError(f"center index {center} out of range [0, {s})")
    half = (depth - 1) // 2
    idx = np.clip(np.arange(center - half, center + half + 1), 0, s - 1)
    return SliceSample(volume.data[idx], center, np.zeros((0, 4), dtype=np.float32))


def _resize_bilinear(img, out_h, out_w):
    """Bilinear resize with the half-pixel-center convention."""
    in_h, in_w = img.shape[-2:]
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)
    top = img[..., y0, :][..., :, x0] * (1 - wy[:, None]) + img[..., y1, :][..., :, x0] * wy[:, None]
    out = top * (1 - wx[None, :]) + (
        img[..., y0, :][..., :, x1] * (1 - wy[:, None])
        + img[..., y1, :][..., :, x1] * wy[:, None]) * wx[None, :]
    return out.astype(np.float32)


def augment(sample: SliceSample, seed, scales=AUGMENT_SCALES,
            flip_prob=0.5) -> SliceSample:
    """Seeded flips (horizontal and vertical, each with probability 1/2,
    applied identically to all slices) and a uniform choice among the
    square rescale targets; boxes transformed consistently."""
    rng = np.random.default_rng(seed)
    window = sample.window
    boxes = sample.gt_boxes.copy()
    h, w = window.shape[1:]
    if rng.random() < flip_prob:   # horizontal
        window = window[:, :, ::-1]
        boxes = boxes[:, [2, 1, 0, 3]].copy() if len(boxes) else boxes
        if len(boxes):
            boxes[:, 0] = w - boxes[:, 0]
            boxes[:, 2] = w - boxes[:, 2]
    if rng.random() < flip_prob:   # vertical
        window = window[:, ::-1, :]
        boxes = boxes[:, [0, 3, 2, 1]].copy() if len(boxes) else boxes
        if len(boxes):
            boxes[:, 1] = h - boxes[:, 1]
            boxes[:, 3] = h - boxes[:, 3]
    target = int(rng.choice(scales))
    if (h, w) != (target, target):
        window = np.stack([_resize_bilinear(sl, target, target) for sl in window])
        if len(boxes):
            boxes = boxes * np.array([target / w, target / h, target / w, target / h],
                                     dtype=np.float32)
    return SliceSample(np.ascontiguousarray(window), sample.center_index, boxes)


# -- synthetic dataset -----------------------------------------------------

@dataclass
class SyntheticConfig:
    num_volumes: int = 200
    height: int = 64
    width: int = 64
    slices: int = 16
    lesions_per_volume: tuple = (1, 3)       # inclusive range
    lesion_radius_xy: tuple = (5.0, 9.0)     # semi-axes a, b in voxels
    lesion_radius_z: tuple = (1.5, 3.0)      # semi-axis c in slices (>= 1.5)
    confusers_per_volume: tuple = (1, 3)
    lesion_contrast: tuple = (0.25, 0.45)
    noise_sigma: float = 0.04
    z_spacing_mm: float = 2.5
    seed: int = 0

    def __post_init__(self):
        for name, rng_pair in (("lesions_per_volume", self.lesions_per_volume),
                               ("confusers_per_volume", self.confusers_per_volume),
                               ("lesion_radius_xy", self.lesion_radius_xy),
                               ("lesion_radius_z", self.lesion_radius_z),
                               ("lesion_contrast", self.lesion_contrast)):
            if rng_pair[1] < rng_pair[0]:
                raise ValueError(f"{name} range is empty: {rng_pair}")
        if self.lesion_radius_z[0] < 1.5:
            raise ValueError("lesion z semi-axis must span at least 1.5 slices")
        margin = self.lesion_radius_xy[1] + 2
        if 2 * margin >= min(self.height, self.width) or self.slices < 2 * self.lesion_radius_z[1] + 2:
            raise ValueError("configured lesion sizes cannot fit in the volume")


@dataclass
class SyntheticVolume:
    volume: Volume
    boxes_by_slice: dict        # slice index -> [n, 4] array
    lesion_meta: list = field(default_factory=list)
    confuser_meta: list = field(default_factory=list)


def _add_ellipsoid(data, cz, cy, cx, a, b, c, amplitude):
    """Smooth ellipsoid bump: amplitude * max(0, 1 - d^2) with d the
    normalized ellipsoidal distance. Returns per-slice tight boxes."""
    S, H, W = data.shape
    zz = np.arange(S).reshape(-1, 1, 1)
    yy = np.arange(H).reshape(1, -1, 1)
    xx = np.arange(W).reshape(1, 1, -1)
    d2 = ((zz - cz) / c) ** 2 + ((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2
    bump = amplitude * np.clip(1.0 - d2, 0.0, None)
    data += bump.astype(np.float32)
    boxes = {}
    for s in range(S):
        rel = 1.0 - ((s - cz) / c) ** 2
        if rel <= 0:
            continue
        rx = a * np.sqrt(rel)
        ry = b * np.sqrt(rel)
        if rx < 0.75 or ry < 0.75:
            continue
        boxes[s] = (cx - rx, cy - ry, cx + rx, cy + ry)
    return boxes


def _add_confuser(data, cz, cy, cx, radius, amplitude):
    """Single-slice disk with the same in-plane profile as a lesion's
    center cross-section."""
    _, H, W = data.shape
    yy = np.arange(H).reshape(-1, 1)
    xx = np.arange(W).reshape(1, -1)
    d2 = ((yy - cy) / radius) ** 2 + ((xx - cx) / radius) ** 2
    data[cz] += (amplitude * np.clip(1.0 - d2, 0.0, None)).astype(np.float32)


def generate_synthetic(config: SyntheticConfig):
    """Seed-deterministic list of SyntheticVolume.

    Lesions are ellipsoids spanning >= 3 slices with tight 2D boxes on
    every slice they intersect; confusers are single-slice disks matching
    a lesion center cross-section. Gaussian noise on top. Asserts the
    separability premise: confuser and lesion center-slice peak
    intensities are drawn from the same contrast range.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    out = []
    margin_xy = config.lesion_radius_xy[1] + 2
    for v in range(config.num_volumes):
        data = np.zeros((config.slices, config.height, config.width), dtype=np.float32)
        boxes_by_slice = {}
        lesion_meta, confuser_meta = [], []
        n_lesions = int(rng.integers(config.lesions_per_volume[0],
                                     config.lesions_per_volume[1] + 1))
        n_conf = int(rng.integers(config.confusers_per_volume[0],
                                  config.confusers_per_volume[1] + 1))
        for _ in range(n_lesions):
            a = rng.uniform(*config.lesion_radius_xy)
            b = rng.uniform(*config.lesion_radius_xy)
            c = rng.uniform(*config.lesion_radius_z)
            cz = rng.uniform(c + 0.5, config.slices - 1 - c - 0.5)
            cy = rng.uniform(margin_xy, config.height - margin_xy)
            cx = rng.uniform(margin_xy, config.width - margin_xy)
            amp = rng.uniform(*config.lesion_contrast)
            boxes = _add_ellipsoid(data, cz, cy, cx, a, b, c, amp)
            for s, box in boxes.items():
                boxes_by_slice.setdefault(s, []).append(box)
            lesion_meta.append({"center": (cz, cy, cx), "semi_axes": (a, b, c),
                                "amplitude": amp})
        for _ in range(n_conf):
            radius = rng.uniform(*config.lesion_radius_xy)
            cz = int(rng.integers(1, config.slices - 1))
            cy = rng.uniform(margin_xy, config.height - margin_xy)
            cx = rng.uniform(margin_xy, config.width - margin_xy)
            amp = rng.uniform(*config.lesion_contrast)
            _add_confuser(data, cz, cy, cx, radius, amp)
            confuser_meta.append({"center": (cz, cy, cx), "radius": radius,
                                  "amplitude": amp})
        data += rng.normal(0.0, config.noise_sigma, size=data.shape).astype(np.float32)
        # express in HU so the standard preprocessing path applies
        hu = data * (HU_CLIP_MAX - HU_CLIP_MIN) + HU_CLIP_MIN
        boxes_by_slice = {s: np.asarray(b, dtype=np.float32)
                          for s, b in sorted(boxes_by_slice.items())}
        out.append(SyntheticVolume(Volume(hu.astype(np.float32), config.z_spacing_mm),
                                   boxes_by_slice, lesion_meta, confuser_meta))
    return out


def separability_stats(dataset):
    """Empirical check of the confuser premise: overlap coefficient of
    lesion vs confuser center-slice peak amplitudes, and the off-slice
    persistence gap."""
    lesion_amps = [m["amplitude"] for sv in dataset for m in sv.lesion_meta]
    conf_amps = [m["amplitude"] for sv in dataset for m in sv.confuser_meta]
    if not lesion_amps or not conf_amps:
        return {"overlap_coefficient": 0.0, "lesion_offslice_persistence": 0.0,
                "confuser_offslice_persistence": 0.0}
    lo = max(min(lesion_amps), min(conf_amps))
    hi = min(max(lesion_amps), max(conf_amps))
    full_lo = min(min(lesion_amps), min(conf_amps))
    full_hi = max(max(lesion_amps), max(conf_amps))
    overlap = max(0.0, hi - lo) / max(full_hi - full_lo, 1e-9)
    persist_l, persist_c = [], []
    for sv in dataset:
        for m in sv.lesion_meta:
            cz = int(round(m["center"][0]))
            persist_l.append(_neighbor_ratio(sv, m["center"], cz))
        for m in sv.confuser_meta:
            persist_c.append(_neighbor_ratio(sv, m["center"], int(m["center"][0])))
    return {"overlap_coefficient": float(overlap),
            "lesion_offslice_persistence": float(np.mean(persist_l)),
            "confuser_offslice_persistence": float(np.mean(persist_c))}


def _neighbor_ratio(sv, center, cz):
    """Peak intensity one slice away relative to the center slice."""
    data = sv.volume.data
    cy, cx = int(round(center[1])), int(round(center[2]))
    patch = (slice(max(cy - 2, 0), cy + 3), slice(max(cx - 2, 0), cx + 3))
    c_val = float(data[cz][patch].max())
    n_vals = []
    for dz in (-1, 1):
        z = cz + dz
        if 0 <= z < data.shape[0]:
            n_vals.append(float(data[z][patch].max()))
    base = float(np.median(data))
    denom = c_val - base
    if denom <= 0:
        return 0.0
    return max(0.0, (max(n_vals) - base) / denom)


# -- on-disk formats -------------------------------------------------------

def save_dataset(dataset, directory):
    """One raw little-endian float32 file per volume plus a JSON sidecar."""
    os.makedirs(directory, exist_ok=True)
    for i, sv in enumerate(dataset):
        stem = f"volume_{i:04d}"
        raw = sv.volume.data.astype("<f4")
        raw.tofile(os.path.join(directory, stem + ".raw"))
        sidecar = {
            "shape": list(sv.volume.data.shape),
            "z_spacing_mm": sv.volume.z_spacing_mm,
            "boxes": {str(s): np.asarray(b).tolist() for s, b in sv.boxes_by_slice.items()},
        }
        with open(os.path.join(directory, stem + ".json"), "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)


def load_dataset(directory):
    out = []
    stems = sorted(f[:-5] for f in os.listdir(directory)
                   if f.endswith(".json") and f.startswith("volume_"))
    for stem in stems:
        with open(os.path.join(directory, stem + ".json")) as f:
            sidecar = json.load(f)
        shape = tuple(sidecar["shape"])
        raw = np.fromfile(os.path.join(directory, stem + ".raw"), dtype="<f4").reshape(shape)
        boxes = {int(s): np.asarray(b, dtype=np.float32)
                 for s, b in sidecar["boxes"].items()}
        out.append(SyntheticVolume(Volume(raw, sidecar["z_spacing_mm"]), boxes))
    return out


def export_gt_csv(dataset, path):
    """GT CSV: image_id,slice,x1,y1,x2,y2 (one row per box)."""
    with open(path, "w") as f:
        f.write("image_id,slice,x1,y1,x2,y2\n")
        for i, sv in enumerate(dataset):
            for s in sorted(sv.boxes_by_slice):
                for box in sv.boxes_by_slice[s]:
                    f.write(f"volume_{i:04d},{s},"
                            + ",".join(f"{v:.4f}" for v in box) + "\n")
