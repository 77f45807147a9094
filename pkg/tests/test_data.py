"""Preprocessing, augmentation, synthetic generator, and disk formats."""
import os

import numpy as np
import pytest

from mp3d.data import (AUGMENT_SCALES, SliceSample, SyntheticConfig, Volume,
                       augment, clip_hu, export_gt_csv, extract_window,
                       generate_synthetic, load_dataset, resample_z,
                       save_dataset, separability_stats)


def _vol(data, spacing=2.5):
    return Volume(np.asarray(data, dtype=np.float32), spacing)


class TestClip:
    def test_boundaries(self):
        v = clip_hu(_vol(np.full((1, 2, 2), -2000.0)))
        assert np.all(v.data == 0.0)
        v = clip_hu(_vol(np.full((1, 2, 2), 1050.0)))
        assert np.all(v.data == 1.0)

    def test_midpoint(self):
        v = clip_hu(_vol(np.full((1, 1, 1), 13.0)))
        assert v.data[0, 0, 0] == pytest.approx((13 + 1024) / 2074, abs=1e-6)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        v = clip_hu(_vol(rng.uniform(-3000, 3000, size=(3, 4, 4))))
        twice = clip_hu(Volume(v.data * 2074 - 1024, v.z_spacing_mm))
        np.testing.assert_allclose(twice.data, v.data, atol=1e-3)


class TestResample:
    def test_identity_spacing(self):
        v = _vol(np.random.default_rng(0).standard_normal((4, 3, 3)), spacing=2.5)
        out = resample_z(v)
        np.testing.assert_array_equal(out.data, v.data)

    def test_spacing_5_interpolates_midpoints(self):
        a, b, c = [np.full((2, 2), v, dtype=np.float32) for v in (0.0, 2.0, 6.0)]
        out = resample_z(_vol(np.stack([a, b, c]), spacing=5.0))
        assert out.num_slices == 5
        expect = [0.0, 1.0, 2.0, 4.0, 6.0]
        np.testing.assert_allclose(out.data[:, 0, 0], expect)

    def test_spacing_125_takes_every_other(self):
        data = np.arange(9, dtype=np.float32).reshape(9, 1, 1)
        out = resample_z(_vol(data, spacing=1.25))
        assert out.num_slices == 5
        np.testing.assert_allclose(out.data[:, 0, 0], [0, 2, 4, 6, 8])

    def test_linear_ramp_exact(self):
        data = np.linspace(0, 1, 7, dtype=np.float32).reshape(7, 1, 1) \
            * np.ones((7, 3, 3), dtype=np.float32)
        out = resample_z(_vol(data, spacing=1.7))
        positions = np.arange(out.num_slices) * 2.5 / 1.7
        np.testing.assert_allclose(out.data[:, 0, 0], positions / 6, atol=1e-6)

    def test_single_slice_warns(self):
        with pytest.warns(UserWarning, match="single-slice"):
            out = resample_z(_vol(np.ones((1, 2, 2)), spacing=5.0))
        assert out.num_slices == 1


class TestWindow:
    def test_edge_replication(self):
        v = _vol(np.arange(3, dtype=np.float32).reshape(3, 1, 1))
        s = extract_window(v, 0, 3)
        np.testing.assert_array_equal(s.window[:, 0, 0], [0, 0, 1])

    def test_interior(self):
        v = _vol(np.arange(5, dtype=np.float32).reshape(5, 1, 1))
        s = extract_window(v, 2, 3)
        np.testing.assert_array_equal(s.window[:, 0, 0], [1, 2, 3])

    def test_depth_1(self):
        v = _vol(np.arange(5, dtype=np.float32).reshape(5, 1, 1))
        assert extract_window(v, 4, 1).window[0, 0, 0] == 4

    def test_errors(self):
        v = _vol(np.ones((3, 2, 2)))
        with pytest.raises(ValueError, match="odd"):
            extract_window(v, 1, 2)
        with pytest.raises(ValueError, match="out of range"):
            extract_window(v, 3, 1)


class TestAugment:
    def _sample(self, h=512):
        rng = np.random.default_rng(0)
        return SliceSample(rng.uniform(size=(3, h, h)).astype(np.float32), 0,
                           np.array([[10.0, 20.0, 30.0, 40.0]]))

    def test_resize_box_arithmetic(self):
        out = augment(self._sample(), seed=1, scales=(448,), flip_prob=0.0)
        np.testing.assert_allclose(out.gt_boxes[0], [8.75, 17.5, 26.25, 35.0])
        assert out.window.shape == (3, 448, 448)

    def test_identity_scale(self):
        s = self._sample()
        out = augment(s, seed=1, scales=(512,), flip_prob=0.0)
        np.testing.assert_array_equal(out.window, s.window)
        np.testing.assert_array_equal(out.gt_boxes, s.gt_boxes)

    def test_double_flip_identity(self):
        s = self._sample(h=64)
        s.gt_boxes = np.array([[10.0, 20.0, 30.0, 40.0]])
        once = augment(s, seed=3, scales=(64,), flip_prob=1.0)
        twice = augment(once, seed=4, scales=(64,), flip_prob=1.0)
        np.testing.assert_array_equal(twice.window, s.window)
        np.testing.assert_allclose(np.sort(twice.gt_boxes, axis=0),
                                   np.sort(s.gt_boxes, axis=0), atol=1e-5)

    def test_flip_applied_to_all_slices_identically(self):
        s = self._sample(h=64)
        out = augment(s, seed=5, scales=(64,), flip_prob=1.0)
        np.testing.assert_array_equal(out.window, s.window[:, ::-1, ::-1])

    def test_box_tracks_content(self):
        # rasterize the box, transform, and compare with the transformed box
        win = np.zeros((1, 64, 64), dtype=np.float32)
        win[:, 20:40, 10:30] = 1.0
        s = SliceSample(win, 0, np.array([[10.0, 20.0, 30.0, 40.0]]))
        for seed in range(5):
            out = augment(s, seed=seed, scales=(48, 64, 96), flip_prob=0.5)
            ys, xs = np.nonzero(out.window[0] > 0.5)
            content = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
            x1, y1, x2, y2 = out.gt_boxes[0]
            box = (min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))
            from mp3d.evalkit import iou
            assert iou(content, box) > 0.9, (seed, content, box)

    def test_deterministic(self):
        s = self._sample(h=64)
        a = augment(s, seed=7, scales=(48, 64), flip_prob=0.5)
        b = augment(s, seed=7, scales=(48, 64), flip_prob=0.5)
        np.testing.assert_array_equal(a.window, b.window)

    def test_default_scales(self):
        assert AUGMENT_SCALES == (448, 512, 576)


class TestGenerator:
    CFG = dict(num_volumes=3, height=64, width=64, slices=12)

    def test_deterministic(self):
        a = generate_synthetic(SyntheticConfig(seed=9, **self.CFG))
        b = generate_synthetic(SyntheticConfig(seed=9, **self.CFG))
        for va, vb in zip(a, b):
            np.testing.assert_array_equal(va.volume.data, vb.volume.data)
            assert set(va.boxes_by_slice) == set(vb.boxes_by_slice)

    def test_seed_changes_data(self):
        a = generate_synthetic(SyntheticConfig(seed=1, **self.CFG))
        b = generate_synthetic(SyntheticConfig(seed=2, **self.CFG))
        assert not np.array_equal(a[0].volume.data, b[0].volume.data)

    def test_empty_config(self):
        cfg = SyntheticConfig(lesions_per_volume=(0, 0), confusers_per_volume=(0, 0),
                              **self.CFG)
        ds = generate_synthetic(cfg)
        assert all(not sv.boxes_by_slice for sv in ds)

    def test_lesions_span_at_least_3_slices(self):
        ds = generate_synthetic(SyntheticConfig(seed=3, **self.CFG))
        for sv in ds:
            for m in sv.lesion_meta:
                cz = m["center"][0]
                covered = [s for s in sv.boxes_by_slice
                           if abs(s - cz) < m["semi_axes"][2]]
                assert len(covered) >= 3

    def test_center_slice_box_geometry(self):
        # a semi-axis-8 lesion has a ~16x16 box on its center slice
        cfg = SyntheticConfig(lesions_per_volume=(1, 1), confusers_per_volume=(0, 0),
                              lesion_radius_xy=(8.0, 8.0), lesion_radius_z=(2.0, 2.0),
                              noise_sigma=0.0, **self.CFG)
        ds = generate_synthetic(cfg)
        m = ds[0].lesion_meta[0]
        boxes = ds[0].boxes_by_slice
        center_slice = min(boxes, key=lambda s: abs(s - m["center"][0]))
        b = boxes[center_slice][0]
        w, h = b[2] - b[0], b[3] - b[1]
        assert 14.0 <= w <= 16.5 and 14.0 <= h <= 16.5

    def test_confusers_vanish_off_slice(self):
        ds = generate_synthetic(SyntheticConfig(seed=4, noise_sigma=0.0, **self.CFG))
        stats = separability_stats(ds)
        assert stats["lesion_offslice_persistence"] > 0.4
        assert stats["confuser_offslice_persistence"] < 0.2
        assert stats["overlap_coefficient"] > 0.5

    def test_unfittable_config_rejected(self):
        with pytest.raises(ValueError, match="fit"):
            SyntheticConfig(height=16, width=16, lesion_radius_xy=(8.0, 9.0))


class TestDiskFormat:
    def test_roundtrip(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(num_volumes=2, height=48, width=48,
                                                slices=10, seed=6))
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert len(back) == 2
        for a, b in zip(ds, back):
            np.testing.assert_array_equal(a.volume.data, b.volume.data)
            assert a.volume.z_spacing_mm == b.volume.z_spacing_mm
            assert set(a.boxes_by_slice) == set(b.boxes_by_slice)
            for s in a.boxes_by_slice:
                np.testing.assert_allclose(a.boxes_by_slice[s], b.boxes_by_slice[s])

    def test_gt_csv(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(num_volumes=1, height=48, width=48,
                                                slices=10, seed=6))
        path = os.path.join(tmp_path, "gt.csv")
        export_gt_csv(ds, path)
        lines = open(path).read().strip().split("\n")
        assert lines[0] == "image_id,slice,x1,y1,x2,y2"
        n_boxes = sum(len(b) for b in ds[0].boxes_by_slice.values())
        assert len(lines) == 1 + n_boxes

    def test_gt_csv_empty(self, tmp_path):
        cfg = SyntheticConfig(num_volumes=1, height=48, width=48, slices=10,
                              lesions_per_volume=(0, 0), confusers_per_volume=(0, 0))
        path = os.path.join(tmp_path, "gt.csv")
        export_gt_csv(generate_synthetic(cfg), path)
        assert open(path).read().strip() == "image_id,slice,x1,y1,x2,y2"
