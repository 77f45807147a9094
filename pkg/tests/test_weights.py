"""Weight store format, strict/non-strict loading, and depth transfer."""
import numpy as np
import pytest

from mp3d.backbone import BackboneConfig, build_backbone
from mp3d.tensor import Tensor
from mp3d.train import ModelSettings, build_detector
from mp3d.weights import (DepthTransferError, WeightFormatError, WeightStore,
                          load_weights, save_weights, transfer_depth)

TINY = dict(stem_channels=4, stage_blocks=(1, 1, 1, 1),
            stage_channels=(8, 16, 32, 64), gn_groups=2,
            fpn_channels=8, head_channels=8)


def tiny_model(slices=3, seed=0, **over):
    return build_detector(ModelSettings(input_slices=slices, **dict(TINY, **over)),
                          seed=seed)


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        model = tiny_model(seed=1)
        p1, p2 = tmp_path / "a.w", tmp_path / "b.w"
        save_weights(model, p1, metadata={"pooling_policy": "anisotropic"})
        WeightStore.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_identical_after_reload(self, tmp_path):
        a = tiny_model(seed=2)
        b = tiny_model(seed=3)
        path = tmp_path / "w"
        save_weights(a, path)
        report = load_weights(b, WeightStore.load(path), strict=True)
        assert not report["missing"] and not report["unexpected"]
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 64, 64))
                   .astype(np.float32))
        la, _ = a(x)
        lb, _ = b(x)
        np.testing.assert_array_equal(la.data, lb.data)

    def test_metadata_roundtrip(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "w"
        save_weights(model, path, metadata={"pooling_policy": "anisotropic",
                                            "training_slices": 3})
        store = WeightStore.load(path)
        assert store.metadata == {"pooling_policy": "anisotropic", "training_slices": 3}


class TestErrors:
    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "w"
        save_weights(tiny_model(), path)
        blob = bytearray(path.read_bytes())
        blob[:5] = b"WRONG"
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError, match="magic"):
            WeightStore.load(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "w"
        save_weights(tiny_model(), path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(WeightFormatError):
            WeightStore.load(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "w"
        save_weights(tiny_model(), path)
        path.write_bytes(path.read_bytes() + b"xx\x00\x00")
        with pytest.raises(WeightFormatError, match="trailing"):
            WeightStore.load(path)

    def test_shape_mismatch_names_parameter(self):
        model = tiny_model()
        store = WeightStore.from_model(model)
        name = next(iter(store.entries))
        store.entries[name] = np.zeros((2, 2), dtype="<f4")
        with pytest.raises(ValueError, match=name.split(".")[0]):
            load_weights(model, store, strict=False)


class TestPartialLoad:
    def test_backbone_only_store(self):
        model = tiny_model()
        full = WeightStore.from_model(model)
        backbone_only = WeightStore(
            {n: a for n, a in full.entries.items() if n.startswith("backbone.")})
        with pytest.raises(ValueError, match="strict load failed"):
            load_weights(model, backbone_only, strict=True)
        report = load_weights(model, backbone_only, strict=False)
        assert all(n.startswith("backbone.") for n in report["matched"])
        assert all(not n.startswith("backbone.") for n in report["missing"])
        assert not report["unexpected"]


class TestDepthTransfer:
    def _store(self, slices=3, seed=4, policy="anisotropic"):
        model = tiny_model(slices=slices, seed=seed, pooling_policy=policy)
        return WeightStore.from_model(model, metadata={"pooling_policy": policy,
                                                       "training_slices": slices})

    def test_same_depth_equals_plain_load(self):
        store = self._store()
        a, b = tiny_model(slices=3, seed=9), tiny_model(slices=3, seed=9)
        transfer_depth(store, a, strict=True)
        load_weights(b, store, strict=True)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    @pytest.mark.parametrize("target", [5, 7, 9, 11])
    def test_widening_strict_load(self, target):
        store = self._store()
        model = tiny_model(slices=target, seed=8)
        report = transfer_depth(store, model, strict=True)
        assert not report["missing"] and not report["unexpected"]
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, target, 64, 64))
                   .astype(np.float32))
        logits, deltas = model(x)
        assert np.isfinite(logits.data).all() and np.isfinite(deltas.data).all()

    def test_narrowing(self):
        store = self._store(slices=9)
        model = tiny_model(slices=3, seed=8)
        report = transfer_depth(store, model, strict=True)
        assert not report["missing"]

    def test_missing_metadata_rejected(self):
        store = self._store()
        store.metadata = {}
        with pytest.raises(DepthTransferError, match="metadata"):
            transfer_depth(store, tiny_model(slices=9))

    def test_isotropic_store_rejected(self):
        store = self._store(policy="isotropic")
        with pytest.raises(DepthTransferError, match="isotropic"):
            transfer_depth(store, tiny_model(slices=9))

    def test_feature_equality_on_replicated_input(self):
        # feed the widened model the 3 training slices edge-replicated to 9;
        # at the probe point (first residual block output) the depth
        # receptive field is 1, so center features must agree
        src = tiny_model(slices=3, seed=4)
        store = WeightStore.from_model(src, metadata={"pooling_policy": "anisotropic",
                                                      "training_slices": 3})
        dst = tiny_model(slices=9, seed=8)
        transfer_depth(store, dst, strict=True)
        rng = np.random.default_rng(2)
        x3 = rng.standard_normal((1, 1, 3, 64, 64)).astype(np.float32)
        idx = np.clip(np.arange(9) - 3, 0, 2)
        x9 = x3[:, :, idx]
        _, _, probe3 = src.backbone(Tensor(x3), with_3d=True)
        _, _, probe9 = dst.backbone(Tensor(x9), with_3d=True)
        np.testing.assert_allclose(probe9.data[:, :, 4], probe3.data[:, :, 1],
                                   atol=1e-4)


class TestDepthInvariance:
    def test_param_shapes_outside_conversions(self):
        sets = []
        for d in (3, 5, 7, 9, 11):
            bb = build_backbone(BackboneConfig(
                input_slices=d, stem_channels=4, stage_blocks=(1, 1, 1, 1),
                stage_channels=(8, 16, 32, 64), gn_groups=2))
            sets.append({(n, tuple(p.shape)) for n, p in bb.named_parameters()
                         if not n.startswith("conversions.")})
        assert all(s == sets[0] for s in sets[1:])
