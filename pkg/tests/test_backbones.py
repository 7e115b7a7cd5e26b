import json

import numpy as np
import pytest

torch = pytest.importorskip("torch")

from osteofuse import backbones
from osteofuse.errors import (
    ManifestMismatchError,
    NonFiniteOutputError,
    ShapeMismatchError,
    UnsupportedOperatorError,
)

SIDE = 32
FEATURE_DIM = 6


class TinyExtractor(torch.nn.Module):
    def __init__(self, out_channels=FEATURE_DIM):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, out_channels, kernel_size=3, padding=1)
        self.pool = torch.nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.conv(x)), 1)


def export_tiny(tmp_path, feature_dim=FEATURE_DIM, declared_dim=None,
                manifest_overrides=None, seed=0):
    torch.manual_seed(seed)
    model = TinyExtractor(feature_dim).eval()
    scripted = torch.jit.trace(model, torch.zeros(1, 3, SIDE, SIDE))
    model_path = tmp_path / "tiny.pt"
    scripted.save(str(model_path))
    manifest = {
        "name": "tiny",
        "input_side": SIDE,
        "channel_means": [0.5, 0.5, 0.5],
        "channel_stds": [0.25, 0.25, 0.25],
        "feature_dim": declared_dim or feature_dim,
        "format": "torchscript",
        "exporter_version": "test-1",
    }
    if manifest_overrides:
        manifest.update(manifest_overrides)
        manifest = {k: v for k, v in manifest.items() if v is not None}
    manifest_path = tmp_path / "tiny.manifest.json"
    manifest_path.write_text(json.dumps(manifest))
    return model_path, manifest_path


def tensors_for(values):
    return [v.reshape(1, 3, SIDE, SIDE).astype(np.float32) for v in values]


class TestLoadBackbone:
    def test_load_and_probe(self, tmp_path):
        model_path, manifest_path = export_tiny(tmp_path)
        model = backbones.load_backbone(model_path, manifest_path)
        assert model.feature_dim == FEATURE_DIM
        assert model.input_spec.input_side == SIDE
        assert model.name == "tiny"

    def test_shape_mismatch_names_both_dims(self, tmp_path):
        model_path, manifest_path = export_tiny(tmp_path, declared_dim=99)
        with pytest.raises(ShapeMismatchError, match="99"):
            backbones.load_backbone(model_path, manifest_path)

    def test_manifest_missing_key(self, tmp_path):
        model_path, manifest_path = export_tiny(
            tmp_path, manifest_overrides={"feature_dim": None})
        with pytest.raises(ManifestMismatchError, match="feature_dim"):
            backbones.load_backbone(model_path, manifest_path)

    def test_unreadable_graph(self, tmp_path):
        _, manifest_path = export_tiny(tmp_path)
        bad = tmp_path / "corrupt.pt"
        bad.write_bytes(b"not a torchscript archive")
        with pytest.raises(UnsupportedOperatorError):
            backbones.load_backbone(bad, manifest_path)

    def test_unknown_format_rejected(self, tmp_path):
        model_path, manifest_path = export_tiny(
            tmp_path, manifest_overrides={"format": "onnx"})
        with pytest.raises(ManifestMismatchError, match="format"):
            backbones.load_backbone(model_path, manifest_path)


class TestExtractFeatures:
    @pytest.fixture
    def model(self, tmp_path):
        model_path, manifest_path = export_tiny(tmp_path)
        return backbones.load_backbone(model_path, manifest_path)

    def test_row_order_matches_input_order(self, model):
        rng = np.random.default_rng(0)
        values = [rng.normal(size=3 * SIDE * SIDE) for _ in range(7)]
        ids = [f"img{i}" for i in range(7)]
        block = backbones.extract_features(model, tensors_for(values), ids,
                                           batch_size=3)
        assert block.matrix.row_ids == ids
        assert block.matrix.values.shape == (7, FEATURE_DIM)
        # Permuting inputs permutes rows identically.
        perm = [3, 1, 4, 0, 6, 2, 5]
        block2 = backbones.extract_features(
            model, tensors_for([values[i] for i in perm]),
            [ids[i] for i in perm], batch_size=3)
        assert np.allclose(block2.matrix.values, block.matrix.values[perm])

    def test_duplicate_images_give_identical_rows(self, model):
        rng = np.random.default_rng(1)
        v = rng.normal(size=3 * SIDE * SIDE)
        block = backbones.extract_features(
            model, tensors_for([v, v]), ["a", "b"], batch_size=2)
        assert np.array_equal(block.matrix.values[0], block.matrix.values[1])

    def test_batch_size_invariance(self, model):
        rng = np.random.default_rng(2)
        values = [rng.normal(size=3 * SIDE * SIDE) for _ in range(10)]
        ids = [f"img{i}" for i in range(10)]
        a = backbones.extract_features(model, tensors_for(values), ids,
                                       batch_size=1)
        b = backbones.extract_features(model, tensors_for(values), ids,
                                       batch_size=32)
        denom = np.maximum(np.abs(a.matrix.values), 1e-12)
        assert np.max(np.abs(a.matrix.values - b.matrix.values) / denom) < 1e-4

    def test_threaded_extraction_preserves_order(self, model):
        rng = np.random.default_rng(3)
        values = [rng.normal(size=3 * SIDE * SIDE) for _ in range(12)]
        ids = [f"img{i}" for i in range(12)]
        serial = backbones.extract_features(model, tensors_for(values), ids,
                                            batch_size=2, threads=1)
        threaded = backbones.extract_features(model, tensors_for(values), ids,
                                              batch_size=2, threads=4)
        assert np.array_equal(serial.matrix.values, threaded.matrix.values)

    def test_zero_tensor_features_stable(self, model):
        zeros = [np.zeros((1, 3, SIDE, SIDE), dtype=np.float32)
                 for _ in range(3)]
        block = backbones.extract_features(model, zeros, ["a", "b", "c"])
        assert np.all(np.isfinite(block.matrix.values))
        assert np.array_equal(block.matrix.values[0], block.matrix.values[2])

    def test_non_finite_output_names_image(self, tmp_path):
        model_path, manifest_path = export_tiny(tmp_path)
        model = backbones.load_backbone(model_path, manifest_path)
        bad = np.full((1, 3, SIDE, SIDE), np.nan, dtype=np.float32)
        good = np.zeros((1, 3, SIDE, SIDE), dtype=np.float32)
        with pytest.raises(NonFiniteOutputError, match="bad-image"):
            backbones.extract_features(model, [good, bad],
                                       ["good", "bad-image"])

    def test_wrong_tensor_side_rejected(self, model):
        with pytest.raises(ShapeMismatchError):
            backbones.extract_features(
                model, [np.zeros((1, 3, 16, 16), dtype=np.float32)], ["a"])

    def test_column_naming_and_provenance(self, model):
        block = backbones.extract_features(
            model, [np.zeros((1, 3, SIDE, SIDE), dtype=np.float32)], ["a"])
        assert block.matrix.columns[0] == "tiny_f0"
        assert block.matrix.columns[-1] == f"tiny_f{FEATURE_DIM - 1}"
        assert all(p == "deep" for p in block.matrix.provenance)


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        block = backbones.block_from_array(
            "vgg19", rng.normal(size=(4, 8)), [f"P{i}" for i in range(4)])
        backbones.save_feature_cache(tmp_path, "hash123", block, "v1")
        loaded = backbones.load_feature_cache(tmp_path, "vgg19", "hash123")
        assert loaded is not None
        assert loaded.matrix.row_ids == block.matrix.row_ids
        assert np.allclose(loaded.matrix.values, block.matrix.values,
                           atol=1e-6)

    def test_miss_returns_none(self, tmp_path):
        assert backbones.load_feature_cache(tmp_path, "vgg19", "nope") is None

    def test_fingerprint_sensitivity(self):
        a = backbones.dataset_fingerprint([("P1", "aa"), ("P2", "bb")], "roi=c")
        b = backbones.dataset_fingerprint([("P1", "aa"), ("P2", "cc")], "roi=c")
        c = backbones.dataset_fingerprint([("P1", "aa"), ("P2", "bb")], "roi=m")
        assert a != b and a != c
