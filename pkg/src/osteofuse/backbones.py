"""Serialized-backbone runtime: load exported feature extractors, run batches,
and cache the resulting feature blocks on disk.

Models arrive as a TorchScript graph plus a JSON manifest sidecar declaring
name, input side, channel statistics, and feature dimension.  The runtime
validates the graph against the manifest with a zero-tensor shape probe before
accepting it.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ManifestMismatchError,
    NonFiniteOutputError,
    ShapeMismatchError,
    UnsupportedOperatorError,
)
from .features import PROVENANCE_DEEP, FeatureMatrix
from .imaging import BackboneInputSpec

CACHE_FORMAT_VERSION = 1

_MANIFEST_KEYS = ("name", "input_side", "channel_means", "channel_stds",
                  "feature_dim", "format", "exporter_version")


def _require_torch():
    try:
        import torch
    except ImportError as exc:  # pragma: no cover - torch is an install extra
        raise UnsupportedOperatorError(
            "backbone execution requires the 'torch' extra "
            "(pip install osteofuse[backbones])"
        ) from exc
    return torch


@dataclass
class BackboneModel:
    name: str
    module: object  # torch.jit.ScriptModule
    input_spec: BackboneInputSpec
    feature_dim: int
    exporter_version: str


def read_manifest(manifest_path: str | Path) -> dict:
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ManifestMismatchError(
            f"manifest {manifest_path} is missing keys: {missing}"
        )
    if manifest["format"] != "torchscript":
        raise ManifestMismatchError(
            f"unsupported interchange format {manifest['format']!r}"
        )
    return manifest


def load_backbone(path: str | Path, manifest: str | Path) -> BackboneModel:
    """Load a serialized feature extractor and validate it against its manifest."""
    torch = _require_torch()
    meta = read_manifest(manifest)
    spec = BackboneInputSpec(
        name=meta["name"],
        input_side=int(meta["input_side"]),
        channel_means=tuple(meta["channel_means"]),
        channel_stds=tuple(meta["channel_stds"]),
    )
    try:
        module = torch.jit.load(str(path), map_location="cpu")
    except (RuntimeError, ValueError) as exc:
        raise UnsupportedOperatorError(
            f"cannot execute serialized graph {path}: {exc}"
        ) from exc
    module.eval()

    probe = torch.zeros(1, 3, spec.input_side, spec.input_side)
    with torch.no_grad():
        out = module(probe)
    declared = int(meta["feature_dim"])
    if out.ndim != 2 or out.shape[0] != 1 or out.shape[1] != declared:
        raise ShapeMismatchError(
            f"manifest declares feature_dim {declared} but graph outputs "
            f"shape {tuple(out.shape)}"
        )
    if not bool(torch.isfinite(out).all()):
        raise NonFiniteOutputError("zero-tensor probe produced non-finite output")
    return BackboneModel(
        name=meta["name"],
        module=module,
        input_spec=spec,
        feature_dim=declared,
        exporter_version=str(meta["exporter_version"]),
    )


def _run_batch(model: BackboneModel, batch: np.ndarray) -> np.ndarray:
    torch = _require_torch()
    with torch.no_grad():
        out = model.module(torch.from_numpy(batch))
    return out.numpy()


@dataclass
class DeepFeatureBlock:
    backbone_name: str
    matrix: FeatureMatrix


def block_from_array(backbone_name: str, values: np.ndarray,
                     row_ids: list[str]) -> DeepFeatureBlock:
    columns = [f"{backbone_name}_f{k}" for k in range(values.shape[1])]
    return DeepFeatureBlock(
        backbone_name=backbone_name,
        matrix=FeatureMatrix(
            values=values,
            columns=columns,
            provenance=[PROVENANCE_DEEP] * len(columns),
            row_ids=list(row_ids),
        ),
    )


def extract_features(model: BackboneModel, tensors, ids: list[str],
                     batch_size: int = 16, threads: int = 1) -> DeepFeatureBlock:
    """One feature row per input tensor, in manifest order.

    ``tensors`` yields [1, 3, S, S] float32 arrays aligned with ``ids``.
    Batches may run on a worker pool; the assembler restores input order.
    """
    side = model.input_spec.input_side
    batches: list[np.ndarray] = []
    current: list[np.ndarray] = []
    count = 0
    for t in tensors:
        t = np.asarray(t, dtype=np.float32)
        if t.shape != (1, 3, side, side):
            raise ShapeMismatchError(
                f"tensor for image {ids[count]!r} has shape {t.shape}, "
                f"expected (1, 3, {side}, {side})"
            )
        current.append(t[0])
        count += 1
        if len(current) == batch_size:
            batches.append(np.stack(current))
            current = []
    if current:
        batches.append(np.stack(current))
    if count != len(ids):
        raise ValueError(f"{count} tensors for {len(ids)} ids")

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(lambda b: _run_batch(model, b), batches))
    else:
        outputs = [_run_batch(model, b) for b in batches]

    features = (np.vstack(outputs) if outputs
                else np.zeros((0, model.feature_dim), dtype=np.float32))
    bad = np.nonzero(~np.isfinite(features).all(axis=1))[0]
    if bad.size:
        raise NonFiniteOutputError(
            f"non-finite features for image {ids[int(bad[0])]!r}"
        )
    return block_from_array(model.name, features.astype(np.float64), ids)


# --- feature cache -----------------------------------------------------------


def dataset_fingerprint(items: list[tuple[str, str]], prep_context: str) -> str:
    """Hash of ordered (image id, content hash) pairs plus the prep settings."""
    h = hashlib.blake2b(digest_size=16)
    h.update(f"{prep_context};".encode())
    for image_id, content in items:
        h.update(f"{image_id}={content};".encode())
    return h.hexdigest()


def cache_path(cache_dir: str | Path, backbone_name: str, dataset_hash: str) -> Path:
    return Path(cache_dir) / f"features_{backbone_name}_{dataset_hash}.npz"


def save_feature_cache(cache_dir: str | Path, dataset_hash: str,
                       block: DeepFeatureBlock, exporter_version: str) -> Path:
    path = cache_path(cache_dir, block.backbone_name, dataset_hash)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez_compressed(
        tmp,
        features=block.matrix.values.astype(np.float32),
        ids=np.array(block.matrix.row_ids, dtype=object),
        backbone=np.array(block.backbone_name),
        exporter_version=np.array(exporter_version),
        cache_format=np.array(CACHE_FORMAT_VERSION),
    )
    tmp.replace(path)
    return path


def load_feature_cache(cache_dir: str | Path, backbone_name: str,
                       dataset_hash: str,
                       exporter_version: str | None = None
                       ) -> DeepFeatureBlock | None:
    """None on a miss, a format-version mismatch, or (when requested) an
    exporter-version mismatch, so stale features get recomputed."""
    path = cache_path(cache_dir, backbone_name, dataset_hash)
    if not path.exists():
        return None
    with np.load(path, allow_pickle=True) as data:
        if int(data["cache_format"]) != CACHE_FORMAT_VERSION:
            return None
        if (exporter_version is not None
                and str(data["exporter_version"]) != exporter_version):
            return None
        features = data["features"].astype(np.float64)
        ids = [str(i) for i in data["ids"]]
        name = str(data["backbone"])
    return block_from_array(name, features, ids)
