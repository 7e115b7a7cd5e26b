"""Backbone truncation and serialization.

Each supported backbone is cut at its global-average-pooled final
convolutional features, traced to TorchScript, and written together with a
JSON manifest declaring everything the runtime needs (input side, channel
statistics, feature dimension, checksums).  A parity check between the source
model and the reloaded serialized graph is part of every export, not optional:
five probe batches must agree with cosine similarity above 0.99.
"""

from __future__ import annotations

import hashlib
import json
import os
import urllib.error
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__

PARITY_PROBES = 5
PARITY_COSINE_MIN = 0.99

# torchvision's ImageNet preprocessing constants, shared by all three zoos'
# default weights; recorded in the manifest and applied by the consumer.
IMAGENET_MEANS = (0.485, 0.456, 0.406)
IMAGENET_STDS = (0.229, 0.224, 0.225)


class ExportError(Exception):
    pass


class DownloadFailure(ExportError):
    """Zoo weights could not be fetched or read."""


class ParityFailure(ExportError):
    """Serialized graph disagrees with the source model."""


@dataclass(frozen=True)
class ZooSpec:
    name: str
    input_side: int
    feature_dim: int


ZOO = {
    "vgg19": ZooSpec("vgg19", 224, 512),
    "inceptionv3": ZooSpec("inceptionv3", 299, 2048),
    "resnet50": ZooSpec("resnet50", 224, 2048),
}


class PooledFeatures(nn.Module):
    """Backbone trunk followed by global average pooling and flatten."""

    def __init__(self, trunk: nn.Module):
        super().__init__()
        self.trunk = trunk
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.trunk(x)), 1)


def _zoo_weights(name: str, pretrained: bool):
    from torchvision import models

    if not pretrained:
        return None
    enum = {
        "vgg19": models.VGG19_Weights.IMAGENET1K_V1,
        "inceptionv3": models.Inception_V3_Weights.IMAGENET1K_V1,
        "resnet50": models.ResNet50_Weights.IMAGENET1K_V2,
    }
    return enum[name]


def build_extractor(name: str, weights: str = "pretrained",
                    weights_path: str | None = None,
                    seed: int = 0) -> nn.Module:
    """Truncated backbone in eval mode, ready for tracing."""
    from torchvision import models
    from torchvision.models.feature_extraction import create_feature_extractor

    if name not in ZOO:
        raise ExportError(f"unknown backbone {name!r}; choose from "
                          f"{sorted(ZOO)}")
    pretrained = weights == "pretrained" and weights_path is None
    torch.manual_seed(seed)
    try:
        if name == "vgg19":
            base = models.vgg19(weights=_zoo_weights(name, pretrained))
            model = PooledFeatures(base.features)
        elif name == "resnet50":
            base = models.resnet50(weights=_zoo_weights(name, pretrained))
            trunk = create_feature_extractor(base, {"layer4": "feat"})
            model = PooledFeatures(_Keyed(trunk, "feat"))
        else:
            base = models.inception_v3(
                weights=_zoo_weights(name, pretrained),
                init_weights=not pretrained)
            trunk = create_feature_extractor(base, {"Mixed_7c": "feat"})
            model = PooledFeatures(_Keyed(trunk, "feat"))
    except (urllib.error.URLError, OSError, RuntimeError) as exc:
        raise DownloadFailure(
            f"could not obtain {name} zoo weights: {exc}") from exc

    if weights_path is not None:
        try:
            state = torch.load(weights_path, map_location="cpu",
                               weights_only=True)
        except (OSError, RuntimeError) as exc:
            raise DownloadFailure(
                f"could not read local weights {weights_path}: {exc}"
            ) from exc
        base.load_state_dict(state)
    return model.eval()


class _Keyed(nn.Module):
    """Unwrap a single tensor from a feature-extractor's output dict."""

    def __init__(self, inner: nn.Module, key: str):
        super().__init__()
        self.inner = inner
        self.key = key

    def forward(self, x):
        return self.inner(x)[self.key]


def weights_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for key, tensor in sorted(model.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _probe_batch(spec: ZooSpec, seed: int = 7) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    probes = rng.standard_normal(
        (PARITY_PROBES, 3, spec.input_side, spec.input_side))
    return torch.from_numpy(probes.astype(np.float32))


def _cosines(a: torch.Tensor, b: torch.Tensor) -> list[float]:
    out = []
    for x, y in zip(a, b):
        denom = float(x.norm()) * float(y.norm())
        out.append(float(x @ y) / denom if denom > 0 else 0.0)
    return out


@dataclass
class ExportResult:
    model_path: Path
    manifest_path: Path
    parity_cosines: list[float]
    feature_dim: int
    checksum: str


def export(name: str, out_dir: str | Path, weights: str = "pretrained",
           weights_path: str | None = None, seed: int = 0) -> ExportResult:
    """Serialize one truncated backbone plus its manifest.

    The feature dimension is verified by a live forward pass, parity between
    the source model and the reloaded graph is checked on probe images, and
    the graph/manifest pair is written atomically together.
    """
    spec = ZOO.get(name)
    if spec is None:
        raise ExportError(f"unknown backbone {name!r}; choose from "
                          f"{sorted(ZOO)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = build_extractor(name, weights=weights, weights_path=weights_path,
                            seed=seed)
    probe = torch.zeros(1, 3, spec.input_side, spec.input_side)
    with torch.no_grad():
        out = model(probe)
    if tuple(out.shape) != (1, spec.feature_dim):
        raise ExportError(
            f"{name}: expected feature_dim {spec.feature_dim}, forward pass "
            f"produced shape {tuple(out.shape)}"
        )

    with torch.no_grad():
        scripted = torch.jit.trace(model, probe)

    model_tmp = out_dir / f".{name}.pt.tmp"
    scripted.save(str(model_tmp))

    # Parity: the graph as it exists on disk against the source model.
    reloaded = torch.jit.load(str(model_tmp), map_location="cpu").eval()
    probes = _probe_batch(spec)
    with torch.no_grad():
        want = model(probes)
        got = reloaded(probes)
    cosines = _cosines(want, got)
    if min(cosines) <= PARITY_COSINE_MIN:
        model_tmp.unlink()
        raise ParityFailure(
            f"{name}: probe cosine similarity {min(cosines):.6f} "
            f"not above {PARITY_COSINE_MIN}"
        )

    checksum = weights_checksum(model)
    manifest = {
        "name": name,
        "input_side": spec.input_side,
        "channel_means": list(IMAGENET_MEANS),
        "channel_stds": list(IMAGENET_STDS),
        "feature_dim": spec.feature_dim,
        "format": "torchscript",
        "torch_version": torch.__version__,
        "exporter_version": __version__,
        "weights_checksum": checksum,
        "weights_source": weights if weights_path is None else "local-file",
    }
    manifest_tmp = out_dir / f".{name}.manifest.json.tmp"
    manifest_tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True)
                            + "\n")

    model_path = out_dir / f"{name}.pt"
    manifest_path = out_dir / f"{name}.manifest.json"
    os.replace(model_tmp, model_path)
    os.replace(manifest_tmp, manifest_path)
    return ExportResult(
        model_path=model_path,
        manifest_path=manifest_path,
        parity_cosines=cosines,
        feature_dim=spec.feature_dim,
        checksum=checksum,
    )
