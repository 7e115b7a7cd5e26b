"""Knee X-ray preparation: one knee per patient, ROI crop, backbone tensors."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BoxOutOfBoundsError,
    ImageTooSmallError,
    MissingManifestEntryError,
)

MIN_SIDE = 64
# ITU-R BT.601 luminance weights for RGB -> grayscale.
_LUMA = np.array([0.299, 0.587, 0.114])

_DTYPE_MAX = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}


@dataclass
class XrayImage:
    patient_id: str
    pixels: np.ndarray  # 2-D uint8 or uint16 grayscale
    side: str | None = None
    source: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 3 and px.shape[2] == 3:
            px = np.rint(px.astype(np.float64) @ _LUMA).astype(px.dtype)
        if px.ndim != 2:
            raise ValueError(f"expected 2-D grayscale pixels, got shape {px.shape}")
        if px.dtype not in _DTYPE_MAX:
            raise ValueError(f"unsupported pixel dtype {px.dtype}; use uint8 or uint16")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ImageTooSmallError(
                f"image {self.patient_id!r} is {px.shape[1]}x{px.shape[0]}; "
                f"minimum is {MIN_SIDE}x{MIN_SIDE}"
            )
        if self.side is not None and self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(str(self.pixels.shape).encode())
        h.update(str(self.pixels.dtype).encode())
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        return h.hexdigest()


def load_xray(path: str | Path, patient_id: str, side: str | None = None) -> XrayImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            px = np.asarray(im, dtype=np.uint16)
        elif im.mode == "RGB":
            px = np.asarray(im, dtype=np.uint8)
        else:
            px = np.asarray(im.convert("L"), dtype=np.uint8)
    return XrayImage(patient_id=patient_id, pixels=px, side=side, source=str(path))


@dataclass
class RoiSpec:
    mode: str = "center_square"
    manifest_path: str | None = None
    boxes: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("center_square", "manifest_box"):
            raise ValueError(f"unknown ROI mode {self.mode!r}")
        if self.mode == "manifest_box" and self.manifest_path and not self.boxes:
            self.boxes = _read_roi_manifest(self.manifest_path)


def _read_roi_manifest(path: str | Path) -> dict[str, tuple[int, int, int, int]]:
    """CSV columns: image_id, x, y, w, h (x/y top-left, w/h extent)."""
    boxes = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            boxes[row["image_id"]] = (
                int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"])
            )
    return boxes


def select_knee(images_of_patient: list[XrayImage], rng_seed: int) -> XrayImage:
    """Pick one image for a patient, uniformly but reproducibly.

    The choice depends only on (patient_id, seed), never on list order.
    """
    if not images_of_patient:
        raise ValueError("no images for patient")
    if len(images_of_patient) == 1:
        return images_of_patient[0]
    patient_id = images_of_patient[0].patient_id
    ordered = sorted(
        images_of_patient, key=lambda im: (im.side or "", im.source or "")
    )
    digest = hashlib.blake2b(
        f"{patient_id}|{rng_seed}".encode(), digest_size=8
    ).digest()
    return ordered[int.from_bytes(digest, "big") % len(ordered)]


def crop_roi(img: XrayImage, spec: RoiSpec) -> XrayImage:
    if spec.mode == "center_square":
        side = min(img.width, img.height)
        x0 = (img.width - side) // 2
        y0 = (img.height - side) // 2
        px = img.pixels[y0:y0 + side, x0:x0 + side]
    else:
        key = img.patient_id if img.side is None else f"{img.patient_id}_{img.side}"
        box = spec.boxes.get(key, spec.boxes.get(img.patient_id))
        if box is None:
            raise MissingManifestEntryError(f"no ROI box for image {key!r}")
        x, y, w, h = box
        if x < 0 or y < 0 or w < 1 or h < 1 or x + w > img.width or y + h > img.height:
            raise BoxOutOfBoundsError(
                f"box {box} does not fit inside {img.width}x{img.height} "
                f"image {key!r}"
            )
        px = img.pixels[y:y + h, x:x + w]
    return XrayImage(patient_id=img.patient_id, pixels=px.copy(),
                     side=img.side, source=img.source)


@dataclass
class BackboneInputSpec:
    name: str
    input_side: int
    channel_means: tuple[float, float, float]
    channel_stds: tuple[float, float, float]
    layout: str = "NCHW"

    def __post_init__(self):
        if self.input_side <= 0:
            raise ValueError("input_side must be positive")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ValueError("three channel means and stds required")
        if any(s <= 0 for s in self.channel_stds):
            raise ValueError("channel stds must be positive")
        if self.layout != "NCHW":
            raise ValueError("layout is fixed to NCHW")


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resampling with half-pixel centers."""
    h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1.0 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1.0 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1.0 - wy) + bot * wy


def to_tensor(img: XrayImage, spec: BackboneInputSpec) -> np.ndarray:
    """Normalized [1, 3, S, S] float32 tensor for a backbone.

    Pixels scale to [0, 1] by their bit depth, resize bilinearly, replicate to
    three channels, then standardize with the backbone's channel statistics.
    """
    scale = _DTYPE_MAX[img.pixels.dtype]
    plane = img.pixels.astype(np.float64) / scale
    s = spec.input_side
    if plane.shape != (s, s):
        plane = _resize_bilinear(plane, s, s)
    means = np.asarray(spec.channel_means, dtype=np.float64)
    stds = np.asarray(spec.channel_stds, dtype=np.float64)
    chans = (plane[None, :, :] - means[:, None, None]) / stds[:, None, None]
    out = chans[None].astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"non-finite tensor for image {img.patient_id!r}")
    return out


_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def scan_image_root(root: str | Path) -> list[tuple[str, str, str | None, Path]]:
    """Enumerate ``<root>/<class-name>/<patient-id>[_<side>].{png,jpg}``.

    Returns (class_name, patient_id, side, path), sorted for determinism.
    """
    root = Path(root)
    entries = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in _IMAGE_SUFFIXES:
                continue
            stem = path.stem
            side = None
            for cand in ("left", "right"):
                if stem.endswith(f"_{cand}"):
                    stem, side = stem[: -len(cand) - 1], cand
                    break
            entries.append((class_dir.name, stem, side, path))
    return entries
