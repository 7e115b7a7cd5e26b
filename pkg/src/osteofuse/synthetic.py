"""Deterministic synthetic stand-in corpus shaped like the screening dataset.

Produces a clinical CSV plus precomputed per-backbone feature caches so the
full pipeline can run without images or serialized backbones.  Deep blocks
carry planted covariance spectra (a handful of strong factors over an
isotropic bulk), shared latent concepts that correlate components across
backbones, and class-dependent factor means so the corpus is separable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backbones
from .clinical import CLASS_NAMES
from .pipeline import BackboneRef, DatasetConfig, PipelineConfig

DEFAULT_CLASS_COUNTS = (86, 76, 78)

# Relative variance targets for the planted factors, per backbone.  At the 2%
# retention threshold these yield 7 / 7 / 10 kept components.
SPECTRA = {
    "vgg19": [0.26, 0.17, 0.11, 0.08, 0.06, 0.045, 0.034],
    "inceptionv3": [0.27, 0.16, 0.105, 0.075, 0.058, 0.042, 0.033],
    "resnet50": [0.17, 0.13, 0.10, 0.08, 0.065, 0.055, 0.045, 0.038,
                 0.032, 0.027],
}

DEFAULT_DIMS = {"vgg19": 512, "inceptionv3": 2048, "resnet50": 2048}

# (backbone, factor index) -> (shared concept id, loading).  Factors without
# an entry are backbone-unique.  Concepts shared across backbones make the
# fused components cluster together.
CONCEPT_MAP = {
    ("vgg19", 0): (0, 0.85), ("inceptionv3", 0): (0, 0.85),
    ("resnet50", 1): (0, 0.80),
    ("resnet50", 0): (1, 0.85), ("inceptionv3", 4): (1, 0.80),
    ("vgg19", 4): (1, 0.75),
    ("resnet50", 2): (2, 0.85), ("vgg19", 1): (2, 0.80),
    ("inceptionv3", 2): (2, 0.75),
    ("vgg19", 2): (3, 0.85), ("resnet50", 4): (3, 0.80),
    ("inceptionv3", 5): (3, 0.75),
    ("resnet50", 5): (4, 0.85), ("vgg19", 3): (4, 0.80),
    ("resnet50", 8): (5, 0.85), ("vgg19", 5): (5, 0.80),
    ("inceptionv3", 1): (6, 0.85), ("resnet50", 3): (6, 0.80),
    ("inceptionv3", 6): (7, 0.80), ("resnet50", 6): (7, 0.75),
    ("vgg19", 6): (7, 0.70),
    ("resnet50", 9): (8, 0.85), ("inceptionv3", 3): (8, 0.80),
}
N_CONCEPTS = 9

# Class means (normal, osteopenia, osteoporosis) planted on the first concepts.
CONCEPT_CLASS_MEANS = {
    0: (-1.3, 0.0, 1.3),
    1: (1.1, 0.0, -1.1),
    2: (-0.9, 0.15, 0.9),
}

_MEDICAL_HISTORY = ("none", "arthritis", "thyroid", "renal")
_MEDICAL_HISTORY_PROBS = {
    0: (0.88, 0.07, 0.03, 0.02),
    1: (0.38, 0.34, 0.18, 0.10),
    2: (0.05, 0.30, 0.32, 0.33),
}
_ALCOHOL = ("no", "occasional", "regular")
_ALCOHOL_PROBS = {
    0: (0.60, 0.30, 0.10),
    1: (0.50, 0.35, 0.15),
    2: (0.45, 0.35, 0.20),
}
_FRACTURE_YES = {0: 0.04, 1: 0.40, 2: 0.78}
_JOINT_PAIN_YES = {0: 0.15, 1: 0.50, 2: 0.75}
_DIALYSIS_YES = {0: 0.02, 1: 0.06, 2: 0.12}
_AGE_MEAN = {0: 53.0, 1: 62.0, 2: 70.0}
_AGE_SD = 6.5
_HEIGHT_MEAN = {0: 1.67, 1: 1.63, 2: 1.59}
_BMI_MEAN = {0: 27.0, 1: 23.5, 2: 20.0}
_BMI_SD = 1.8


@dataclass
class SyntheticCorpus:
    clinical_csv: Path
    cache_dir: Path
    tag: str
    labels: np.ndarray
    patient_ids: list[str]
    config: PipelineConfig


def _normalized_concepts(rng: np.random.Generator,
                         labels: np.ndarray) -> np.ndarray:
    n = labels.size
    concepts = rng.normal(size=(n, N_CONCEPTS))
    for cid, means in CONCEPT_CLASS_MEANS.items():
        mvec = np.array([means[c] for c in labels], dtype=np.float64)
        centered = mvec - mvec.mean()
        scale = np.sqrt(1.0 + centered.var())
        concepts[:, cid] = (concepts[:, cid] + centered) / scale
    return concepts


def _factor_scores(rng: np.random.Generator, backbone: str, k: int,
                   concepts: np.ndarray) -> np.ndarray:
    n = concepts.shape[0]
    scores = np.empty((n, k))
    for j in range(k):
        mapped = CONCEPT_MAP.get((backbone, j))
        if mapped is None:
            scores[:, j] = rng.normal(size=n)
        else:
            cid, loading = mapped
            unique = rng.normal(size=n)
            scores[:, j] = (loading * concepts[:, cid]
                            + np.sqrt(1.0 - loading ** 2) * unique)
    return scores


def _deep_block(rng: np.random.Generator, backbone: str, dim: int,
                concepts: np.ndarray, spectrum: list[float]) -> np.ndarray:
    n = concepts.shape[0]
    k = len(spectrum)
    scores = _factor_scores(rng, backbone, k, concepts)
    directions = np.linalg.qr(rng.normal(size=(dim, k)))[0]
    noise_var = (1.0 - sum(spectrum)) / dim
    x = scores * np.sqrt(spectrum) @ directions.T
    x += rng.normal(scale=np.sqrt(noise_var), size=(n, dim))
    return x


def _categorical(rng, labels, levels, probs_by_class) -> list[str]:
    return [levels[rng.choice(len(levels), p=probs_by_class[int(c)])]
            for c in labels]


def _binary(rng, labels, yes_prob_by_class) -> list[str]:
    return ["yes" if rng.random() < yes_prob_by_class[int(c)] else "no"
            for c in labels]


def generate_corpus(out_dir: str | Path,
                    class_counts: tuple[int, int, int] = DEFAULT_CLASS_COUNTS,
                    seed: int = 20240901,
                    dims: dict[str, int] | None = None,
                    tag: str = "synthetic-v1",
                    master_seed: int = 1234) -> SyntheticCorpus:
    """Write the corpus (CSV + feature caches) and a ready-to-run config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "cache"
    dims = dims or dict(DEFAULT_DIMS)
    rng = np.random.Generator(np.random.PCG64(seed))

    labels = np.concatenate([
        np.full(count, c, dtype=np.int64)
        for c, count in enumerate(class_counts)
    ])
    labels = labels[rng.permutation(labels.size)]
    n = labels.size
    patient_ids = [f"P{i + 1:04d}" for i in range(n)]

    concepts = _normalized_concepts(rng, labels)
    for backbone, dim in dims.items():
        block_values = _deep_block(rng, backbone, dim, concepts,
                                   SPECTRA[backbone])
        block = backbones.block_from_array(backbone, block_values, patient_ids)
        backbones.save_feature_cache(cache_dir, tag, block,
                                     exporter_version="synthetic")

    clinical_csv = out_dir / "clinical.csv"
    _write_clinical_csv(clinical_csv, rng, labels, patient_ids)

    config = PipelineConfig(
        dataset=DatasetConfig(
            clinical_csv=str(clinical_csv),
            mode="cache_only",
            tag=tag,
        ),
        backbones=[BackboneRef(name=name) for name in dims],
        master_seed=master_seed,
        out_dir=str(out_dir / "out"),
        cache_dir=str(cache_dir),
    )
    return SyntheticCorpus(
        clinical_csv=clinical_csv,
        cache_dir=cache_dir,
        tag=tag,
        labels=labels,
        patient_ids=patient_ids,
        config=config,
    )


def _write_clinical_csv(path: Path, rng: np.random.Generator,
                        labels: np.ndarray, patient_ids: list[str]):
    header = ["patient_id", "label", "age", "height", "bmi", "gender",
              "medical_history", "fracture_history", "dialysis",
              "joint_pain", "alcohol_consumption", "site"]
    age = [f"{rng.normal(_AGE_MEAN[int(c)], _AGE_SD):.1f}" for c in labels]
    height = [f"{rng.normal(_HEIGHT_MEAN[int(c)], 0.06):.2f}" for c in labels]
    bmi = [f"{rng.normal(_BMI_MEAN[int(c)], _BMI_SD):.1f}" for c in labels]
    gender = ["M" if rng.random() < 0.45 else "F" for _ in labels]
    history = _categorical(rng, labels, _MEDICAL_HISTORY,
                           _MEDICAL_HISTORY_PROBS)
    fracture = _binary(rng, labels, _FRACTURE_YES)
    dialysis = _binary(rng, labels, _DIALYSIS_YES)
    joint_pain = _binary(rng, labels, _JOINT_PAIN_YES)
    alcohol = _categorical(rng, labels, _ALCOHOL, _ALCOHOL_PROBS)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, pid in enumerate(patient_ids):
            writer.writerow([
                pid, CLASS_NAMES[int(labels[i])], age[i], height[i], bmi[i],
                gender[i], history[i], fracture[i], dialysis[i],
                joint_pain[i], alcohol[i], "knee",
            ])
