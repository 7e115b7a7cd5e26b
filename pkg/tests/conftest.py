import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from osteofuse import pipeline, synthetic

settings.register_profile(
    "suite", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def exact_correlation_data(corr: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Data whose population-convention sample correlation equals ``corr``.

    Columns of an orthonormalized random matrix are mixed by the symmetric
    square root of ``corr``, so sample moments match exactly (up to rounding),
    not just in expectation.
    """
    rng = np.random.default_rng(seed)
    p = corr.shape[0]
    raw = rng.normal(size=(n, p))
    raw -= raw.mean(axis=0)
    q, _ = np.linalg.qr(raw)
    u = q * np.sqrt(n)
    w, v = np.linalg.eigh(corr)
    root = v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return u @ root.T


def equicorrelated(k: int, r: float) -> np.ndarray:
    return np.full((k, k), r) + np.eye(k) * (1.0 - r)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Fast pipeline corpus: real structure, reduced feature dims."""
    root = tmp_path_factory.mktemp("corpus_small")
    return synthetic.generate_corpus(
        root, dims={"vgg19": 64, "inceptionv3": 80, "resnet50": 96})


@pytest.fixture(scope="session")
def acceptance_corpus(tmp_path_factory):
    """Dataset-shaped corpus for the acceptance suite.

    If OSTEOFUSE_DATASET points at a pipeline config for the real screening
    dataset, that is used instead of the bundled synthetic stand-in.
    """
    real = os.environ.get("OSTEOFUSE_DATASET")
    if real:
        return pipeline.PipelineConfig.from_yaml(real)
    root = tmp_path_factory.mktemp("corpus_full")
    return synthetic.generate_corpus(root).config
