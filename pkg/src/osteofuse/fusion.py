"""Per-backbone PCA and concatenation of the retained component scores.

Covariance uses the population (divide-by-n) convention.  Components whose
explained-variance ratio meets the threshold are kept; scores from the three
backbones are concatenated as ``PC<k>_<Backbone>`` columns.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .backbones import DeepFeatureBlock
from .errors import DegenerateDataError, DimensionMismatchError, RowCountMismatchError
from .features import PROVENANCE_DEEP_FUSED, FeatureMatrix

# Display names used in component columns, matching the cluster report style.
BACKBONE_DISPLAY = {"vgg19": "VGG", "inceptionv3": "Inception", "resnet50": "ResNet"}
BACKBONE_ORDER = ("vgg19", "inceptionv3", "resnet50")


def display_name(backbone_name: str) -> str:
    return BACKBONE_DISPLAY.get(backbone_name, backbone_name.capitalize())


@dataclass
class PCAModel:
    backbone_name: str
    mean: np.ndarray                    # (n_features,)
    scale: np.ndarray | None            # per-feature stds when z-scored, else None
    components: np.ndarray              # (m, n_features), rows orthonormal
    explained_variance_ratio: np.ndarray  # (m,), descending, each >= threshold
    eigenvalues: np.ndarray             # (m,), population covariance eigenvalues
    full_ratio_spectrum: np.ndarray     # all pre-truncation ratios, sums to 1
    threshold: float
    n_fit: int
    fit_rows_hash: str = ""

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def _apply_sign_convention(components: np.ndarray) -> np.ndarray:
    """Make each component's largest-magnitude entry positive."""
    out = components.copy()
    for row in out:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return out


def _spectrum_svd(xc: np.ndarray, n: int):
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    return s ** 2 / n, vt


def _spectrum_gram(xc: np.ndarray, n: int):
    gram = xc @ xc.T / n
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # Right singular vectors: v_i = X' u_i / sqrt(n * lambda_i)
    nz = evals > 1e-300
    vt = np.zeros((evals.size, xc.shape[1]))
    vt[nz] = (xc.T @ evecs[:, nz] / np.sqrt(n * evals[nz])).T
    return evals, vt


def _spectrum_direct(xc: np.ndarray, n: int):
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    return np.clip(evals[order], 0.0, None), evecs[:, order].T


_SPECTRUM_ROUTES = {
    "svd": _spectrum_svd,
    "gram": _spectrum_gram,
    "direct": _spectrum_direct,
}


def fit_pca(block: DeepFeatureBlock, fit_rows, threshold: float = 0.02,
            method: str = "svd", standardize: bool = False) -> PCAModel:
    """Centered PCA on the fit rows, keeping components with ratio >= threshold.

    ``method`` picks the numerical route: thin SVD of the centered data
    (default), eigendecomposition of the samples-by-samples Gram matrix, or the
    direct feature-by-feature covariance.  All three agree to rounding.
    ``standardize`` switches from centering-only (default) to full z-scoring
    of each feature before the decomposition.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    fit_rows = np.asarray(fit_rows, dtype=np.intp)
    if fit_rows.size < 2:
        raise ValueError("PCA needs at least 2 fit rows")

    x = np.asarray(block.matrix.values[fit_rows], dtype=np.float64)
    n = x.shape[0]
    mean = x.mean(axis=0)
    xc = x - mean
    if np.max(np.abs(xc)) == 0.0:
        raise DegenerateDataError(
            f"all fit rows of block {block.backbone_name!r} are identical"
        )
    scale = None
    if standardize:
        stds = x.std(axis=0)
        scale = np.where(stds > 0.0, stds, 1.0)  # constant features stay 0
        xc = xc / scale

    try:
        route = _SPECTRUM_ROUTES[method]
    except KeyError:
        raise ValueError(f"unknown PCA method {method!r}") from None
    eigenvalues, vt = route(xc, n)

    total = eigenvalues.sum()
    ratios = eigenvalues / total
    m = max(1, int(np.sum(ratios >= threshold)))
    m = min(m, min(block.matrix.n_cols, n - 1))

    fit_hash = hashlib.blake2b(
        np.sort(fit_rows).astype(np.int64).tobytes(), digest_size=16,
    ).hexdigest()
    return PCAModel(
        backbone_name=block.backbone_name,
        mean=mean,
        scale=scale,
        components=_apply_sign_convention(vt[:m]),
        explained_variance_ratio=ratios[:m].copy(),
        eigenvalues=eigenvalues[:m].copy(),
        full_ratio_spectrum=ratios.copy(),
        threshold=threshold,
        n_fit=n,
        fit_rows_hash=fit_hash,
    )


def transform(model: PCAModel, block: DeepFeatureBlock) -> FeatureMatrix:
    """Project a block onto the retained components: (X - mean) @ components'."""
    if block.matrix.n_cols != model.n_features:
        raise DimensionMismatchError(
            f"block has {block.matrix.n_cols} columns, "
            f"PCA model expects {model.n_features}"
        )
    centered = block.matrix.values - model.mean
    if model.scale is not None:
        centered = centered / model.scale
    scores = centered @ model.components.T
    name = display_name(model.backbone_name)
    columns = [f"PC{k + 1}_{name}" for k in range(model.n_components)]
    return FeatureMatrix(
        values=scores,
        columns=columns,
        provenance=[PROVENANCE_DEEP_FUSED] * len(columns),
        row_ids=list(block.matrix.row_ids),
    )


@dataclass
class FusedComponents:
    matrix: FeatureMatrix


def fuse(scores_per_backbone: list[tuple[str, FeatureMatrix]]) -> FusedComponents:
    """Concatenate per-backbone component scores in canonical backbone order."""
    if not scores_per_backbone:
        raise ValueError("nothing to fuse")

    def order_key(item):
        name = item[0]
        try:
            return (BACKBONE_ORDER.index(name), name)
        except ValueError:
            return (len(BACKBONE_ORDER), name)

    ordered = sorted(scores_per_backbone, key=order_key)
    fused = ordered[0][1]
    for _, scores in ordered[1:]:
        if scores.n_rows != fused.n_rows:
            raise RowCountMismatchError(
                f"score blocks disagree on row count: "
                f"{fused.n_rows} vs {scores.n_rows}"
            )
        fused = fused.hstack(scores)
    return FusedComponents(matrix=fused)
