"""Versioned on-disk container for everything a fitted fold needs at
prediction time: clinical encoder, PCA models, cluster selection, network
weights, Shapley background rows, and the fold's validation rows with their
stored probabilities (reloading must reproduce them)."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clinical import ClinicalSchema, ContinuousStat, EncoderState
from .fcn import FCNConfig, FCNModel
from .fusion import PCAModel

BUNDLE_FORMAT_VERSION = 1


@dataclass
class VarClusSummary:
    """The part of a clustering result needed after fitting."""

    member_columns: list[list[str]]
    representatives: list[str]
    lambda1: list[float]
    lambda2: list[float]
    cluster_proportion: list[float]
    total_proportion: list[float]
    one_minus_r2_ratio: dict[str, float]
    n_variables: int


@dataclass
class ModelBundle:
    fold: int
    config_snapshot: dict
    encoder: EncoderState
    pca_models: dict[str, PCAModel]
    varclus_summary: VarClusSummary
    fcn_model: FCNModel
    feature_columns: list[str]
    feature_groups: list[str]
    feature_provenance: list[str]
    background: np.ndarray
    validation_ids: list[str]
    validation_features: np.ndarray
    validation_probs: np.ndarray
    validation_labels: np.ndarray
    dataset_hashes: dict[str, str] = field(default_factory=dict)

    def verify(self) -> float:
        """Max |stored - recomputed| probability over the validation rows."""
        from .fcn import forward

        if self.validation_features.shape[0] == 0:
            return 0.0
        recomputed = forward(self.fcn_model, self.validation_features)
        return float(np.max(np.abs(recomputed - self.validation_probs)))


def _encoder_meta(enc: EncoderState) -> dict:
    return {
        "schema": {
            "retained_continuous": enc.schema.retained_continuous,
            "retained_categorical": enc.schema.retained_categorical,
            "excluded": enc.schema.excluded,
            "label_column": enc.schema.label_column,
            "id_column": enc.schema.id_column,
            "weight_column": enc.schema.weight_column,
            "bmi_column": enc.schema.bmi_column,
        },
        "continuous_stats": {
            col: {"median": s.median, "mean": s.mean, "std": s.std}
            for col, s in enc.continuous_stats.items()
        },
        "categorical_levels": enc.categorical_levels,
    }


def _encoder_from_meta(meta: dict) -> EncoderState:
    return EncoderState(
        schema=ClinicalSchema(**meta["schema"]),
        continuous_stats={
            col: ContinuousStat(**vals)
            for col, vals in meta["continuous_stats"].items()
        },
        categorical_levels={k: list(v)
                            for k, v in meta["categorical_levels"].items()},
    )


def save_bundle(bundle: ModelBundle, path: str | Path) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    pca_meta = {}
    for name, pca in bundle.pca_models.items():
        arrays[f"pca.{name}.mean"] = pca.mean
        if pca.scale is not None:
            arrays[f"pca.{name}.scale"] = pca.scale
        arrays[f"pca.{name}.components"] = pca.components
        arrays[f"pca.{name}.ratios"] = pca.explained_variance_ratio
        arrays[f"pca.{name}.eigenvalues"] = pca.eigenvalues
        arrays[f"pca.{name}.full_spectrum"] = pca.full_ratio_spectrum
        pca_meta[name] = {"threshold": pca.threshold, "n_fit": pca.n_fit,
                          "fit_rows_hash": pca.fit_rows_hash}

    for pname, tensor in bundle.fcn_model.parameter_tensors().items():
        arrays[f"fcn.{pname}"] = tensor
    arrays["fcn.training_curve"] = np.array(bundle.fcn_model.training_curve,
                                            dtype=np.float64)
    arrays["background"] = bundle.background
    arrays["validation.features"] = bundle.validation_features
    arrays["validation.probs"] = bundle.validation_probs
    arrays["validation.labels"] = bundle.validation_labels

    meta = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "fold": bundle.fold,
        "config": bundle.config_snapshot,
        "encoder": _encoder_meta(bundle.encoder),
        "pca": pca_meta,
        "varclus": {
            "member_columns": bundle.varclus_summary.member_columns,
            "representatives": bundle.varclus_summary.representatives,
            "lambda1": bundle.varclus_summary.lambda1,
            "lambda2": bundle.varclus_summary.lambda2,
            "cluster_proportion": bundle.varclus_summary.cluster_proportion,
            "total_proportion": bundle.varclus_summary.total_proportion,
            "one_minus_r2_ratio": bundle.varclus_summary.one_minus_r2_ratio,
            "n_variables": bundle.varclus_summary.n_variables,
        },
        "fcn_config": bundle.fcn_model.config.to_dict(),
        "fcn_input_columns": bundle.fcn_model.input_columns,
        "fcn_n_classes": bundle.fcn_model.n_classes,
        "feature_columns": bundle.feature_columns,
        "feature_groups": bundle.feature_groups,
        "feature_provenance": bundle.feature_provenance,
        "validation_ids": bundle.validation_ids,
        "dataset_hashes": bundle.dataset_hashes,
    }
    arrays["meta_json"] = np.array(json.dumps(meta, sort_keys=True))

    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(tmp, **arrays)
    os.replace(tmp, path)
    return path


def load_bundle(path: str | Path) -> ModelBundle:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta_json"]))
        if meta["format_version"] != BUNDLE_FORMAT_VERSION:
            raise ValueError(
                f"bundle format {meta['format_version']} not supported "
                f"(expected {BUNDLE_FORMAT_VERSION})"
            )
        pca_models = {}
        for name, extra in meta["pca"].items():
            scale_key = f"pca.{name}.scale"
            pca_models[name] = PCAModel(
                backbone_name=name,
                mean=data[f"pca.{name}.mean"],
                scale=data[scale_key] if scale_key in data.files else None,
                components=data[f"pca.{name}.components"],
                explained_variance_ratio=data[f"pca.{name}.ratios"],
                eigenvalues=data[f"pca.{name}.eigenvalues"],
                full_ratio_spectrum=data[f"pca.{name}.full_spectrum"],
                threshold=float(extra["threshold"]),
                n_fit=int(extra["n_fit"]),
                fit_rows_hash=str(extra["fit_rows_hash"]),
            )
        fcn_model = FCNModel(
            config=FCNConfig(**meta["fcn_config"]),
            input_columns=list(meta["fcn_input_columns"]),
            n_classes=int(meta["fcn_n_classes"]),
            w1=data["fcn.w1"], b1=data["fcn.b1"],
            w2=data["fcn.w2"], b2=data["fcn.b2"],
            w3=data["fcn.w3"], b3=data["fcn.b3"],
            training_curve=[tuple(row) for row in data["fcn.training_curve"]],
        )
        vc = meta["varclus"]
        summary = VarClusSummary(
            member_columns=[list(m) for m in vc["member_columns"]],
            representatives=list(vc["representatives"]),
            lambda1=list(vc["lambda1"]),
            lambda2=list(vc["lambda2"]),
            cluster_proportion=list(vc["cluster_proportion"]),
            total_proportion=list(vc["total_proportion"]),
            one_minus_r2_ratio=dict(vc["one_minus_r2_ratio"]),
            n_variables=int(vc["n_variables"]),
        )
        return ModelBundle(
            fold=int(meta["fold"]),
            config_snapshot=meta["config"],
            encoder=_encoder_from_meta(meta["encoder"]),
            pca_models=pca_models,
            varclus_summary=summary,
            fcn_model=fcn_model,
            feature_columns=list(meta["feature_columns"]),
            feature_groups=list(meta["feature_groups"]),
            feature_provenance=list(meta["feature_provenance"]),
            background=data["background"],
            validation_ids=list(meta["validation_ids"]),
            validation_features=data["validation.features"],
            validation_probs=data["validation.probs"],
            validation_labels=data["validation.labels"],
            dataset_hashes=dict(meta["dataset_hashes"]),
        )
