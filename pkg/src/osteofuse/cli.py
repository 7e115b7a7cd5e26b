"""Command-line entry points for the pipeline."""

from __future__ import annotations

import json
import os
from pathlib import Path

import click
import numpy as np

from . import backbones, clinical, fusion, metrics
from . import pipeline, reporting, shapley, varclus as vc
from .bundle import load_bundle, save_bundle


def _load_config(config_path, seed=None, out=None, threads=None,
                 no_cache=False) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.from_yaml(config_path)
    if seed is not None:
        cfg.master_seed = seed
    if out is not None:
        cfg.out_dir = out
    if threads is not None:
        cfg.threads = threads
    if no_cache:
        cfg.use_cache = False
    env_cache = os.environ.get("OSTEOFUSE_CACHE")
    if env_cache:
        cfg.cache_dir = env_cache
    return cfg


config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(exists=True),
                             help="pipeline config (YAML)")
seed_option = click.option("--seed", type=int, default=None,
                           help="override master seed")
out_option = click.option("--out", type=click.Path(), default=None,
                          help="override output directory")
threads_option = click.option("--threads", type=int, default=None,
                              help="worker threads for feature extraction")
no_cache_option = click.option("--no-cache", is_flag=True,
                               help="recompute features, ignoring the cache")


@click.group()
def main():
    """Multi-modal osteoporosis classification pipeline."""


@main.command("extract-features")
@config_option
@seed_option
@threads_option
@no_cache_option
def extract_features_cmd(config_path, seed, threads, no_cache):
    """Run the backbones over the configured images and fill the cache."""
    cfg = _load_config(config_path, seed=seed, threads=threads,
                       no_cache=no_cache)
    if cfg.dataset.mode == "cache_only":
        click.echo("dataset mode is cache_only; features are already cached")
        return
    dataset = pipeline.load_dataset(cfg)
    for name, block in dataset.blocks.items():
        click.echo(f"{name}: {block.matrix.n_rows} x {block.matrix.n_cols}")


@main.command("cross-validate")
@config_option
@seed_option
@out_option
@threads_option
@no_cache_option
@click.option("--holdout", type=float, default=None,
              help="evaluate one stratified held-out split of this fraction "
                   "instead of k-fold CV")
def cross_validate_cmd(config_path, seed, out, threads, no_cache, holdout):
    """Stratified cross-validation with cumulative reporting."""
    cfg = _load_config(config_path, seed=seed, out=out, threads=threads,
                       no_cache=no_cache)
    if holdout is not None:
        outcome = pipeline.run_holdout(cfg, holdout)
    else:
        outcome = pipeline.run_cv(cfg)
    payload = outcome.report.metrics_payload
    click.echo(f"reports written to {outcome.out_dir}")
    click.echo(f"micro accuracy: {payload['micro_accuracy']:.4f}")
    click.echo(f"macro accuracy: {payload['macro']['accuracy']:.4f}")
    macro_auc = payload["auc"]["macro"]
    click.echo(f"macro AUC: {macro_auc:.4f}" if macro_auc is not None
               else "macro AUC: undefined")


@main.command("train")
@config_option
@seed_option
@out_option
@threads_option
@no_cache_option
def train_cmd(config_path, seed, out, threads, no_cache):
    """Fit the full pipeline on every row and save one bundle."""
    cfg = _load_config(config_path, seed=seed, out=out, threads=threads,
                       no_cache=no_cache)
    bundle, varclus_result = pipeline.train_full(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = save_bundle(bundle, out_dir / "bundle_full.bin")
    reporting.write_training_curve_csv(out_dir / "training_curve.csv",
                                       bundle.fcn_model.training_curve)
    reporting.write_varclus_csv(out_dir / "varclus.csv", varclus_result)
    click.echo(f"bundle written to {path}")


@main.command("evaluate")
@config_option
@click.option("--bundle", "bundle_path", required=True,
              type=click.Path(exists=True))
@out_option
@threads_option
@no_cache_option
def evaluate_cmd(config_path, bundle_path, out, threads, no_cache):
    """Apply a saved bundle to the configured dataset and report metrics."""
    cfg = _load_config(config_path, out=out, threads=threads,
                       no_cache=no_cache)
    bundle = load_bundle(bundle_path)
    dataset = pipeline.load_dataset(cfg)
    probs, _ = pipeline.apply_bundle(bundle, dataset)
    preds = np.argmax(probs, axis=1)
    cm = metrics.confusion(dataset.labels, preds)
    priors = np.bincount(dataset.labels, minlength=3) / len(dataset.ids)
    payload = reporting.metrics_payload(
        cm, metrics.ovr_metrics(cm),
        metrics.fit_statistics(probs, dataset.labels, priors),
        metrics.roc_auc(probs, dataset.labels), priors.tolist(),
        extra={"protocol": {"bundle": str(bundle_path)}},
    )
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_metrics_json(out_dir / "metrics.json", payload)
    reporting.write_confusion_csv(out_dir / "confusion.csv", cm)
    click.echo(f"micro accuracy: {payload['micro_accuracy']:.4f}")


@main.command("explain")
@config_option
@click.option("--bundle", "bundle_path", required=True,
              type=click.Path(exists=True))
@out_option
@click.option("--permutations", type=int, default=None,
              help="override the configured permutation count")
def explain_cmd(config_path, bundle_path, out, permutations):
    """Shapley importance for a bundle's validation rows."""
    cfg = _load_config(config_path, out=out)
    bundle = load_bundle(bundle_path)
    n_perm = permutations or cfg.importance.n_permutations
    report = shapley.importance(
        bundle.fcn_model, bundle.validation_features, bundle.background,
        n_permutations=n_perm, seed=cfg.master_seed,
        feature_names=bundle.feature_columns,
        feature_groups=bundle.feature_groups,
    )
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_importance_csv(out_dir / "importance.csv", report)
    reporting.write_importance_svg(out_dir / "importance_plot.svg", report)
    for name in report.ranking[:5]:
        click.echo(f"{name}: {report.per_feature[name]:.5f}")


@main.command("predict")
@click.option("--bundle", "bundle_path", required=True,
              type=click.Path(exists=True))
@click.option("--clinical", "clinical_csv", required=True,
              type=click.Path(exists=True),
              help="CSV containing the patient's clinical row")
@click.option("--patient-id", default=None,
              help="row to use when the CSV has several")
@click.option("--image", "image_path", type=click.Path(exists=True),
              default=None)
@click.option("--permutations", type=int, default=2000)
@seed_option
def predict_cmd(bundle_path, clinical_csv, patient_id, image_path,
                permutations, seed):
    """Single-patient inference with a Shapley explanation (JSON to stdout)."""
    bundle = load_bundle(bundle_path)
    loaded = clinical.load_clinical(clinical_csv, bundle.encoder.schema)
    if patient_id is None:
        if len(loaded.records) != 1:
            raise click.UsageError(
                "clinical CSV has several rows; pass --patient-id")
        record = loaded.records[0]
    else:
        record = next((r for r in loaded.records
                       if r.patient_id == patient_id), None)
        if record is None:
            raise click.UsageError(f"no row for patient {patient_id!r}")

    deep = None
    if image_path is None:
        deep = _cached_deep_features(bundle, record.patient_id)
    result = pipeline.predict_one(
        bundle, image_path, record, deep_features=deep,
        n_permutations=permutations, seed=seed or 0)
    click.echo(json.dumps({
        "patient_id": record.patient_id,
        "class": result.class_name,
        "probabilities": {
            name: float(p)
            for name, p in zip(clinical.CLASS_NAMES, result.probabilities)
        },
        "shapley_values": result.shapley_values,
        "efficiency_gap": result.efficiency_gap,
    }, indent=2, sort_keys=True))


def _cached_deep_features(bundle, patient_id: str) -> dict[str, np.ndarray]:
    cfg = pipeline.PipelineConfig.from_dict(bundle.config_snapshot)
    env_cache = os.environ.get("OSTEOFUSE_CACHE")
    cache_dir = env_cache or cfg.cache_dir
    deep = {}
    for ref in cfg.backbones:
        block = backbones.load_feature_cache(cache_dir, ref.name,
                                             cfg.dataset.tag)
        if block is None:
            raise click.UsageError(
                f"no --image given and no cached features for {ref.name!r}")
        try:
            row = block.matrix.row_ids.index(patient_id)
        except ValueError:
            raise click.UsageError(
                f"patient {patient_id!r} not present in the feature cache"
            ) from None
        deep[ref.name] = block.matrix.values[row]
    return deep


@main.group()
def report():
    """Standalone report emission."""


@report.command("varclus")
@config_option
@out_option
@threads_option
@no_cache_option
def report_varclus_cmd(config_path, out, threads, no_cache):
    """Cluster the fused components on all rows and write varclus.csv."""
    cfg = _load_config(config_path, out=out, threads=threads,
                       no_cache=no_cache)
    dataset = pipeline.load_dataset(cfg)
    n = len(dataset.ids)
    scores = []
    for name, block in dataset.blocks.items():
        model = fusion.fit_pca(block, np.arange(n), cfg.pca_threshold,
                               standardize=cfg.pca_standardize)
        scores.append((name, fusion.transform(model, block)))
    result = vc.varclus(fusion.fuse(scores),
                        cfg.varclus.split_eigen_threshold,
                        cfg.varclus.max_reassign_iters)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_varclus_csv(out_dir / "varclus.csv", result)
    click.echo(f"{result.n_clusters} clusters over {result.n_variables} "
               f"components -> {out_dir / 'varclus.csv'}")


if __name__ == "__main__":
    main()
