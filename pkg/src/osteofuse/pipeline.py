"""End-to-end orchestration: configuration, stratified cross-validation,
per-fold fitting of every stage, cumulative reporting, and single-patient
prediction from a saved bundle.

Every fitted statistic (encoder, PCA, clustering, network) is a function of
the training rows of its fold only; an audit log hashes each fit input and
asserts disjointness from the fold's test rows.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, backbones, clinical, fcn, fusion, metrics
from . import reporting, shapley, varclus as vc
from .bundle import ModelBundle, VarClusSummary, load_bundle, save_bundle
from .errors import ClassTooSmallError, SoftCheckWarning, StageError
from .features import PROVENANCE_CLINICAL, FeatureMatrix
from .imaging import RoiSpec, crop_roi, load_xray, scan_image_root, select_knee, to_tensor


# --- configuration -----------------------------------------------------------


@dataclass
class BackboneRef:
    name: str
    model: str | None = None
    manifest: str | None = None


@dataclass
class DatasetConfig:
    clinical_csv: str
    image_root: str | None = None
    roi_manifest: str | None = None
    roi_mode: str = "center_square"
    mode: str = "directory"  # or "cache_only"
    tag: str = "dataset"

    def __post_init__(self):
        if self.mode not in ("directory", "cache_only"):
            raise ValueError(f"unknown dataset mode {self.mode!r}")


@dataclass
class VarclusConfig:
    split_eigen_threshold: float = 1.0
    max_reassign_iters: int = 20
    scope: str = "per_fold"  # or "all_data"

    def __post_init__(self):
        if self.scope not in ("per_fold", "all_data"):
            raise ValueError(f"unknown varclus scope {self.scope!r}")


@dataclass
class CVConfig:
    n_folds: int = 5
    stratified: bool = True

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValueError("n_folds must be at least 2")


@dataclass
class ImportanceConfig:
    n_permutations: int = 2000
    background_rows: int = 100
    all_folds: bool = False


@dataclass
class PipelineConfig:
    dataset: DatasetConfig
    backbones: list[BackboneRef]
    pca_threshold: float = 0.02
    pca_standardize: bool = False
    varclus: VarclusConfig = field(default_factory=VarclusConfig)
    fcn: fcn.FCNConfig = field(default_factory=fcn.FCNConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    master_seed: int = 0
    out_dir: str = "out"
    cache_dir: str = "cache"
    use_cache: bool = True
    threads: int = 1
    clinical_schema: clinical.ClinicalSchema = field(
        default_factory=clinical.ClinicalSchema)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        data["dataset"] = DatasetConfig(**data["dataset"])
        data["backbones"] = [BackboneRef(**b) for b in data["backbones"]]
        if "varclus" in data:
            data["varclus"] = VarclusConfig(**data["varclus"])
        if "fcn" in data:
            data["fcn"] = fcn.FCNConfig(**data["fcn"])
        if "cv" in data:
            data["cv"] = CVConfig(**data["cv"])
        if "importance" in data:
            data["importance"] = ImportanceConfig(**data["importance"])
        if "clinical_schema" in data:
            data["clinical_schema"] = clinical.ClinicalSchema(
                **data["clinical_schema"])
        return cls(**data)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_yaml(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


# --- fold planning -----------------------------------------------------------


@dataclass
class FoldPlan:
    folds: list[tuple[np.ndarray, np.ndarray]]  # (train, test) index arrays
    fold_seeds: list[int]
    n_folds: int
    master_seed: int


def derive_seed(master_seed: int, *counters: int) -> int:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(counters))
    return int(ss.generate_state(1)[0])


def make_folds(labels, n_folds: int, seed: int) -> FoldPlan:
    """Deterministic stratified partition; per-class fold counts differ by <= 1."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0,))))

    test_sets: list[list[int]] = [[] for _ in range(n_folds)]
    extra_offset = 0
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        if members.size < n_folds:
            raise ClassTooSmallError(
                f"class {int(c)} has {members.size} member(s); "
                f"needs at least {n_folds}"
            )
        shuffled = rng.permutation(members)
        base, extra = divmod(members.size, n_folds)
        extra_folds = {(extra_offset + j) % n_folds for j in range(extra)}
        extra_offset = (extra_offset + extra) % n_folds
        pos = 0
        for f in range(n_folds):
            take = base + (1 if f in extra_folds else 0)
            test_sets[f].extend(shuffled[pos:pos + take].tolist())
            pos += take

    folds = []
    for f in range(n_folds):
        test = np.array(sorted(test_sets[f]), dtype=np.intp)
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        folds.append((np.nonzero(mask)[0], test))
    seeds = [derive_seed(seed, 1, f) for f in range(n_folds)]
    return FoldPlan(folds=folds, fold_seeds=seeds, n_folds=n_folds,
                    master_seed=seed)


def holdout_split(labels, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Single stratified split: (train, test) with ~frac of each class in test."""
    if not 0.0 < frac < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(2,))))
    test: list[int] = []
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        n_test = max(1, int(round(frac * members.size)))
        if n_test >= members.size:
            raise ClassTooSmallError(
                f"class {int(c)} too small for holdout fraction {frac}"
            )
        test.extend(rng.permutation(members)[:n_test].tolist())
    test_idx = np.array(sorted(test), dtype=np.intp)
    mask = np.ones(labels.size, dtype=bool)
    mask[test_idx] = False
    return np.nonzero(mask)[0], test_idx


# --- leakage audit -----------------------------------------------------------


@dataclass
class AuditEntry:
    stage: str
    fold: int
    n_fit_rows: int
    fit_hash: str


class LeakageAudit:
    """Hashes every fit input and asserts it is disjoint from test rows."""

    def __init__(self):
        self.entries: list[AuditEntry] = []

    def record(self, stage: str, fold: int, fit_rows: np.ndarray,
               test_rows: np.ndarray, payload: np.ndarray | None = None):
        fit = set(int(i) for i in fit_rows)
        test = set(int(i) for i in test_rows)
        overlap = fit & test
        if overlap:
            raise AssertionError(
                f"leakage: stage {stage!r} fold {fold} fitted on test rows "
                f"{sorted(overlap)[:5]}"
            )
        h = hashlib.blake2b(digest_size=16)
        h.update(np.asarray(sorted(fit), dtype=np.int64).tobytes())
        if payload is not None:
            h.update(np.ascontiguousarray(payload, dtype=np.float64).tobytes())
        self.entries.append(AuditEntry(stage=stage, fold=fold,
                                       n_fit_rows=len(fit),
                                       fit_hash=h.hexdigest()))


# --- dataset assembly --------------------------------------------------------


@dataclass
class Dataset:
    records: list[clinical.RawClinicalRecord]
    ids: list[str]
    labels: np.ndarray
    blocks: dict[str, backbones.DeepFeatureBlock]
    schema: clinical.ClinicalSchema
    clinical_hash: str
    feature_fingerprint: str


def _file_hash(path: str | Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _align_block(block: backbones.DeepFeatureBlock,
                 ids: list[str]) -> backbones.DeepFeatureBlock:
    position = {rid: i for i, rid in enumerate(block.matrix.row_ids)}
    missing = [rid for rid in ids if rid not in position]
    if missing:
        raise ValueError(
            f"backbone {block.backbone_name!r}: no features for patient(s) "
            f"{missing[:5]}"
        )
    order = [position[rid] for rid in ids]
    return backbones.DeepFeatureBlock(
        backbone_name=block.backbone_name,
        matrix=block.matrix.subset_rows(np.array(order)),
    )


def _extract_from_images(config: PipelineConfig, ids: list[str],
                         cache_fp: str) -> dict[str, backbones.DeepFeatureBlock]:
    ds = config.dataset
    entries = scan_image_root(ds.image_root)
    by_patient: dict[str, list] = {}
    for _cls, pid, side, path in entries:
        by_patient.setdefault(pid, []).append((side, path))
    missing = [pid for pid in ids if pid not in by_patient]
    if missing:
        raise ValueError(f"no image for patient(s) {missing[:5]}")

    knee_seed = derive_seed(config.master_seed, 3)
    selected: dict[str, object] = {}
    for pid in ids:
        images = [load_xray(path, pid, side) for side, path in by_patient[pid]]
        selected[pid] = select_knee(images, knee_seed)

    roi = RoiSpec(mode=ds.roi_mode, manifest_path=ds.roi_manifest)
    cropped = {pid: crop_roi(img, roi) for pid, img in selected.items()}

    blocks = {}
    for ref in config.backbones:
        if not ref.model or not ref.manifest:
            raise ValueError(f"backbone {ref.name!r} has no model/manifest path")
        declared = backbones.read_manifest(ref.manifest)
        if config.use_cache:
            cached = backbones.load_feature_cache(
                config.cache_dir, ref.name, cache_fp,
                exporter_version=str(declared["exporter_version"]))
            if cached is not None:
                blocks[ref.name] = _align_block(cached, ids)
                continue
        model = backbones.load_backbone(ref.model, ref.manifest)
        tensors = (to_tensor(cropped[pid], model.input_spec) for pid in ids)
        block = backbones.extract_features(model, tensors, ids,
                                           threads=config.threads)
        if config.use_cache:
            backbones.save_feature_cache(config.cache_dir, cache_fp, block,
                                         model.exporter_version)
        blocks[ref.name] = block
    return blocks


def load_dataset(config: PipelineConfig) -> Dataset:
    loaded = clinical.load_clinical(config.dataset.clinical_csv,
                                    config.clinical_schema)
    ids = [r.patient_id for r in loaded.records]
    labels = np.array([clinical.encode_label(r.label) for r in loaded.records],
                      dtype=np.int64)

    if config.dataset.mode == "cache_only":
        fingerprint = config.dataset.tag
        blocks = {}
        for ref in config.backbones:
            cached = backbones.load_feature_cache(config.cache_dir, ref.name,
                                                  fingerprint)
            if cached is None:
                raise ValueError(
                    f"cache_only dataset: no cached features for backbone "
                    f"{ref.name!r} under tag {fingerprint!r} in "
                    f"{config.cache_dir}"
                )
            blocks[ref.name] = _align_block(cached, ids)
    else:
        entries = scan_image_root(config.dataset.image_root)
        items = sorted((pid, _file_hash(path)) for _cls, pid, _side, path in entries)
        fingerprint = backbones.dataset_fingerprint(
            items, f"roi={config.dataset.roi_mode}")
        blocks = _extract_from_images(config, ids, fingerprint)

    return Dataset(
        records=loaded.records,
        ids=ids,
        labels=labels,
        blocks=blocks,
        schema=loaded.schema,
        clinical_hash=_file_hash(config.dataset.clinical_csv),
        feature_fingerprint=fingerprint,
    )


# --- cross-validation --------------------------------------------------------


@dataclass
class FoldArtifacts:
    fold: int
    bundle: ModelBundle
    varclus_result: vc.VarClusResult
    test_indices: np.ndarray


@dataclass
class EvalReport:
    confusion: metrics.ConfusionMatrix
    rates: metrics.RateReport
    fit: metrics.FitStats
    roc: metrics.RocReport
    importance: shapley.ImportanceReport
    importance_soft_check: dict
    pooled_probs: np.ndarray
    metrics_payload: dict


@dataclass
class CVOutcome:
    report: EvalReport
    folds: list[FoldArtifacts]
    plan: FoldPlan
    audit: LeakageAudit
    out_dir: Path


def _stage(stage: str, fold: int | None, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, fold, exc) from exc


def _fit_fold(config: PipelineConfig, dataset: Dataset, fold: int,
              train_idx: np.ndarray, test_idx: np.ndarray, fold_seed: int,
              audit: LeakageAudit,
              frozen_varclus: vc.VarClusResult | None = None):
    """Fit every stage on the training rows; return fold artifacts."""
    records, labels = dataset.records, dataset.labels

    encoder = _stage("clinical-encoder", fold, clinical.fit_encoder,
                     records, dataset.schema, train_idx)
    table = _stage("clinical-encode", fold, clinical.encode, records, encoder)
    if table.rejected:
        raise StageError("clinical-encode", fold, ValueError(
            f"{len(table.rejected)} row(s) rejected: {table.rejected[:3]}"
        ))
    audit.record("clinical-encoder", fold, train_idx, test_idx,
                 table.feature_matrix.values[train_idx])

    pca_models: dict[str, fusion.PCAModel] = {}
    score_blocks: list[tuple[str, FeatureMatrix]] = []
    for name, block in dataset.blocks.items():
        model = _stage(f"pca-{name}", fold, fusion.fit_pca, block, train_idx,
                       config.pca_threshold,
                       standardize=config.pca_standardize)
        pca_models[name] = model
        score_blocks.append((name, fusion.transform(model, block)))
        audit.record(f"pca-{name}", fold, train_idx, test_idx,
                     block.matrix.values[train_idx])
    fused = _stage("fuse", fold, fusion.fuse, score_blocks)

    if frozen_varclus is None:
        train_fused = fusion.FusedComponents(
            matrix=fused.matrix.subset_rows(train_idx))
        varclus_result = _stage(
            "varclus", fold, vc.varclus, train_fused,
            config.varclus.split_eigen_threshold,
            config.varclus.max_reassign_iters,
        )
        audit.record("varclus", fold, train_idx, test_idx,
                     fused.matrix.values[train_idx])
    else:
        varclus_result = frozen_varclus

    reps = fused.matrix.select_columns(varclus_result.representative_columns())
    synergistic = _stage("combine", fold, vc.combine, reps,
                         table.feature_matrix)
    matrix = synergistic.matrix
    x = matrix.values

    fcn_config = replace(config.fcn, seed=fold_seed)
    model = _stage("fcn-train", fold, fcn.train, fcn_config, x[train_idx],
                   labels[train_idx], matrix.columns)
    audit.record("fcn-train", fold, train_idx, test_idx, x[train_idx])

    _, probs = fcn.predict(model, x[test_idx])
    background = shapley.stratified_background(
        x[train_idx], labels[train_idx],
        max_rows=config.importance.background_rows, seed=fold_seed)

    bundle = ModelBundle(
        fold=fold,
        config_snapshot=config.to_dict(),
        encoder=encoder,
        pca_models=pca_models,
        varclus_summary=VarClusSummary(
            member_columns=[n.member_columns for n in varclus_result.clusters],
            representatives=varclus_result.representative_columns(),
            lambda1=[n.lambda1 for n in varclus_result.clusters],
            lambda2=[n.lambda2 for n in varclus_result.clusters],
            cluster_proportion=[varclus_result.cluster_proportion[i]
                                for i in range(varclus_result.n_clusters)],
            total_proportion=[varclus_result.total_proportion[i]
                              for i in range(varclus_result.n_clusters)],
            one_minus_r2_ratio=varclus_result.one_minus_r2_ratio,
            n_variables=varclus_result.n_variables,
        ),
        fcn_model=model,
        feature_columns=matrix.columns,
        feature_groups=matrix.groups,
        feature_provenance=matrix.provenance,
        background=background,
        validation_ids=[dataset.ids[i] for i in test_idx],
        validation_features=x[test_idx],
        validation_probs=probs,
        validation_labels=labels[test_idx],
        dataset_hashes={
            "clinical": dataset.clinical_hash,
            "features": dataset.feature_fingerprint,
        },
    )
    return bundle, varclus_result, probs, matrix


def _importance_soft_check(report: shapley.ImportanceReport,
                           groups_by_name: dict[str, str]) -> dict:
    """At least two clinical features should outrank every deep component."""
    deep = [n for n in report.ranking
            if groups_by_name.get(n) != PROVENANCE_CLINICAL]
    clin = [n for n in report.ranking
            if groups_by_name.get(n) == PROVENANCE_CLINICAL]
    if not deep or not clin:
        return {"passed": None, "detail": "one modality absent"}
    top_deep = max(report.per_feature[n] for n in deep)
    above = [n for n in clin if report.per_feature[n] > top_deep]
    passed = len(above) >= 2
    if not passed:
        warnings.warn(
            "importance soft check: fewer than two clinical features rank "
            f"above every deep component (got {above})", SoftCheckWarning,
            stacklevel=2,
        )
    return {"passed": passed, "clinical_above_all_deep": above,
            "strongest_deep_importance": top_deep}


def run_cv(config: PipelineConfig, dataset: Dataset | None = None,
           write_reports: bool = True) -> CVOutcome:
    """Stratified k-fold cross-validation with cumulative reporting."""
    dataset = dataset or load_dataset(config)
    n = len(dataset.ids)
    plan = make_folds(dataset.labels, config.cv.n_folds, config.master_seed)
    audit = LeakageAudit()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    frozen = None
    if config.varclus.scope == "all_data":
        # Leaky variant kept for reproducing the published cluster table.
        all_scores = []
        for name, block in dataset.blocks.items():
            model = fusion.fit_pca(block, np.arange(n), config.pca_threshold,
                                    standardize=config.pca_standardize)
            all_scores.append((name, fusion.transform(model, block)))
        frozen = vc.varclus(fusion.fuse(all_scores),
                            config.varclus.split_eigen_threshold,
                            config.varclus.max_reassign_iters)

    cum = metrics.ConfusionMatrix(np.zeros((3, 3), dtype=np.int64))
    pooled = np.zeros((n, 3), dtype=np.float64)
    fold_artifacts: list[FoldArtifacts] = []

    for fold, (train_idx, test_idx) in enumerate(plan.folds):
        bundle, varclus_result, probs, matrix = _fit_fold(
            config, dataset, fold, train_idx, test_idx,
            plan.fold_seeds[fold], audit, frozen_varclus=frozen)
        preds = np.argmax(probs, axis=1)
        cum = cum.add(metrics.confusion(dataset.labels[test_idx], preds))
        pooled[test_idx] = probs
        fold_artifacts.append(FoldArtifacts(
            fold=fold, bundle=bundle, varclus_result=varclus_result,
            test_indices=test_idx))
        if write_reports:
            save_bundle(bundle, out_dir / f"bundle_fold{fold}.bin")

    assert cum.total == n, "cumulative confusion total must equal dataset size"
    priors = np.bincount(dataset.labels, minlength=3) / n
    rates = metrics.ovr_metrics(cum)
    fit = metrics.fit_statistics(pooled, dataset.labels, priors)
    roc = metrics.roc_auc(pooled, dataset.labels)

    final = fold_artifacts[-1]
    model = final.bundle.fcn_model
    columns = final.bundle.feature_columns
    groups = final.bundle.feature_groups
    explain_folds = fold_artifacts if config.importance.all_folds else [final]
    x_explain = np.vstack([fa.bundle.validation_features
                           for fa in explain_folds])
    imp = shapley.importance(
        model, x_explain, final.bundle.background,
        n_permutations=config.importance.n_permutations,
        seed=plan.fold_seeds[-1],
        feature_names=columns,
        feature_groups=groups,
    )
    group_prov = _group_provenance(groups, final.bundle.feature_provenance)
    soft = _importance_soft_check(imp, group_prov)

    payload = reporting.metrics_payload(
        cum, rates, fit, roc, priors.tolist(),
        extra={
            "protocol": {
                "n_folds": config.cv.n_folds,
                "master_seed": config.master_seed,
                "varclus_scope": config.varclus.scope,
                "pca_threshold": config.pca_threshold,
            },
            "pca_retained": {
                name: final.bundle.pca_models[name].n_components
                for name in final.bundle.pca_models
            },
            "importance_soft_check": soft,
        },
    )
    report = EvalReport(
        confusion=cum, rates=rates, fit=fit, roc=roc, importance=imp,
        importance_soft_check=soft, pooled_probs=pooled,
        metrics_payload=payload,
    )
    if write_reports:
        _write_all_reports(config, out_dir, report, final, dataset)
    return CVOutcome(report=report, folds=fold_artifacts, plan=plan,
                     audit=audit, out_dir=out_dir)


def _group_provenance(groups: list[str], provenance: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for grp, prov in zip(groups, provenance):
        out.setdefault(grp, prov)
    return out


def _write_all_reports(config: PipelineConfig, out_dir: Path,
                       report: EvalReport, final: FoldArtifacts,
                       dataset: Dataset):
    reporting.write_metrics_json(out_dir / "metrics.json",
                                 report.metrics_payload)
    reporting.write_confusion_csv(out_dir / "confusion.csv", report.confusion)
    reporting.write_roc_csvs(out_dir, report.roc)
    reporting.write_varclus_csv(out_dir / "varclus.csv", final.varclus_result)
    reporting.write_importance_csv(out_dir / "importance.csv",
                                   report.importance)
    reporting.write_importance_svg(out_dir / "importance_plot.svg",
                                   report.importance)
    reporting.write_training_curve_csv(
        out_dir / "training_curve.csv",
        final.bundle.fcn_model.training_curve)
    reporting.write_run_manifest(
        out_dir / "run_manifest.json",
        config.to_dict(),
        hashes={
            "clinical_csv": dataset.clinical_hash,
            "features": dataset.feature_fingerprint,
        },
        versions={"osteofuse": __version__, "numpy": np.__version__},
    )


def run_holdout(config: PipelineConfig, frac: float,
                dataset: Dataset | None = None,
                write_reports: bool = True) -> CVOutcome:
    """Single stratified held-out split evaluated like one fold."""
    dataset = dataset or load_dataset(config)
    train_idx, test_idx = holdout_split(dataset.labels, frac,
                                        config.master_seed)
    audit = LeakageAudit()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fold_seed = derive_seed(config.master_seed, 1, 0)

    bundle, varclus_result, probs, matrix = _fit_fold(
        config, dataset, 0, train_idx, test_idx, fold_seed, audit)
    preds = np.argmax(probs, axis=1)
    cm = metrics.confusion(dataset.labels[test_idx], preds)

    train_labels = dataset.labels[train_idx]
    priors = np.bincount(train_labels, minlength=3) / train_labels.size
    rates = metrics.ovr_metrics(cm)
    fit = metrics.fit_statistics(probs, dataset.labels[test_idx], priors)
    roc = metrics.roc_auc(probs, dataset.labels[test_idx])

    imp = shapley.importance(
        bundle.fcn_model, bundle.validation_features, bundle.background,
        n_permutations=config.importance.n_permutations, seed=fold_seed,
        feature_names=bundle.feature_columns,
        feature_groups=bundle.feature_groups,
    )
    soft = _importance_soft_check(
        imp, _group_provenance(bundle.feature_groups,
                               bundle.feature_provenance))

    payload = reporting.metrics_payload(
        cm, rates, fit, roc, priors.tolist(),
        extra={
            "protocol": {"holdout_fraction": frac,
                         "master_seed": config.master_seed},
            "importance_soft_check": soft,
        },
    )
    final = FoldArtifacts(fold=0, bundle=bundle,
                          varclus_result=varclus_result,
                          test_indices=test_idx)
    report = EvalReport(
        confusion=cm, rates=rates, fit=fit, roc=roc, importance=imp,
        importance_soft_check=soft, pooled_probs=probs,
        metrics_payload=payload,
    )
    if write_reports:
        save_bundle(bundle, out_dir / "bundle_holdout.bin")
        _write_all_reports(config, out_dir, report, final, dataset)
    plan = FoldPlan(folds=[(train_idx, test_idx)], fold_seeds=[fold_seed],
                    n_folds=1, master_seed=config.master_seed)
    return CVOutcome(report=report, folds=[final], plan=plan, audit=audit,
                     out_dir=out_dir)


def train_full(config: PipelineConfig, dataset: Dataset | None = None
               ) -> tuple[ModelBundle, vc.VarClusResult]:
    """Fit the whole pipeline on every row (no held-out rows)."""
    dataset = dataset or load_dataset(config)
    n = len(dataset.ids)
    audit = LeakageAudit()
    fold_seed = derive_seed(config.master_seed, 1, 0)
    bundle, varclus_result, _, _ = _fit_fold(
        config, dataset, 0, np.arange(n), np.array([], dtype=np.intp),
        fold_seed, audit)
    return bundle, varclus_result


def apply_bundle(bundle: ModelBundle, dataset: Dataset
                 ) -> tuple[np.ndarray, FeatureMatrix]:
    """Run a frozen bundle over a dataset: (probabilities, feature matrix)."""
    table = clinical.encode(dataset.records, bundle.encoder)
    if table.rejected:
        raise StageError("clinical-encode", bundle.fold, ValueError(
            f"{len(table.rejected)} row(s) rejected: {table.rejected[:3]}"))
    scores = []
    for name, pca in bundle.pca_models.items():
        block = dataset.blocks[name]
        scores.append((name, fusion.transform(pca, block)))
    fused = fusion.fuse(scores)
    reps = fused.matrix.select_columns(bundle.varclus_summary.representatives)
    synergistic = vc.combine(reps, table.feature_matrix)
    _, probs = fcn.predict(bundle.fcn_model, synergistic.matrix.values)
    return probs, synergistic.matrix


# --- single-patient prediction -----------------------------------------------


@dataclass
class PredictOneResult:
    class_name: str
    probabilities: np.ndarray
    shapley_values: dict[str, float]
    efficiency_gap: float


def _encode_one(bundle: ModelBundle,
                record: clinical.RawClinicalRecord) -> np.ndarray:
    table = clinical.encode([record], bundle.encoder)
    if table.rejected:
        raise ValueError(f"clinical row rejected: {table.rejected[0][1]}")
    return table.feature_matrix.values[0]


def predict_one(bundle: ModelBundle, image_path: str | Path | None,
                record: clinical.RawClinicalRecord,
                deep_features: dict[str, np.ndarray] | None = None,
                n_permutations: int = 2000, seed: int = 0) -> PredictOneResult:
    """Full single-patient inference with a Shapley explanation.

    Deep features come from the image through the bundled backbones, or from
    ``deep_features`` (backbone name -> raw feature vector) when inference
    already happened elsewhere.
    """
    clin_row = _stage("clinical-encode", None, _encode_one, bundle, record)

    scores: list[tuple[str, FeatureMatrix]] = []
    for name, pca in bundle.pca_models.items():
        if deep_features is not None and name in deep_features:
            raw = np.asarray(deep_features[name], dtype=np.float64)[None, :]
        elif image_path is not None:
            raw = _stage(f"backbone-{name}", None, _run_backbone_once,
                         bundle, name, image_path, record.patient_id)
        else:
            raise StageError(f"backbone-{name}", None, ValueError(
                "no image path and no precomputed deep features"))
        block = backbones.block_from_array(name, raw, [record.patient_id])
        scores.append((name, fusion.transform(pca, block)))
    fused = fusion.fuse(scores)
    reps = fused.matrix.select_columns(bundle.varclus_summary.representatives)

    x = np.concatenate([reps.values[0], clin_row])[None, :]
    if x.shape[1] != len(bundle.feature_columns):
        raise StageError("combine", None, ValueError(
            f"assembled {x.shape[1]} features, bundle expects "
            f"{len(bundle.feature_columns)}"))

    classes, probs = fcn.predict(bundle.fcn_model, x)
    c = int(classes[0])
    fn = shapley.model_value_fn(bundle.fcn_model)
    phi = shapley.shapley_sample(fn, x[0], bundle.background, n_permutations,
                                 seed=seed)
    values = phi[:, c]
    gap = abs(float(values.sum())
              - float(probs[0, c] - fn(bundle.background)[:, c].mean()))
    return PredictOneResult(
        class_name=clinical.decode_label(c),
        probabilities=probs[0],
        shapley_values={name: float(v)
                        for name, v in zip(bundle.feature_columns, values)},
        efficiency_gap=gap,
    )


def _run_backbone_once(bundle: ModelBundle, name: str, image_path,
                       patient_id: str) -> np.ndarray:
    config = PipelineConfig.from_dict(bundle.config_snapshot)
    ref = next((b for b in config.backbones if b.name == name), None)
    if ref is None or not ref.model or not ref.manifest:
        raise ValueError(f"bundle config has no model path for backbone {name!r}")
    model = backbones.load_backbone(ref.model, ref.manifest)
    img = load_xray(image_path, patient_id)
    roi = RoiSpec(mode=config.dataset.roi_mode,
                  manifest_path=config.dataset.roi_manifest)
    tensor = to_tensor(crop_roi(img, roi), model.input_spec)
    block = backbones.extract_features(model, [tensor], [patient_id])
    return block.matrix.values


__all__ = [
    "PipelineConfig", "DatasetConfig", "BackboneRef", "VarclusConfig",
    "CVConfig", "ImportanceConfig", "FoldPlan", "make_folds", "holdout_split",
    "LeakageAudit", "Dataset", "load_dataset", "run_cv", "run_holdout",
    "train_full", "apply_bundle", "predict_one", "PredictOneResult",
    "EvalReport", "CVOutcome", "load_bundle", "derive_seed",
]
