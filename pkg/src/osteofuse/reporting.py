"""Report emission: metrics.json, confusion/ROC/cluster/importance CSVs, the
importance bar chart, and the run manifest.  Everything written here is a
deterministic function of its inputs (no timestamps, sorted keys)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .clinical import CLASS_NAMES
from .metrics import ConfusionMatrix, FitStats, RateReport, RocReport
from .shapley import ImportanceReport
from .varclus import VarClusResult

FORMULAS = {
    "accuracy": "(TP+TN)/(TP+TN+FP+FN)",
    "sensitivity": "TP/(TP+FN)",
    "precision": "TP/(TP+FP)",
    "specificity": "TN/(TN+FP)",
    "f1": "2*precision*sensitivity/(precision+sensitivity)",
    "generalized_r2": "(1-exp(2*(LL0-LL)/n))/(1-exp(2*LL0/n))",
    "entropy_r2": "1-LL/LL0",
    "rase": "sqrt(mean((onehot-prob)^2))",
    "mad": "mean(|onehot-prob|)",
    "log_likelihood": "sum(log prob[true class])",
    "auc": "trapezoid over one-vs-rest threshold sweep",
}


def _clean(value):
    """NaN/Inf -> None so the JSON stays strict; 'undefined' markers survive."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else None
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    return value


def metrics_payload(cm: ConfusionMatrix, rates: RateReport, fit: FitStats,
                    roc: RocReport, priors, extra: dict | None = None) -> dict:
    payload = {
        "class_names": list(CLASS_NAMES),
        "n_samples": cm.total,
        "confusion": cm.counts.tolist(),
        "per_class": {
            CLASS_NAMES[c]: rates.per_class[c] for c in rates.per_class
        },
        "macro": rates.macro,
        "micro_accuracy": rates.micro_accuracy,
        "fit": {
            "generalized_r2": fit.generalized_r2,
            "entropy_r2": fit.entropy_r2,
            "rase": fit.rase,
            "mad": fit.mad,
            "log_likelihood": fit.log_likelihood,
            "log_likelihood_per_sample": fit.mean_log_likelihood,
            "log_likelihood_null": fit.log_likelihood_null,
        },
        "auc": {
            "per_class": {
                CLASS_NAMES[c]: roc.per_class[c].auc for c in roc.per_class
            },
            "macro": roc.macro_auc,
        },
        "priors": list(priors),
        "formulas": FORMULAS,
    }
    if extra:
        payload.update(extra)
    return _clean(payload)


def write_metrics_json(path: str | Path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def write_confusion_csv(path: str | Path, cm: ConfusionMatrix):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted", *CLASS_NAMES])
        for c, row in enumerate(cm.counts):
            writer.writerow([CLASS_NAMES[c], *row.tolist()])


def write_roc_csvs(out_dir: str | Path, roc: RocReport) -> list[Path]:
    paths = []
    for c, curve in roc.per_class.items():
        path = Path(out_dir) / f"roc_{CLASS_NAMES[c]}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr", "threshold"])
            for fpr, tpr, thr in zip(curve.fpr, curve.tpr, curve.thresholds):
                writer.writerow([repr(float(fpr)), repr(float(tpr)),
                                 repr(float(thr))])
        paths.append(path)
    return paths


def write_varclus_csv(path: str | Path, result: VarClusResult):
    """Cluster summary sorted by total proportion of variation, descending."""
    rows = []
    for i, node in enumerate(result.clusters):
        rows.append({
            "cluster": i + 1,
            "n_members": len(node.member_columns),
            "members": ";".join(node.member_columns),
            "representative": result.representative[i],
            "cluster_proportion": result.cluster_proportion[i],
            "total_proportion": result.total_proportion[i],
        })
    rows.sort(key=lambda r: (-r["total_proportion"], r["cluster"]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            row["cluster_proportion"] = repr(row["cluster_proportion"])
            row["total_proportion"] = repr(row["total_proportion"])
            writer.writerow(row)


def write_importance_csv(path: str | Path, report: ImportanceReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "importance", "rank"])
        for rank, name in enumerate(report.ranking, start=1):
            writer.writerow([name, repr(report.per_feature[name]), rank])


def write_importance_svg(path: str | Path, report: ImportanceReport):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "osteofuse"}):
        names = list(reversed(report.ranking))
        values = [report.per_feature[n] for n in names]
        fig, ax = plt.subplots(figsize=(7, max(2.5, 0.3 * len(names) + 1)))
        ax.barh(names, values, color="#4878a8")
        ax.set_xlabel(
            f"mean |Shapley value| over explained samples "
            f"({report.n_permutations} permutations)"
        )
        ax.set_title("Feature importance")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def write_training_curve_csv(path: str | Path,
                             curve: list[tuple[float, float]]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "penalty"])
        for epoch, (loss_value, penalty) in enumerate(curve):
            writer.writerow([epoch, repr(float(loss_value)),
                             repr(float(penalty))])


def write_run_manifest(path: str | Path, config_dict: dict, hashes: dict,
                       versions: dict):
    payload = _clean({
        "config": config_dict,
        "hashes": hashes,
        "versions": versions,
    })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")
