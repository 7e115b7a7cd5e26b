"""Confusion-matrix metrics, likelihood fit statistics, and ROC/AUC.

All rate metrics come from one-vs-rest reductions of a single multi-class
confusion matrix.  A zero denominator yields NaN (an explicit "undefined"
marker) rather than a silent zero; undefined entries are dropped from macro
averages with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import LabelOutOfRangeError, UndefinedMetricWarning

PROB_FLOOR = 1e-12

RATE_NAMES = ("accuracy", "sensitivity", "precision", "specificity", "f1")


@dataclass
class ConfusionMatrix:
    """Row = true class, column = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot accumulate matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def ovr(self, cls: int) -> tuple[int, int, int, int]:
        """One-vs-rest (TP, TN, FP, FN) for a class."""
        tp = int(self.counts[cls, cls])
        fn = int(self.counts[cls].sum()) - tp
        fp = int(self.counts[:, cls].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, tn, fp, fn


def confusion(y_true, y_pred, n_classes: int = 3) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have equal length")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise LabelOutOfRangeError(
                f"{name} contains a label outside 0..{n_classes - 1}"
            )
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def _safe_div(num: float, den: float, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} undefined (zero denominator)", UndefinedMetricWarning,
                      stacklevel=3)
        return float("nan")
    return num / den


def _nanmean(values: np.ndarray, what: str) -> float:
    defined = values[np.isfinite(values)]
    if defined.size < values.size:
        warnings.warn(
            f"{what}: {values.size - defined.size} undefined class value(s) "
            "excluded from the macro average",
            UndefinedMetricWarning, stacklevel=3,
        )
    if defined.size == 0:
        return float("nan")
    return float(defined.mean())


@dataclass
class RateReport:
    per_class: dict[int, dict[str, float]]
    macro: dict[str, float]
    micro_accuracy: float


def ovr_metrics(cm: ConfusionMatrix) -> RateReport:
    """Accuracy, sensitivity, precision, specificity, and F1 per class and macro."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    per_class: dict[int, dict[str, float]] = {}
    for c in range(cm.n_classes):
        tp, tn, fp, fn = cm.ovr(c)
        acc = _safe_div(tp + tn, cm.total, f"class {c} accuracy")
        sens = _safe_div(tp, tp + fn, f"class {c} sensitivity")
        prec = _safe_div(tp, tp + fp, f"class {c} precision")
        spec = _safe_div(tn, tn + fp, f"class {c} specificity")
        if np.isfinite(prec) and np.isfinite(sens) and (prec + sens) > 0:
            f1 = 2.0 * prec * sens / (prec + sens)
        else:
            warnings.warn(f"class {c} F1 undefined", UndefinedMetricWarning,
                          stacklevel=2)
            f1 = float("nan")
        per_class[c] = {
            "accuracy": acc, "sensitivity": sens, "precision": prec,
            "specificity": spec, "f1": f1,
        }
    macro = {
        name: _nanmean(np.array([per_class[c][name] for c in range(cm.n_classes)]),
                       f"macro {name}")
        for name in RATE_NAMES
    }
    micro = float(np.trace(cm.counts)) / cm.total
    return RateReport(per_class=per_class, macro=macro, micro_accuracy=micro)


@dataclass
class FitStats:
    """Likelihood-based fit statistics against the class-prior null model."""

    generalized_r2: float
    entropy_r2: float
    rase: float
    mad: float
    log_likelihood: float
    log_likelihood_null: float
    n: int

    @property
    def mean_log_likelihood(self) -> float:
        return self.log_likelihood / self.n


def fit_statistics(prob_matrix, y_true, class_priors_from_fit) -> FitStats:
    probs = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    priors = np.asarray(class_priors_from_fit, dtype=np.float64)
    n, k = probs.shape
    if y.shape != (n,):
        raise ValueError("y_true length must match prob_matrix rows")
    if priors.shape != (k,):
        raise ValueError("one prior per class required")

    p_model = np.clip(probs[np.arange(n), y], PROB_FLOOR, None)
    p_null = np.clip(priors[y], PROB_FLOOR, None)
    ll = float(np.log(p_model).sum())
    ll0 = float(np.log(p_null).sum())

    if ll0 == 0.0:
        warnings.warn("null log-likelihood is zero; R-square statistics undefined",
                      UndefinedMetricWarning, stacklevel=2)
        entropy_r2 = float("nan")
        generalized_r2 = float("nan")
    else:
        entropy_r2 = 1.0 - ll / ll0
        generalized_r2 = (1.0 - np.exp(2.0 * (ll0 - ll) / n)) / (
            1.0 - np.exp(2.0 * ll0 / n)
        )

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    resid = onehot - probs
    rase = float(np.sqrt(np.mean(resid ** 2)))
    mad = float(np.mean(np.abs(resid)))
    return FitStats(
        generalized_r2=float(generalized_r2),
        entropy_r2=float(entropy_r2),
        rase=rase,
        mad=mad,
        log_likelihood=ll,
        log_likelihood_null=ll0,
        n=n,
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


@dataclass
class RocReport:
    per_class: dict[int, RocCurve]
    macro_auc: float
    undefined_classes: list[int] = field(default_factory=list)


def _roc_one(scores: np.ndarray, positive: np.ndarray) -> RocCurve:
    """Threshold sweep over the distinct scores; AUC by the trapezoidal rule.

    Equal scores are collapsed into one point, so the trapezoid area equals
    the Mann-Whitney statistic with the half-credit tie convention.
    """
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order].astype(np.float64)

    distinct = np.nonzero(np.diff(s))[0]
    last = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp

    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[np.inf], s[last]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


def roc_auc(scores, y_true) -> RocReport:
    """One-vs-rest ROC curve and AUC per class; macro = mean of defined AUCs."""
    probs = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    n, k = probs.shape
    per_class: dict[int, RocCurve] = {}
    undefined: list[int] = []
    for c in range(k):
        positive = y == c
        if positive.all() or not positive.any():
            warnings.warn(
                f"AUC undefined for class {c} (needs at least one positive "
                "and one negative)", UndefinedMetricWarning, stacklevel=2,
            )
            undefined.append(c)
            per_class[c] = RocCurve(
                fpr=np.array([0.0, 1.0]), tpr=np.array([0.0, 1.0]),
                thresholds=np.array([np.inf, -np.inf]), auc=float("nan"),
            )
            continue
        per_class[c] = _roc_one(probs[:, c], positive)
    aucs = np.array([per_class[c].auc for c in range(k)])
    macro = _nanmean(aucs, "macro AUC")
    return RocReport(per_class=per_class, macro_auc=macro, undefined_classes=undefined)
