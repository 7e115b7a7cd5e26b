"""Clinical CSV ingestion, encoding, and standardization.

Continuous columns are median-imputed and z-scored with statistics computed on
the fitting rows only (population standard deviation, matching the PCA
covariance convention).  Binary categoricals become one 0/1 column; wider
categoricals one-hot.  Labels encode normal -> 0, osteopenia -> 1,
osteoporosis -> 2.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConstantColumnWarning,
    DuplicateIdError,
    MissingColumnError,
    OmittedColumnWarning,
    UnknownLabelError,
    UnseenLevelWarning,
)
from .features import PROVENANCE_CLINICAL, FeatureMatrix

CLASS_NAMES = ("normal", "osteopenia", "osteoporosis")

MISSING_LEVEL = "missing"
_MISSING_TOKENS = {"", "na", "nan", "none", "null"}

DEFAULT_CONTINUOUS = ["age", "height", "bmi"]
DEFAULT_CATEGORICAL = [
    "gender", "medical_history", "fracture_history", "dialysis",
    "joint_pain", "alcohol_consumption", "site",
]
DEFAULT_EXCLUDED = [
    "obesity", "smoking", "daily_eating_habits", "diabetes",
    "seizure_disorder", "family_history_osteoporosis", "hypothyroidism",
    "number_of_pregnancies", "menopause_age",
]


def encode_label(label: str) -> int:
    return CLASS_NAMES.index(label)


def decode_label(index: int) -> str:
    return CLASS_NAMES[index]


def _is_missing(cell: str | None) -> bool:
    return cell is None or cell.strip().lower() in _MISSING_TOKENS


@dataclass
class RawClinicalRecord:
    patient_id: str
    column_values: dict[str, str]
    label: str

    def __post_init__(self):
        if self.label not in CLASS_NAMES:
            raise UnknownLabelError(
                f"label {self.label!r} is not one of {CLASS_NAMES}"
            )


@dataclass
class ClinicalSchema:
    retained_continuous: list[str] = field(
        default_factory=lambda: list(DEFAULT_CONTINUOUS))
    retained_categorical: list[str] = field(
        default_factory=lambda: list(DEFAULT_CATEGORICAL))
    excluded: list[str] = field(default_factory=lambda: list(DEFAULT_EXCLUDED))
    label_column: str = "label"
    id_column: str = "patient_id"
    weight_column: str = "weight"
    bmi_column: str = "bmi"

    def __post_init__(self):
        retained = set(self.retained_continuous) | set(self.retained_categorical)
        overlap = retained & set(self.excluded)
        if overlap:
            raise ValueError(f"columns both retained and excluded: {sorted(overlap)}")

    @property
    def retained(self) -> list[str]:
        return list(self.retained_continuous) + list(self.retained_categorical)


@dataclass
class LoadResult:
    records: list[RawClinicalRecord]
    class_counts: dict[str, int]
    schema: ClinicalSchema  # effective schema (e.g. after BMI resolution)
    n_rows: int


def load_clinical(path, schema: ClinicalSchema | None = None) -> LoadResult:
    """Read the screening CSV, dropping excluded columns and validating labels."""
    schema = schema or ClinicalSchema()
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MissingColumnError(f"{path}: no header row")
        header = set(reader.fieldnames)
        rows = list(reader)

    for col in (schema.id_column, schema.label_column):
        if col not in header:
            raise MissingColumnError(f"required column {col!r} missing from header")

    effective = schema
    compute_bmi = False
    bmi = schema.bmi_column
    if bmi in schema.retained_continuous and bmi not in header:
        height_ok = "height" in schema.retained_continuous and "height" in header
        if schema.weight_column in header and height_ok:
            compute_bmi = True
        else:
            warnings.warn(
                f"column {bmi!r} absent and cannot be derived "
                f"(needs {schema.weight_column!r} and 'height'); omitted",
                OmittedColumnWarning, stacklevel=2,
            )
            effective = replace(
                schema,
                retained_continuous=[c for c in schema.retained_continuous
                                     if c != bmi],
            )

    missing_cols = [c for c in effective.retained if c not in header
                    and not (c == bmi and compute_bmi)]
    if missing_cols:
        raise MissingColumnError(
            f"retained column(s) missing from header: {missing_cols}"
        )

    records: list[RawClinicalRecord] = []
    counts = {name: 0 for name in CLASS_NAMES}
    seen_ids: set[str] = set()
    for line_no, row in enumerate(rows, start=2):
        raw_label = (row.get(schema.label_column) or "").strip().lower()
        if raw_label not in CLASS_NAMES:
            raise UnknownLabelError(
                f"row {line_no}: label {row.get(schema.label_column)!r} "
                f"is not one of {CLASS_NAMES}"
            )
        patient_id = (row.get(schema.id_column) or "").strip()
        if patient_id in seen_ids:
            raise DuplicateIdError(f"row {line_no}: duplicate patient id "
                                   f"{patient_id!r}")
        seen_ids.add(patient_id)

        values = {c: (row.get(c) or "").strip() for c in effective.retained
                  if c != bmi or not compute_bmi}
        if compute_bmi:
            values[bmi] = _derived_bmi(row.get(schema.weight_column),
                                       row.get("height"))
        counts[raw_label] += 1
        records.append(RawClinicalRecord(
            patient_id=patient_id, column_values=values, label=raw_label,
        ))
    return LoadResult(records=records, class_counts=counts,
                      schema=effective, n_rows=len(records))


def _derived_bmi(weight_cell, height_cell) -> str:
    if _is_missing(weight_cell) or _is_missing(height_cell):
        return ""
    try:
        weight = float(weight_cell)
        height = float(height_cell)
    except ValueError:
        return ""
    if height <= 0:
        return ""
    return repr(weight / (height * height))


@dataclass
class ContinuousStat:
    median: float | None
    mean: float
    std: float


@dataclass
class EncoderState:
    schema: ClinicalSchema
    continuous_stats: dict[str, ContinuousStat]
    categorical_levels: dict[str, list[str]]

    def inverse_standardize(self, column: str, standardized) -> np.ndarray:
        stat = self.continuous_stats[column]
        return np.asarray(standardized, dtype=np.float64) * stat.std + stat.mean


def _parse_continuous(cell: str, column: str, where: str) -> float | None:
    if _is_missing(cell):
        return None
    try:
        return float(cell)
    except ValueError:
        warnings.warn(
            f"{where}: unparseable value {cell!r} in column {column!r} "
            "treated as missing",
            OmittedColumnWarning, stacklevel=3,
        )
        return None


def fit_encoder(records: list[RawClinicalRecord], schema: ClinicalSchema,
                fit_rows) -> EncoderState:
    """Standardization and level maps from the fitting rows only."""
    fit_rows = list(fit_rows)
    if not fit_rows:
        raise ValueError("fit_rows must be non-empty")
    fit_records = [records[i] for i in fit_rows]

    continuous_stats: dict[str, ContinuousStat] = {}
    for col in schema.retained_continuous:
        parsed = [
            _parse_continuous(r.column_values.get(col, ""), col,
                              f"patient {r.patient_id}")
            for r in fit_records
        ]
        present = [v for v in parsed if v is not None]
        median = float(np.median(present)) if present else None
        imputed = np.array(
            [v if v is not None else median for v in parsed], dtype=np.float64,
        ) if median is not None else np.zeros(len(parsed))
        mean = float(imputed.mean())
        std = float(imputed.std())  # population convention
        if std == 0.0:
            warnings.warn(
                f"continuous column {col!r} is constant on the fit rows; "
                "it will encode as all zeros",
                ConstantColumnWarning, stacklevel=2,
            )
        continuous_stats[col] = ContinuousStat(median=median, mean=mean, std=std)

    categorical_levels: dict[str, list[str]] = {}
    for col in schema.retained_categorical:
        cells = [r.column_values.get(col, "") for r in fit_records]
        levels = sorted({MISSING_LEVEL if _is_missing(c) else c.strip()
                         for c in cells})
        if len(levels) == 1:
            warnings.warn(
                f"categorical column {col!r} has a single level "
                f"{levels[0]!r} on the fit rows; it will encode as all zeros",
                ConstantColumnWarning, stacklevel=2,
            )
        categorical_levels[col] = levels
    return EncoderState(schema=schema, continuous_stats=continuous_stats,
                        categorical_levels=categorical_levels)


@dataclass
class ClinicalTable:
    feature_matrix: FeatureMatrix
    labels: np.ndarray
    standardization_params: dict[str, tuple[float, float]]
    rejected: list[tuple[str, str]] = field(default_factory=list)


def encoded_column_layout(encoder: EncoderState) -> tuple[list[str], list[str]]:
    """(column names, group names) the encoder will produce, in order."""
    columns: list[str] = []
    groups: list[str] = []
    for col in encoder.schema.retained_continuous:
        columns.append(col)
        groups.append(col)
    for col in encoder.schema.retained_categorical:
        levels = encoder.categorical_levels[col]
        if len(levels) <= 2:
            columns.append(col)
            groups.append(col)
        else:
            for level in levels:
                columns.append(f"{col}={level}")
                groups.append(col)
    return columns, groups


def encode(records: list[RawClinicalRecord], encoder: EncoderState) -> ClinicalTable:
    """Numeric, provenance-tagged matrix plus encoded labels.

    Rows whose missing continuous values cannot be imputed are rejected and
    listed in the result instead of appearing in the matrix.
    """
    schema = encoder.schema
    columns, groups = encoded_column_layout(encoder)

    kept_rows: list[np.ndarray] = []
    kept_ids: list[str] = []
    kept_labels: list[int] = []
    rejected: list[tuple[str, str]] = []

    for rec in records:
        row: list[float] = []
        reject_reason = None
        for col in schema.retained_continuous:
            stat = encoder.continuous_stats[col]
            value = _parse_continuous(rec.column_values.get(col, ""), col,
                                      f"patient {rec.patient_id}")
            if value is None:
                if stat.median is None:
                    reject_reason = (f"column {col!r} missing and no fit-split "
                                     "median available")
                    break
                value = stat.median
            row.append((value - stat.mean) / stat.std if stat.std > 0 else 0.0)
        if reject_reason is not None:
            rejected.append((rec.patient_id, reject_reason))
            continue

        for col in schema.retained_categorical:
            levels = encoder.categorical_levels[col]
            cell = rec.column_values.get(col, "")
            level = MISSING_LEVEL if _is_missing(cell) else cell.strip()
            if level not in levels:
                warnings.warn(
                    f"patient {rec.patient_id}: unseen level {level!r} in "
                    f"column {col!r} encoded as all zeros",
                    UnseenLevelWarning, stacklevel=2,
                )
            if len(levels) <= 2:
                row.append(1.0 if (len(levels) == 2 and level == levels[1])
                           else 0.0)
            else:
                row.extend(1.0 if level == lv else 0.0 for lv in levels)

        kept_rows.append(np.array(row, dtype=np.float64))
        kept_ids.append(rec.patient_id)
        kept_labels.append(encode_label(rec.label))

    values = (np.vstack(kept_rows) if kept_rows
              else np.zeros((0, len(columns)), dtype=np.float64))
    matrix = FeatureMatrix(
        values=values,
        columns=columns,
        provenance=[PROVENANCE_CLINICAL] * len(columns),
        row_ids=kept_ids,
        groups=groups,
    )
    params = {
        col: (stat.mean, stat.std)
        for col, stat in encoder.continuous_stats.items()
    }
    return ClinicalTable(
        feature_matrix=matrix,
        labels=np.array(kept_labels, dtype=np.int64),
        standardization_params=params,
        rejected=rejected,
    )
