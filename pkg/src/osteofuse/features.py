"""Named, provenance-tagged feature matrices passed between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RowAlignmentError, RowCountMismatchError

PROVENANCE_CLINICAL = "clinical"
PROVENANCE_DEEP = "deep"
PROVENANCE_DEEP_FUSED = "deep-fused"


@dataclass
class FeatureMatrix:
    """Rows = samples, columns = named numeric features.

    ``provenance`` tags each column with where it came from (clinical, deep,
    deep-fused).  ``groups`` maps each column to a logical feature name: the
    one-hot columns of a categorical all share that categorical's name so
    importance scores can be re-aggregated later.  Columns that are their own
    group carry their own name.
    """

    values: np.ndarray
    columns: list[str]
    provenance: list[str]
    row_ids: list[str]
    groups: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got shape {self.values.shape}")
        n, p = self.values.shape
        if len(self.columns) != p:
            raise ValueError(f"{len(self.columns)} column names for {p} columns")
        if len(self.provenance) != p:
            raise ValueError(f"{len(self.provenance)} provenance tags for {p} columns")
        if len(self.row_ids) != n:
            raise ValueError(f"{len(self.row_ids)} row ids for {n} rows")
        if not self.groups:
            self.groups = list(self.columns)
        elif len(self.groups) != p:
            raise ValueError(f"{len(self.groups)} group names for {p} columns")
        if len(set(self.columns)) != p:
            dupes = sorted({c for c in self.columns if self.columns.count(c) > 1})
            raise ValueError(f"duplicate column names: {dupes}")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"no column named {name!r}") from None

    def select_columns(self, names: list[str]) -> "FeatureMatrix":
        idx = [self.column_index(n) for n in names]
        return FeatureMatrix(
            values=self.values[:, idx],
            columns=[self.columns[i] for i in idx],
            provenance=[self.provenance[i] for i in idx],
            row_ids=list(self.row_ids),
            groups=[self.groups[i] for i in idx],
        )

    def subset_rows(self, indices) -> "FeatureMatrix":
        indices = np.asarray(indices, dtype=np.intp)
        return FeatureMatrix(
            values=self.values[indices],
            columns=list(self.columns),
            provenance=list(self.provenance),
            row_ids=[self.row_ids[i] for i in indices],
            groups=list(self.groups),
        )

    def hstack(self, other: "FeatureMatrix", check_ids: bool = True) -> "FeatureMatrix":
        if self.n_rows != other.n_rows:
            raise RowCountMismatchError(
                f"cannot concatenate {self.n_rows} rows with {other.n_rows} rows"
            )
        if check_ids and self.row_ids != other.row_ids:
            bad = next(
                (i, a, b)
                for i, (a, b) in enumerate(zip(self.row_ids, other.row_ids))
                if a != b
            )
            raise RowAlignmentError(
                f"row {bad[0]}: patient id {bad[1]!r} vs {bad[2]!r}"
            )
        return FeatureMatrix(
            values=np.hstack([self.values, other.values]),
            columns=self.columns + other.columns,
            provenance=self.provenance + other.provenance,
            row_ids=list(self.row_ids),
            groups=self.groups + other.groups,
        )

    def assert_finite(self, what: str = "feature matrix"):
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise ValueError(
                f"{what} has a non-finite value at row {bad[0]} "
                f"({self.row_ids[bad[0]]!r}), column {self.columns[bad[1]]!r}"
            )
