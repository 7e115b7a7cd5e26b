"""Divisive variable clustering over the fused components, plus the
synergistic combination with clinical features.

Clusters split on the second eigenvalue of their correlation submatrix; each
variable then migrates to the cluster component it correlates with most.  One
representative per cluster is chosen by the smallest
(1 - R^2 own) / (1 - R^2 nearest-other) ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFiniteCorrelationError
from .features import FeatureMatrix
from .fusion import FusedComponents

_OBJECTIVE_TOL = 1e-10
# Split on lambda2 within this tolerance of the threshold, so exactly
# uncorrelated variables (lambda2 == 1 up to rounding) separate into
# singletons instead of sticking in one unsplittable cluster.
_SPLIT_TOL = 1e-9


@dataclass
class ClusterNode:
    member_columns: list[str]
    lambda1: float
    lambda2: float
    first_pc_scores: np.ndarray


@dataclass
class VarClusResult:
    clusters: list[ClusterNode]
    representative: dict[int, str]
    one_minus_r2_ratio: dict[str, float]
    cluster_proportion: dict[int, float]
    total_proportion: dict[int, float]
    r2_own: dict[str, float] = field(default_factory=dict)
    r2_next: dict[str, float] = field(default_factory=dict)
    objective_history: list[float] = field(default_factory=list)
    n_variables: int = 0
    _z: np.ndarray | None = None
    _columns: list[str] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def representative_columns(self) -> list[str]:
        return [self.representative[i] for i in range(self.n_clusters)]


def _standardize_columns(values: np.ndarray, columns: list[str]) -> np.ndarray:
    means = values.mean(axis=0)
    stds = values.std(axis=0)  # population convention
    zero = np.nonzero(stds == 0.0)[0]
    if zero.size:
        raise NonFiniteCorrelationError(
            f"column {columns[int(zero[0])]!r} is constant; "
            "correlations are undefined"
        )
    return (values - means) / stds


def _cluster_eigs(z: np.ndarray, members: list[int]):
    """(lambda1, lambda2, pc1_scores, pc2_scores) of a member set."""
    n = z.shape[0]
    sub = z[:, members]
    if len(members) == 1:
        # A 1x1 correlation matrix is exactly [1].
        return 1.0, 0.0, sub[:, 0].copy(), None
    corr = sub.T @ sub / n
    np.fill_diagonal(corr, 1.0)
    evals, evecs = np.linalg.eigh(corr)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    assert abs(evals.sum() - len(members)) < 1e-8 * max(1, len(members)), \
        "correlation eigenvalues must sum to the trace"
    lam1 = float(max(evals[0], 0.0))
    lam2 = float(max(evals[1], 0.0))
    return lam1, lam2, sub @ evecs[:, 0], sub @ evecs[:, 1]


def _sq_corr(z: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Squared correlation of every standardized column with a score vector."""
    n = z.shape[0]
    var_s = float(scores @ scores) / n
    cov = z.T @ scores / n
    return cov ** 2 / var_s


def varclus(fused: FusedComponents, split_eigen_threshold: float = 1.0,
            max_reassign_iters: int = 20) -> VarClusResult:
    """Cluster the fused components by correlation structure.

    Splits while any cluster's second eigenvalue exceeds the threshold; after
    each split every variable is reassigned to the cluster whose first
    principal component it has the highest squared correlation with, until
    membership is stable.  The summed first eigenvalue never decreases across
    reassignment iterations.
    """
    matrix = fused.matrix
    if matrix.n_rows < 2:
        raise ValueError("variable clustering needs at least 2 samples")
    columns = list(matrix.columns)
    p = len(columns)
    z = _standardize_columns(matrix.values, columns)

    clusters: list[list[int]] = [list(range(p))]
    eigs = [_cluster_eigs(z, clusters[0])]
    objective_history = [eigs[0][0]]

    while len(clusters) < p:
        # Only multi-member clusters are splittable.
        lam2s = [e[1] if len(mem) > 1 else -np.inf
                 for e, mem in zip(eigs, clusters)]
        worst = int(np.argmax(lam2s))
        if lam2s[worst] < split_eigen_threshold - _SPLIT_TOL:
            break

        members = clusters[worst]
        _, _, s1, s2 = eigs[worst]
        c1 = _sq_corr(z[:, members], s1)
        c2 = _sq_corr(z[:, members], s2)
        side2 = c2 > c1
        if side2.all():
            side2[int(np.argmax(c1 - c2))] = False
        elif not side2.any():
            side2[int(np.argmax(c2 - c1))] = True
        group1 = [m for m, flag in zip(members, side2) if not flag]
        group2 = [m for m, flag in zip(members, side2) if flag]
        clusters[worst] = group1
        clusters.append(group2)
        eigs[worst] = _cluster_eigs(z, group1)
        eigs.append(_cluster_eigs(z, group2))

        # Nearest-component reassignment until stable.
        prev_objective = sum(e[0] for e in eigs)
        objective_history.append(prev_objective)
        for _ in range(max_reassign_iters):
            score_mat = np.column_stack([e[2] for e in eigs])
            corr_sq = np.column_stack(
                [_sq_corr(z, score_mat[:, c]) for c in range(len(clusters))]
            )
            assignment = np.empty(p, dtype=np.intp)
            for c, mem in enumerate(clusters):
                assignment[mem] = c
            own = corr_sq[np.arange(p), assignment]
            best = np.argmax(corr_sq, axis=1)
            moves = corr_sq[np.arange(p), best] > own
            if not moves.any():
                break
            new_assignment = np.where(moves, best, assignment)
            # Never empty a cluster: its best-anchored member stays put.
            for c in range(len(clusters)):
                if not np.any(new_assignment == c):
                    candidates = np.nonzero(assignment == c)[0]
                    keep = candidates[int(np.argmax(own[candidates]))]
                    new_assignment[keep] = c
            if np.array_equal(new_assignment, assignment):
                break
            clusters = [np.nonzero(new_assignment == c)[0].tolist()
                        for c in range(len(clusters))]
            eigs = [_cluster_eigs(z, mem) for mem in clusters]
            objective = sum(e[0] for e in eigs)
            if objective < prev_objective - _OBJECTIVE_TOL:
                raise AssertionError(
                    "reassignment decreased the summed first eigenvalue "
                    f"({prev_objective} -> {objective})"
                )
            objective_history.append(objective)
            prev_objective = objective

    nodes = [
        ClusterNode(
            member_columns=[columns[m] for m in mem],
            lambda1=e[0],
            lambda2=e[1],
            first_pc_scores=e[2],
        )
        for mem, e in zip(clusters, eigs)
    ]
    result = VarClusResult(
        clusters=nodes,
        representative={},
        one_minus_r2_ratio={},
        cluster_proportion={
            i: node.lambda1 / len(node.member_columns)
            for i, node in enumerate(nodes)
        },
        total_proportion={i: node.lambda1 / p for i, node in enumerate(nodes)},
        objective_history=objective_history,
        n_variables=p,
        _z=z,
        _columns=columns,
    )
    return pick_representatives(result)


def pick_representatives(result: VarClusResult) -> VarClusResult:
    """Fill in the per-cluster representative via the 1-R^2 ratio rule."""
    z = result._z
    columns = result._columns
    if z is None:
        raise ValueError("result is missing its fitted data")
    col_index = {name: i for i, name in enumerate(columns)}
    pc_scores = [node.first_pc_scores for node in result.clusters]

    r2_own: dict[str, float] = {}
    r2_next: dict[str, float] = {}
    ratios: dict[str, float] = {}
    representative: dict[int, str] = {}

    for ci, node in enumerate(result.clusters):
        rows = []
        for name in node.member_columns:
            zj = z[:, col_index[name]]
            if len(node.member_columns) == 1:
                own = 1.0  # the member is its own first component
            else:
                own = float(_sq_corr(zj[:, None], pc_scores[ci])[0])
            others = [
                float(_sq_corr(zj[:, None], pc_scores[cj])[0])
                for cj in range(len(result.clusters)) if cj != ci
            ]
            nxt = max(others) if others else 0.0
            one_minus_own = max(0.0, 1.0 - own)
            one_minus_next = max(0.0, 1.0 - nxt)
            if one_minus_own == 0.0:
                ratio = 0.0
            elif one_minus_next == 0.0:
                ratio = float("inf")
            else:
                ratio = one_minus_own / one_minus_next
            r2_own[name] = own
            r2_next[name] = nxt
            ratios[name] = ratio
            rows.append((ratio, -own, name))
        rows.sort()
        representative[ci] = rows[0][2]

    return replace(
        result,
        representative=representative,
        one_minus_r2_ratio=ratios,
        r2_own=r2_own,
        r2_next=r2_next,
    )


@dataclass
class SynergisticFeatureSet:
    matrix: FeatureMatrix


def combine(representatives: FeatureMatrix, clinical) -> SynergisticFeatureSet:
    """Deep representative columns first, clinical columns second.

    ``clinical`` is an encoded clinical table or its feature matrix.  Rows
    must align by patient id; a clinical block with zero columns passes
    through (images-only ablation).
    """
    matrix = getattr(clinical, "feature_matrix", clinical)
    if matrix.n_cols == 0:
        return SynergisticFeatureSet(matrix=representatives)
    return SynergisticFeatureSet(matrix=representatives.hstack(matrix))
