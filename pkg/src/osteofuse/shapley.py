"""Monte-Carlo Shapley attribution by permutation sampling.

Features switch one at a time from a background row's value to the explained
row's value along random orderings; a feature's value is its mean marginal
effect on the model output.  Background rows are cycled deterministically, so
the per-permutation telescoping sum keeps the efficiency identity tight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError
from .fcn import FCNModel, forward, predict


def _seed_for(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.PCG64(ss))


def shapley_sample(predict_fn, x, background, n_permutations: int,
                   seed: int = 0) -> np.ndarray:
    """Per-feature, per-output Shapley estimates for one row.

    ``predict_fn`` maps an (m, d) batch to (m, K) outputs.  Returns (d, K).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[1] != x.size:
        raise DimensionMismatchError(
            f"background rows have {background.shape[1]} features, "
            f"explained row has {x.size}"
        )
    if n_permutations < 1:
        raise ValueError("n_permutations must be at least 1")

    d = x.size
    n_bg = background.shape[0]
    t = n_permutations
    rng = _seed_for(seed, 0)
    perms = np.stack([rng.permutation(d) for _ in range(t)])

    states = np.empty((t, d + 1, d), dtype=np.float64)
    states[:, 0, :] = background[np.arange(t) % n_bg]
    rows = np.arange(t)
    for j in range(d):
        states[:, j + 1, :] = states[:, j, :]
        states[rows, j + 1, perms[:, j]] = x[perms[:, j]]

    outs = np.asarray(predict_fn(states.reshape(t * (d + 1), d)))
    k = outs.shape[1]
    outs = outs.reshape(t, d + 1, k)
    deltas = outs[:, 1:, :] - outs[:, :-1, :]

    phi = np.zeros((d, k), dtype=np.float64)
    np.add.at(phi, perms.reshape(-1), deltas.reshape(t * d, k))
    return phi / t


def model_value_fn(model: FCNModel):
    return lambda batch: forward(model, batch)


def stratified_background(x: np.ndarray, labels: np.ndarray, max_rows: int = 100,
                          seed: int = 0) -> np.ndarray:
    """Up to ``max_rows`` rows sampled stratified by class, seeded."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n <= max_rows:
        return x.copy()
    rng = _seed_for(seed, 1)
    chosen: list[np.ndarray] = []
    classes = np.unique(labels)
    shares = [(labels == c).sum() * max_rows / n for c in classes]
    counts = [int(np.floor(s)) for s in shares]
    remainders = np.argsort([c - s for c, s in zip(counts, shares)])
    for idx in remainders:
        if sum(counts) >= max_rows:
            break
        counts[idx] += 1
    for c, take in zip(classes, counts):
        members = np.nonzero(labels == c)[0]
        picked = rng.permutation(members)[:take]
        chosen.append(np.sort(picked))
    rows = np.concatenate(chosen)
    return x[np.sort(rows)]


@dataclass
class ImportanceReport:
    per_feature: dict[str, float]
    ranking: list[str]
    n_permutations: int
    background: str
    additivity_gaps: list[float] = field(default_factory=list)


def importance(model: FCNModel, x_explain, background,
               n_permutations: int = 2000, seed: int = 0,
               feature_names: list[str] | None = None,
               feature_groups: list[str] | None = None) -> ImportanceReport:
    """Mean |Shapley value| per feature over the explained rows.

    Values are computed for each row's predicted class.  One-hot columns that
    share a group collapse into a single named importance.
    """
    x_explain = np.atleast_2d(np.asarray(x_explain, dtype=np.float64))
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if x_explain.shape[0] == 0:
        raise ValueError("nothing to explain")
    names = feature_names or list(model.input_columns)
    groups = feature_groups or list(names)
    if len(names) != x_explain.shape[1] or len(groups) != len(names):
        raise DimensionMismatchError("feature names/groups do not match width")

    fn = model_value_fn(model)
    pred_classes, _ = predict(model, x_explain)
    bg_out = fn(background)

    group_names = list(dict.fromkeys(groups))
    group_idx = {g: [j for j, gj in enumerate(groups) if gj == g]
                 for g in group_names}

    sums = {g: 0.0 for g in group_names}
    gaps: list[float] = []
    for i, row in enumerate(x_explain):
        c = int(pred_classes[i])
        phi = shapley_sample(fn, row, background, n_permutations,
                             seed=int(_seed_for(seed, 2 + i).integers(2 ** 31)))
        v = phi[:, c]
        fx = fn(row[None, :])[0, c]
        gaps.append(abs(float(v.sum()) - (float(fx) - float(bg_out[:, c].mean()))))
        absv = np.abs(v)
        for g in group_names:
            sums[g] += float(absv[group_idx[g]].sum())

    n = x_explain.shape[0]
    per_feature = {g: sums[g] / n for g in group_names}
    ranking = sorted(per_feature, key=lambda g: (-per_feature[g], g))
    return ImportanceReport(
        per_feature=per_feature,
        ranking=ranking,
        n_permutations=n_permutations,
        background=f"{background.shape[0]} rows, class-stratified",
        additivity_gaps=gaps,
    )
