"""Unsupervised outlier scorers, ranking metric, and 2-D projection.

All scorers share one convention: rows of the input matrix are systems,
higher score means more anomalous, and nothing here ever sees a label.
Ranking quality is measured afterwards by ``roc_auc``.

Everything is deterministic: the forest takes an explicit seed, the other
scorers have no randomness, distance tie-breaks go by row index, and the
projection fixes both its start vector and its sign convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation

_EULER = 0.5772156649
_PCA_START_SEED = 20240101

SCORER_NAMES = ("iforest", "lof", "knn")


def _check_features(x, min_rows: int = 2) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ContractViolation(f"expected a (systems, features) matrix, got ndim={x.ndim}")
    if x.shape[0] < min_rows:
        raise ContractViolation(f"need at least {min_rows} rows, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("feature matrix contains non-finite values")
    return x


def zscore_normalize(x) -> np.ndarray:
    """Column-wise z-score with population std; flat columns become zeros.

    The zero convention keeps constant features from blowing up to NaN and
    from contributing fake spread to distance-based scorers.
    """
    x = _check_features(x, min_rows=1)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    safe = np.where(std < 1e-12, 1.0, std)
    out = (x - mean) / safe
    out[:, std < 1e-12] = 0.0
    return out


def _ranked_neighbours(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise distances and per-row neighbour order (distance, then index)."""
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, np.inf)
    n = x.shape[0]
    idx = np.arange(n)
    order = np.stack([np.lexsort((idx, dist[i])) for i in range(n)])
    return dist, order


def knn_scores(x, k: int = 10) -> np.ndarray:
    """Mean distance to the k nearest other rows."""
    x = _check_features(x)
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise ContractViolation(f"k must be in [1, {n - 1}], got {k}")
    dist, order = _ranked_neighbours(x)
    nearest = np.take_along_axis(dist, order[:, :k], axis=1)
    return nearest.mean(axis=1)


def lof_scores(x, k: int = 20) -> np.ndarray:
    """Local outlier factor with index-ordered neighbourhoods.

    Local reachability densities are floored at 1e-12 so duplicate rows
    yield large finite scores instead of dividing by zero.
    """
    x = _check_features(x)
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise ContractViolation(f"k must be in [1, {n - 1}], got {k}")
    dist, order = _ranked_neighbours(x)
    nbrs = order[:, :k]
    kdist = np.take_along_axis(dist, order[:, k - 1 : k], axis=1)[:, 0]
    reach = np.maximum(kdist[nbrs], np.take_along_axis(dist, nbrs, axis=1))
    lrd = 1.0 / np.maximum(reach.mean(axis=1), 1e-12)
    return lrd[nbrs].mean(axis=1) / lrd


def _path_norm(n: int) -> float:
    """Expected unsuccessful-search path length in a binary tree of n points.

    The asymptotic harmonic form is applied uniformly, including n=2, so
    scores are reproducible from this one formula.
    """
    if n <= 1:
        return 0.0
    return 2.0 * (math.log(n - 1.0) + _EULER) - 2.0 * (n - 1.0) / n


def _grow_tree(data: np.ndarray, depth: int, cap: int, rng: np.random.Generator):
    if depth >= cap or data.shape[0] <= 1:
        return (data.shape[0],)
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    splittable = np.flatnonzero(hi > lo)
    if splittable.size == 0:
        return (data.shape[0],)
    feature = int(rng.choice(splittable))
    split = float(rng.uniform(lo[feature], hi[feature]))
    mask = data[:, feature] < split
    return (
        feature,
        split,
        _grow_tree(data[mask], depth + 1, cap, rng),
        _grow_tree(data[~mask], depth + 1, cap, rng),
    )


def _path_lengths(tree, x: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[0])
    stack = [(tree, np.arange(x.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if idx.size == 0:
            continue
        if len(node) == 1:
            out[idx] = depth + _path_norm(node[0])
        else:
            mask = x[idx, node[0]] < node[1]
            stack.append((node[2], idx[mask], depth + 1))
            stack.append((node[3], idx[~mask], depth + 1))
    return out


def isolation_forest_scores(
    x, n_trees: int = 100, subsample: int = 256, seed: int = 0
) -> np.ndarray:
    """Isolation forest anomaly scores in (0, 1).

    Each tree isolates a without-replacement subsample of min(subsample, N)
    rows with uniformly random axis splits, grown to depth ceil(log2(psi)).
    A row's score is 2**(-mean path length / path norm); external nodes
    holding m rows extend the path by the same norm at m.
    """
    x = _check_features(x)
    if n_trees < 1:
        raise ContractViolation(f"n_trees must be >= 1, got {n_trees}")
    n = x.shape[0]
    psi = min(int(subsample), n)
    if psi < 2:
        raise ContractViolation("need a subsample of at least 2 rows")
    cap = max(1, math.ceil(math.log2(psi)))
    rng = np.random.default_rng(seed)
    paths = np.zeros(n)
    for _ in range(n_trees):
        sample = x[rng.choice(n, size=psi, replace=False)]
        paths += _path_lengths(_grow_tree(sample, 0, cap, rng), x)
    return 2.0 ** (-(paths / n_trees) / _path_norm(psi))


def mean_reward_scores(rewards) -> np.ndarray:
    """Deviation of each system's mean reward from the fleet median of means.

    The median keeps the reference point on the normal population as long
    as fewer than half of the systems are contaminated, and the absolute
    deviation catches flips in either direction.
    """
    rewards = _check_features(rewards)
    means = rewards.mean(axis=1)
    return np.abs(means - np.median(means))


def score_features(name: str, x, seed: int = 0) -> np.ndarray:
    """Dispatch a feature-matrix scorer by name."""
    if name == "iforest":
        return isolation_forest_scores(x, seed=seed)
    if name == "lof":
        return lof_scores(x)
    if name == "knn":
        return knn_scores(x)
    raise ConfigError(f"unknown scorer {name!r}, expected one of {SCORER_NAMES}")


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve by the midrank formulation.

    Equals the probability that a random anomalous system outranks a random
    normal one, counting ties as half.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ContractViolation("labels and scores must be matching 1-D arrays")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractViolation("labels must be 0 (normal) or 1 (anomalous)")
    if not np.all(np.isfinite(scores)):
        raise ContractViolation("scores contain non-finite values")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("roc_auc needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size)
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class Pca2d:
    """Two-component projection: coordinates, variances, component rows."""

    coords: np.ndarray
    variances: tuple[float, float]
    components: np.ndarray


def pca_2d(x, max_iter: int = 1000, tol: float = 1e-10) -> Pca2d:
    """Top two principal components by power iteration with deflation.

    Start vector and sign convention are fixed, so identical inputs always
    produce identical projections. A zero-variance direction comes back as
    a zero eigenvalue with the start vector left in place.
    """
    x = _check_features(x)
    if x.shape[1] < 2:
        raise ContractViolation("pca_2d needs at least 2 feature columns")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    start = np.random.default_rng(_PCA_START_SEED).normal(size=x.shape[1])
    start /= np.linalg.norm(start)
    work = cov.copy()
    comps = []
    variances = []
    for _ in range(2):
        v = start.copy()
        for _ in range(max_iter):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                break
            w /= norm
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        lam = float(v @ (work @ v))
        peak = int(np.argmax(np.abs(v)))
        if v[peak] < 0:
            v = -v
        comps.append(v)
        variances.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
    components = np.stack(comps)
    return Pca2d(
        coords=centered @ components.T,
        variances=(variances[0], variances[1]),
        components=components,
    )
