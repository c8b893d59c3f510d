"""Independent reference implementations used as test oracles.

Everything here is deliberately written in the most literal style possible
(explicit loops, textbook equations) and shares no code with the package
under test. Slow is fine; these run on tiny inputs.
"""

from __future__ import annotations

import math

import numpy as np


def cell_step_oracle(params: dict, x: np.ndarray, h: np.ndarray, prefix: str = "cell") -> np.ndarray:
    """Textbook evaluation of the two-gate recurrent cell on one vector."""

    def sigmoid(v):
        return 1.0 / (1.0 + np.exp(-v))

    z = sigmoid(x @ params[f"{prefix}_Wz"] + h @ params[f"{prefix}_Uz"] + params[f"{prefix}_bz"])
    r = sigmoid(x @ params[f"{prefix}_Wr"] + h @ params[f"{prefix}_Ur"] + params[f"{prefix}_br"])
    cand = np.tanh(x @ params[f"{prefix}_Wh"] + (r * h) @ params[f"{prefix}_Uh"] + params[f"{prefix}_bh"])
    return (1.0 - z) * h + z * cand


def encode_sequence_oracle(params: dict, steps, hidden: int, prefix: str = "cell") -> np.ndarray:
    h = np.zeros(hidden)
    for x in steps:
        h = cell_step_oracle(params, np.asarray(x, dtype=np.float64), h, prefix=prefix)
    return h


def auc_concordance_oracle(scores, labels) -> float:
    """Probability a random anomalous score beats a random normal one,
    counting ties as half."""
    scores = [float(s) for s in scores]
    labels = [int(l) for l in labels]
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    if not pos or not neg:
        raise ValueError("both classes required")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def knn_mean_distance_oracle(points, k: int):
    """Mean Euclidean distance to the k nearest other rows, by loops."""
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    out = []
    for i, p in enumerate(pts):
        dists = sorted(
            float(np.sqrt(np.sum((p - q) ** 2))) for j, q in enumerate(pts) if j != i
        )
        out.append(sum(dists[:k]) / k)
    return np.asarray(out)


def lof_reference(points, k: int):
    """Classic local outlier factor, literal transcription.

    Neighbourhoods are exactly the k nearest other points with distance
    ties broken by index order, matching the package convention. Local
    reachability densities are floored at 1e-12.
    """
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    n = len(pts)
    dist = [[float(np.sqrt(np.sum((pts[i] - pts[j]) ** 2))) for j in range(n)] for i in range(n)]
    neighbours = []
    kdist = []
    for i in range(n):
        order = sorted((dist[i][j], j) for j in range(n) if j != i)
        nbrs = [j for _, j in order[:k]]
        neighbours.append(nbrs)
        kdist.append(order[k - 1][0])
    lrd = []
    for i in range(n):
        reach_sum = 0.0
        for j in neighbours[i]:
            reach_sum += max(kdist[j], dist[i][j])
        lrd.append(1.0 / max(reach_sum / k, 1e-12))
    scores = []
    for i in range(n):
        ratio_sum = 0.0
        for j in neighbours[i]:
            ratio_sum += lrd[j] / lrd[i]
        scores.append(ratio_sum / k)
    return np.asarray(scores)


def top2_eigen_variances(x) -> tuple[float, float]:
    """Top two eigenvalues of the sample covariance via dense eigensolver."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    vals = np.linalg.eigvalsh(cov)
    return float(vals[-1]), float(vals[-2])


def spectral_norm_oracle(m) -> float:
    return float(np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)[0])


def pairwise_embedding_sum_oracle(u) -> float:
    """Ordered-pair sum of Euclidean distances, by loops."""
    u = np.asarray(u, dtype=np.float64)
    total = 0.0
    for i in range(u.shape[0]):
        for j in range(u.shape[0]):
            total += float(np.sqrt(np.sum((u[i] - u[j]) ** 2)))
    return total


def centroid_deviation_sum_oracle(u) -> float:
    u = np.asarray(u, dtype=np.float64)
    c = u.mean(axis=0)
    return float(sum(math.sqrt(float(np.sum((row - c) ** 2))) for row in u))
