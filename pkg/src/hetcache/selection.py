"""Choosing which context tokens join a partial-compute forward pass.

Context tokens are clustered in feature space, each token is scored by the
mean attention it exchanged with the generative tokens on the last full step,
and the best-scoring fraction of every cluster is kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._ratio import ceil_ratio
from .errors import InvalidInputError
from .toydit import AttentionCapture

__all__ = [
    "ClusterResult",
    "kmeans",
    "importance",
    "select_representatives",
    "ContextSelector",
]


@dataclass(frozen=True)
class ClusterResult:
    assignments: np.ndarray  # (n,) cluster id per point
    centroids: np.ndarray  # (K, d)
    iterations_used: int
    inertia: float
    converged: bool

    @property
    def k(self) -> int:
        return len(self.centroids)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _farthest_point_seeds(points: np.ndarray, k: int, start: int) -> np.ndarray:
    chosen = [start]
    best = _sq_dists(points, points[[start]])[:, 0]
    for _ in range(1, k):
        # argmax returns the lowest index among ties
        nxt = int(np.argmax(best))
        chosen.append(nxt)
        best = np.minimum(best, _sq_dists(points, points[[nxt]])[:, 0])
    return np.asarray(chosen)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 10) -> ClusterResult:
    """Lloyd's K-Means with farthest-point seeding from index ``seed % n``.

    Stops when an assignment repeats (then every centroid is the mean of its
    members and every point sits at its nearest centroid) or after
    ``max_iter`` centroid updates. With fewer points than clusters the surplus
    clusters stay empty and never receive points.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise InvalidInputError("kmeans needs a non-empty (n, d) point matrix")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    n = len(points)
    live = min(k, n)
    seeds = _farthest_point_seeds(points, live, seed % n)
    centroids = np.zeros((k, points.shape[1]))
    centroids[:live] = points[seeds]

    def assign(c):
        return np.argmin(_sq_dists(points, c[:live]), axis=1)

    labels = assign(centroids)
    converged = False
    iters = 0
    while iters < max_iter:
        new = centroids.copy()
        for j in range(live):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        centroids = new
        iters += 1
        relabel = assign(centroids)
        if np.array_equal(relabel, labels):
            converged = True
            break
        labels = relabel
    if not converged:
        labels = assign(centroids)

    resid = points - centroids[labels]
    inertia = float(np.einsum("nd,nd->", resid, resid))
    return ClusterResult(labels.astype(np.int64), centroids, iters, inertia, converged)


def importance(attn) -> np.ndarray:
    """Mean attention of each context row over the generative columns."""
    matrix = attn.matrix if isinstance(attn, AttentionCapture) else np.asarray(attn, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise InvalidInputError("attention matrix is empty")
    if matrix.shape[1] == 0:
        raise InvalidInputError("no generative tokens to score against")
    return matrix.mean(axis=1)


def select_representatives(
    clusters: ClusterResult, scores, r_ctx: float, context_indices
) -> np.ndarray:
    """Keep ``max(1, ceil(r_ctx * |S_k|))`` top-scoring tokens of each cluster.

    Ties go to the lower global token index. Returns sorted global indices.
    """
    scores = np.asarray(scores, dtype=np.float64)
    context_indices = np.asarray(context_indices, dtype=np.int64)
    if not 0 < r_ctx <= 1:
        raise InvalidInputError("r_ctx must be in (0, 1]")
    if not (len(scores) == len(context_indices) == len(clusters.assignments)):
        raise InvalidInputError(
            f"misaligned inputs: {len(scores)} scores, {len(context_indices)} indices, "
            f"{len(clusters.assignments)} assignments"
        )
    keep = []
    for j in range(clusters.k):
        members = np.flatnonzero(clusters.assignments == j)
        if members.size == 0:
            continue
        n_keep = max(1, ceil_ratio(r_ctx, members.size))
        order = np.lexsort((context_indices[members], -scores[members]))
        keep.append(context_indices[members[order[:n_keep]]])
    if not keep:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(keep))


@dataclass(frozen=True)
class ContextSelector:
    """Selection policy used by partial-compute steps.

    ``use_clusters=False`` treats all context as one cluster;
    ``use_correlation=False`` replaces attention scores with seeded uniform
    noise. Both off gives plain uniform random sampling of context tokens.
    """

    r_ctx: float = 0.7
    k_clusters: int = 16
    seed: int = 0
    max_iter: int = 10
    use_clusters: bool = True
    use_correlation: bool = True

    def __post_init__(self):
        if not 0 < self.r_ctx <= 1:
            raise InvalidInputError("r_ctx must be in (0, 1]")
        if self.k_clusters < 1:
            raise InvalidInputError("k_clusters must be >= 1")

    def __call__(self, features, attn: AttentionCapture | None, context_indices, salt: int = 0) -> np.ndarray:
        context_indices = np.asarray(context_indices, dtype=np.int64)
        if context_indices.size == 0:
            return context_indices
        if self.r_ctx == 1:
            return context_indices.copy()
        if attn is not None and attn.matrix.shape[1] == 0:
            # nothing to be relevant to; keep all context
            return context_indices.copy()

        k = self.k_clusters if self.use_clusters else 1
        clusters = kmeans(features, k, seed=self.seed, max_iter=self.max_iter)
        if self.use_correlation:
            if attn is None:
                raise InvalidInputError("correlation-guided selection needs cached attention")
            if not np.array_equal(attn.context, context_indices):
                raise InvalidInputError("cached attention was captured for a different partition")
            scores = importance(attn)
        else:
            rng = np.random.default_rng([self.seed, salt])
            scores = rng.random(len(context_indices))
        return select_representatives(clusters, scores, self.r_ctx, context_indices)
