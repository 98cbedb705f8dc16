"""K-means codebook used as the discrete speech-unit inventory."""

from pathlib import Path
from typing import List, Sequence

import numpy as np
import structlog
from scipy.spatial.distance import cdist

from .errors import ContractError, DimensionError
from .formats import read_codebook, write_codebook

logger = structlog.get_logger()


class Codebook:
    def __init__(self, centroids: np.ndarray, inertia_history: Sequence[float] = ()):
        centroids = np.array(centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[0] == 0:
            raise ContractError(f"codebook needs a non-empty K x dim matrix, got {centroids.shape}")
        if not np.all(np.isfinite(centroids)):
            raise ContractError("codebook centroids must be finite")
        if np.unique(centroids, axis=0).shape[0] != centroids.shape[0]:
            raise ContractError("codebook has duplicate centroids")
        centroids.setflags(write=False)
        self.centroids = centroids
        self.inertia_history: List[float] = list(inertia_history)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def encode(self, features: np.ndarray) -> np.ndarray:
        return encode(self, features)

    def decode(self, ids: Sequence[int]) -> np.ndarray:
        return decode(self, ids)

    def save(self, path: Path) -> None:
        write_codebook(path, self.centroids)

    @classmethod
    def load(cls, path: Path) -> "Codebook":
        return cls(read_codebook(path))


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(points.shape[0]))]
    nearest = cdist(points, points[chosen], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = nearest.sum()
        if total <= 0.0:
            raise ContractError(f"only {len(chosen)} distinct frames, cannot seed {k} centroids")
        idx = int(rng.choice(points.shape[0], p=nearest / total))
        chosen.append(idx)
        nearest = np.minimum(nearest, cdist(points, points[idx:idx + 1], "sqeuclidean")[:, 0])
    return points[chosen].copy()


def kmeans_fit(features: np.ndarray, k: int, iterations: int = 25, seed: int = 0) -> Codebook:
    """
    Lloyd's algorithm from k-means++ seeds.

    The inertia recorded after each assignment step never increases; a cluster
    that loses all of its frames is re-seeded at the frame farthest from its
    current centroid.
    """
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError(f"features must be a frames x dim matrix, got {points.shape}")
    if k < 1:
        raise ContractError("K must be at least 1")
    if k > points.shape[0]:
        raise ContractError(f"K={k} exceeds the {points.shape[0]} available frames")

    rng = np.random.default_rng(seed)
    centroids = _plus_plus_init(points, k, rng)
    history: List[float] = []
    labels = None
    for iteration in range(max(iterations, 1)):
        dists = cdist(points, centroids, "sqeuclidean")
        new_labels = dists.argmin(axis=1)
        own = dists[np.arange(points.shape[0]), new_labels]
        history.append(float(own.sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels

        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]

        taken = set()
        order = np.argsort(-own, kind="stable")
        for cluster in np.flatnonzero(~filled):
            # a sole member already sits on its own centroid
            idx = next(int(i) for i in order if int(i) not in taken and counts[labels[i]] > 1)
            taken.add(idx)
            centroids[cluster] = points[idx]
            logger.debug("kmeans_reseed", iteration=iteration, cluster=int(cluster), frame=idx)

    logger.info("kmeans_fit", k=k, frames=points.shape[0], iterations=len(history), inertia=history[-1])
    return Codebook(centroids, history)


def encode(codebook: Codebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid ids (Euclidean; ties go to the lowest id)."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != codebook.dim:
        raise DimensionError("encode", features.shape, codebook.centroids.shape)
    return cdist(features, codebook.centroids, "sqeuclidean").argmin(axis=1)


def decode(codebook: Codebook, ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.size):
        raise ContractError(f"unit id out of range [0, {codebook.size})")
    return codebook.centroids[ids]
