"""k-means with k-means++ seeding and restarts, plus per-label centroids."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ClusteringError, ConfigError


@dataclass
class KMeansConfig:
    k: int = 4
    max_iter: int = 100
    tol: float = 1e-4
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.restarts < 1:
            raise ConfigError("restarts must be at least 1")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list)  # inertia after every assignment step


def _sq_dists(z: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((z[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _plusplus(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [z[rng.integers(len(z))]]
    for _ in range(1, k):
        d2 = _sq_dists(z, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(z[rng.integers(len(z))])
        else:
            centers.append(z[rng.choice(len(z), p=d2 / total)])
    return np.array(centers, dtype=float)


def lloyd(z: np.ndarray, centroids: np.ndarray, max_iter: int = 100, tol: float = 1e-4) -> ClusterAssignment:
    c = centroids.copy()
    k = len(c)
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(z, c)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(z)), labels].sum()))
        new = c.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = z[members].mean(axis=0)
        # empty clusters take the point farthest from its assigned centroid
        own = ((z - new[labels]) ** 2).sum(axis=1)
        for j in range(k):
            if not (labels == j).any():
                far = int(own.argmax())
                new[j] = z[far]
                own[far] = -1.0
        shift = float(np.sqrt(((new - c) ** 2).sum(axis=1)).max())
        c = new
        if shift < tol:
            break
    d2 = _sq_dists(z, c)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(z)), labels].sum())
    history.append(inertia)
    # keep centroids consistent with the final labelling
    for j in range(k):
        members = labels == j
        if members.any():
            c[j] = z[members].mean(axis=0)
    inertia = float(((z - c[labels]) ** 2).sum())
    history.append(inertia)
    return ClusterAssignment(labels, c, inertia, history)


def kmeans(z, config: KMeansConfig) -> ClusterAssignment:
    """Best-inertia Lloyd run over ``config.restarts`` k-means++ initialisations."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2:
        raise ClusteringError("k-means expects a 2-D embedding matrix")
    if len(z) < config.k:
        raise ClusteringError(f"{len(z)} samples cannot form {config.k} clusters")
    rng = np.random.default_rng(config.seed)
    best = None
    for _ in range(config.restarts):
        result = lloyd(z, _plusplus(z, config.k, rng), config.max_iter, config.tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def compute_centroids(embeddings, labels, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-label means.  Returns ``(centroids, present)``; absent labels get zero rows."""
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    d = embeddings.shape[1] if embeddings.ndim == 2 else 0
    centroids = np.zeros((k, d))
    present = np.zeros(k, dtype=bool)
    for j in range(k):
        members = labels == j
        if members.any():
            centroids[j] = embeddings[members].mean(axis=0)
            present[j] = True
    return centroids, present
