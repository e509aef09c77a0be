"""k-means++ seeding and Lloyd iterations."""

from __future__ import annotations

import numpy as np

from .errors import TooFewPoints


def _sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x||^2 - 2 x.c + ||c||^2 loses precision for tight clusters; go direct.
    diff = X[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``k`` initial centers by D^2 sampling. Returns a (k, d) array."""
    n = X.shape[0]
    if n < k:
        raise TooFewPoints(n, k)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already sits on a center
            centers[j] = X[rng.integers(n)]
        else:
            u = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), u, side="right"))
            centers[j] = X[min(idx, n - 1)]
        closest = np.minimum(closest, _sq_dists(X, centers[j : j + 1])[:, 0])
    return centers


def lloyd(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 300,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Run Lloyd's algorithm from k-means++ seeds.

    Returns ``(centers, labels)``. Empty clusters keep their previous center.
    """
    centers = kmeans_plusplus(X, k, rng)
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(_sq_dists(X, centers), axis=1)
        new = centers.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.max(np.abs(new - centers)))
        centers = new
        if shift <= tol:
            break
    labels = np.argmin(_sq_dists(X, centers), axis=1)
    return centers, labels


def nearest_distance(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.sqrt(np.min(_sq_dists(X, centers), axis=1))
