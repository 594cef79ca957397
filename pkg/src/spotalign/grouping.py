"""Feature-grouping branch: per-modality projection, K-means on
unit-normalized vectors, and cross-modal nearest-centroid assignment.

Centroids are means of normalized member rows and are deliberately not
re-normalized, so dot-product similarity against them also encodes cluster
coherence.  All tie-breaks are by lowest index, and every function is a
deterministic function of its inputs and seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ContractError


@dataclass
class GroupState:
    """K-means result for one modality."""

    centroids: np.ndarray  # k x d
    assignments: np.ndarray  # length N, values in [0, k)
    inertia: float  # sum of squared distances at convergence
    n_iter: int
    inertia_trace: tuple[float, ...] = ()  # inertia at each assignment step


def group_project(p: dict[str, DiffTensor], e_ins, modality: str) -> DiffTensor:
    """Affine map of instance embeddings into the grouping space."""
    if modality not in ("image", "gene"):
        raise ContractError(f"modality must be 'image' or 'gene', got {modality!r}")
    x = ad.as_tensor(e_ins)
    return ad.matmul(x, p[f"group_{modality}/w"]) + p[f"group_{modality}/b"]


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct (x - c)^2 form so ties resolve identically to a brute-force scan
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=-1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points duplicate a centroid; take lowest unchosen index
            candidates = [i for i in range(n) if i not in chosen]
            idx = candidates[0]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=-1))
    return points[chosen].copy()


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    centroids = _kmeans_pp_init(points, k, rng)
    n_iter = 0
    trace = []
    for n_iter in range(1, max_iter + 1):
        dists = _squared_distances(points, centroids)
        assign = dists.argmin(axis=1)
        member_dist = dists[np.arange(points.shape[0]), assign]
        trace.append(float(member_dist.sum()))
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            members = points[assign == j]
            if members.shape[0] == 0:
                far = int(member_dist.argmax())
                new_centroids[j] = points[far]
                member_dist[far] = -1.0  # a later empty cluster must steal elsewhere
            else:
                new_centroids[j] = members.mean(axis=0)
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=-1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    dists = _squared_distances(points, centroids)
    assign = dists.argmin(axis=1)
    inertia = float(dists[np.arange(points.shape[0]), assign].sum())
    trace.append(inertia)
    return centroids, assign, inertia, n_iter, tuple(trace)


def kmeans(
    e_clu: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    normalize: bool = True,
    n_init: int = 10,
) -> GroupState:
    """Seeded k-means++ / Lloyd clustering of grouping features.

    Rows are l2-normalized first unless ``normalize`` is off (raw mode).
    ``n_init`` restarts run with seeds derived from ``seed``; the lowest
    inertia wins, ties going to the earliest restart.  Empty clusters are
    repaired by reseeding from the point farthest from its centroid.
    """
    points = np.asarray(e_clu, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError(f"kmeans expects an N x d matrix, got shape {points.shape}")
    n = points.shape[0]
    if k <= 0:
        raise ContractError(f"k must be positive, got {k}")
    if k > n:
        raise ContractError(f"k={k} exceeds the number of points n={n}")
    if not np.all(np.isfinite(points)):
        raise ContractError("kmeans requires finite inputs")
    if normalize:
        points = ad.l2_normalize_rows(ad.constant(points)).data

    best = None
    for restart in range(max(1, n_init)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, restart]))
        result = _lloyd(points, k, rng, max_iter, tol)
        if best is None or result[2] < best[2]:
            best = result
    centroids, assign, inertia, n_iter, trace = best
    return GroupState(
        centroids=centroids,
        assignments=assign.astype(np.int64),
        inertia=inertia,
        n_iter=n_iter,
        inertia_trace=trace,
    )


def assign_cross(e_ins: np.ndarray, other_centroids: np.ndarray) -> np.ndarray:
    """Nearest opposite-modality centroid per instance by dot-product similarity."""
    e = np.asarray(e_ins, dtype=np.float64)
    c = np.asarray(other_centroids, dtype=np.float64)
    if e.shape[-1] != c.shape[-1]:
        raise ContractError(
            f"instance dim {e.shape[-1]} does not match centroid dim {c.shape[-1]}"
        )
    sims = e @ c.T
    return sims.argmax(axis=1).astype(np.int64)
