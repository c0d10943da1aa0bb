"""Point-cloud geometry kernels: KNN, normals, cropping, FPS, aligned distance, contact map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_GAMMA = 1.0
DEFAULT_THETA = 10.0

# Relative eigenvalue threshold below which a neighborhood counts as rank-deficient.
_DEGENERATE_REL = 1e-9


def _check_cloud(pts, name="cloud") -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must be (N,3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N,M) squared distances via one matrix product instead of an (N,M,3) tensor."""
    d2 = np.sum(a * a, axis=1)[:, None] - 2.0 * (a @ b.T) + np.sum(b * b, axis=1)[None, :]
    return np.maximum(d2, 0.0, out=d2)


def knn(query: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest reference points per query point.

    Rows are sorted ascending by Euclidean distance; ties break toward the
    lower reference index. Exact (no approximation).
    """
    query = _check_cloud(query, "query")
    reference = _check_cloud(reference, "reference")
    if reference.shape[0] == 0:
        raise ValueError("reference cloud is empty")
    if not 1 <= k <= reference.shape[0]:
        raise ValueError(f"k={k} out of range for reference of size {reference.shape[0]}")
    d2 = _pairwise_sq_dists(query, reference)
    if k < reference.shape[0]:
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    else:
        part = np.broadcast_to(np.arange(reference.shape[0]), (query.shape[0], k)).copy()
    part.sort(axis=1)  # candidate set in index order, so stable sort below breaks ties by index
    cand = np.take_along_axis(d2, part, axis=1)
    order = np.argsort(cand, axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


@dataclass(frozen=True)
class NormalSet:
    """Per-point unit normals plus a flag marking rank-deficient neighborhoods."""

    values: np.ndarray
    degenerate: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != self.degenerate.shape[0]:
            raise ValueError("normals and flags must have equal length")


def estimate_normals(cloud: np.ndarray, k: int) -> NormalSet:
    """Per-point normals from the covariance of the k nearest neighbors (point included).

    The normal is the smallest-eigenvalue eigenvector, sign-fixed so its
    largest-magnitude component is positive. Neighborhoods whose covariance has
    rank < 2 get normal (0,0,1) and a raised degeneracy flag.
    """
    cloud = _check_cloud(cloud)
    n = cloud.shape[0]
    if not 3 <= k <= n:
        raise ValueError(f"need cloud size >= k >= 3, got n={n}, k={k}")
    idx = knn(cloud, cloud, k)
    nbrs = cloud[idx]  # (n, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = eigvecs[:, :, 0].copy()
    degenerate = eigvals[:, 1] <= _DEGENERATE_REL * np.maximum(eigvals[:, 2], 1e-30)
    normals[degenerate] = (0.0, 0.0, 1.0)
    # Canonical sign: largest-|component| positive.
    lead = np.take_along_axis(normals, np.argmax(np.abs(normals), axis=1)[:, None], axis=1)[:, 0]
    normals[lead < 0] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return NormalSet(normals, degenerate)


def crop_aabb(cloud: np.ndarray, bounds) -> np.ndarray:
    """Retain points inside a closed axis-aligned box; order preserved."""
    cloud = _check_cloud(cloud) if len(cloud) else np.asarray(cloud, dtype=float).reshape(0, 3)
    bounds = np.asarray(bounds, dtype=float)
    if bounds.shape != (3, 2):
        raise ValueError(f"bounds must be (3,2) [lo,hi] per axis, got {bounds.shape}")
    if np.any(bounds[:, 0] > bounds[:, 1]):
        raise ValueError("bounds must satisfy lo <= hi per axis")
    if cloud.shape[0] == 0:
        return cloud
    keep = np.all((cloud >= bounds[:, 0]) & (cloud <= bounds[:, 1]), axis=1)
    return cloud[keep]


def farthest_point_sample(cloud: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of m indices starting at `start`; ties break low."""
    cloud = _check_cloud(cloud)
    n = cloud.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} out of range for cloud of size {n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    # Squared distances select the same argmax/min chain as true distances.
    sq = np.einsum("ij,ij->i", cloud, cloud)
    dist = sq - 2.0 * (cloud @ cloud[start]) + sq[start]
    dist[start] = -np.inf  # exclude selected points so all-zero ties advance by index
    for i in range(1, m):
        nxt = int(np.argmax(dist))  # argmax returns the first (lowest) index on ties
        chosen[i] = nxt
        np.minimum(dist, sq - 2.0 * (cloud @ cloud[nxt]) + sq[nxt], out=dist)
        dist[nxt] = -np.inf
    return chosen


def aligned_distance(
    obj: np.ndarray,
    normals: np.ndarray,
    hand: np.ndarray,
    gamma: float = DEFAULT_GAMMA,
) -> np.ndarray:
    """Per-object-point aligned distance to the hand cloud.

    For object point v_o with unit normal n_o, the value is
    min over hand points v_h of exp(gamma * (1 - |cos(v_h - v_o, n_o)|)) * ||v_o - v_h||.
    Approach directions tangent to the surface are penalized; a coincident hand
    point contributes 0 (its direction term is defined as 1).
    """
    obj = _check_cloud(obj, "obj")
    hand = _check_cloud(hand, "hand")
    if isinstance(normals, NormalSet):
        normals = normals.values
    normals = np.asarray(normals, dtype=float)
    if normals.shape != obj.shape:
        raise ValueError(f"normals shape {normals.shape} must match obj {obj.shape}")
    if hand.shape[0] == 0:
        raise ValueError("hand cloud is empty")
    dist = np.sqrt(_pairwise_sq_dists(obj, hand))  # (N, M)
    # <v_h - v_o, n_o> expands to n_o . v_h - n_o . v_o, one matrix product.
    dots = normals @ hand.T - np.sum(normals * obj, axis=1)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.abs(dots) / dist
    cosang[dist == 0.0] = 1.0
    np.clip(cosang, 0.0, 1.0, out=cosang)
    weighted = np.exp(gamma * (1.0 - cosang)) * dist
    return weighted.min(axis=1)


def contact_map(d: np.ndarray, theta: float = DEFAULT_THETA) -> np.ndarray:
    """Map nonnegative distances to contact values in [0,1]: c = 1 - 2*(sigmoid(theta*d) - 1/2)."""
    d = np.asarray(d, dtype=float)
    if theta <= 0:
        raise ValueError("theta must be positive")
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    # Equivalent stable form 2*exp(-x)/(1+exp(-x)) with x = theta*d >= 0.
    e = np.exp(-theta * d)
    return 2.0 * e / (1.0 + e)
