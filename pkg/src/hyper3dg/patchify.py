"""K-Means patchify and per-patch attribute means."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .gaussians import NUM_ATTRIBUTES, ROTATION

DEFAULT_K_PAT = 50


@dataclass
class PatchAssignment:
    labels: np.ndarray  # (M,) int
    centroids: np.ndarray  # (N, 3)
    sse: float
    sse_trace: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def n_patches(self):
        return self.centroids.shape[0]

    def sizes(self):
        return np.bincount(self.labels, minlength=self.n_patches)

    def members(self, patch_id):
        return np.flatnonzero(self.labels == patch_id)


def _sq_dists(points, centers):
    d = points[:, None, :] - centers[None, :, :]
    return np.einsum("mkd,mkd->mk", d, d)


def _assign(points, centers):
    """Nearest centroid per point; ties go to the lowest centroid index.

    The argmin uses the BLAS-friendly expansion; the returned distances are
    recomputed exactly from coordinate differences.
    """
    scores = (centers * centers).sum(axis=1)[None, :] - 2.0 * (points @ centers.T)
    labels = np.argmin(scores, axis=1)
    d = points - centers[labels]
    return labels, np.einsum("md,md->m", d, d)


def _kmeanspp(points, k, rng):
    m = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = rng.integers(m)
    centers[0] = points[first]
    closest = _sq_dists(points, centers[:1])[:, 0]  # (M,)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # remaining points coincide with chosen centers
            idx = rng.integers(m)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        centers[c] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centers[c:c + 1])[:, 0])
    return centers


def _update_centers(points, labels, k):
    counts = np.bincount(labels, minlength=k)
    sums = np.stack([np.bincount(labels, weights=points[:, j], minlength=k)
                     for j in range(points.shape[1])], axis=1)
    centers = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], np.nan)
    return centers, counts


def _fill_empty(points, labels, dists, centers, counts):
    """Move each empty cluster onto the point farthest from its own centroid."""
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return labels, dists, centers
    dists = dists.copy()
    labels = labels.copy()
    for c in empty:
        # donors must keep at least one member
        donor_ok = np.bincount(labels, minlength=len(counts))[labels] > 1
        candidates = np.where(donor_ok, dists, -np.inf)
        idx = int(np.argmax(candidates))
        labels[idx] = c
        centers[c] = points[idx]
        dists[idx] = 0.0
    # re-centre the donors
    for c in range(len(counts)):
        centers[c] = points[labels == c].mean(axis=0)
    d = points - centers[labels]
    dists = np.einsum("md,md->m", d, d)
    return labels, dists, centers


def kmeans(positions, k_pat=DEFAULT_K_PAT, seed=0, max_iter=50):
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iter`` iterations or when no label changes. Every
    patch is guaranteed at least one member. ``sse_trace[i]`` is the
    within-cluster sum of squares after the i-th assignment/update pair.
    """
    points = np.asarray(positions, dtype=np.float64)
    if points.ndim != 2:
        raise ConfigError("positions must be an (M, d) array")
    m = points.shape[0]
    k = int(k_pat)
    if k < 1 or k > m:
        raise ConfigError(f"k_pat must satisfy 1 <= k_pat <= M (got k_pat={k}, M={m})")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(points, k, rng)
    labels, dists = _assign(points, centers)
    trace = []
    n_iter = 0
    for n_iter in range(1, int(max_iter) + 1):
        new_centers, counts = _update_centers(points, labels, k)
        # after the update step the sse of the current labels can only drop
        d = points - np.where(np.isnan(new_centers), 0.0, new_centers)[labels]
        dists = np.einsum("md,md->m", d, d)
        labels, dists, centers = _fill_empty(points, labels, dists, new_centers, counts)
        trace.append(float(dists.sum()))
        new_labels, new_dists = _assign(points, centers)
        changed = not np.array_equal(new_labels, labels)
        labels, dists = new_labels, new_dists
        if not changed:
            break
    centers, counts = _update_centers(points, labels, k)
    labels, dists, centers = _fill_empty(points, labels, dists, centers, counts)
    d = points - centers[labels]
    sse = float(np.einsum("md,md->", d, d))
    trace.append(sse)
    return PatchAssignment(labels=labels, centroids=centers, sse=sse, sse_trace=trace, n_iter=n_iter)


def recompute_sse(positions, assignment):
    d = np.asarray(positions) - assignment.centroids[assignment.labels]
    return float(np.einsum("md,md->", d, d))


def patch_means(cloud, assignment):
    """Per-patch mean of every attribute column, ``(N, 14)``.

    Quaternions are sign-aligned to the first member of their patch before
    averaging and renormalized afterwards.
    """
    labels = np.asarray(getattr(assignment, "labels", assignment))
    params = cloud.params
    if labels.shape != (params.shape[0],):
        raise ConfigError(f"assignment has {labels.shape[0]} labels but cloud has {params.shape[0]} Gaussians")
    n = int(getattr(assignment, "n_patches", labels.max() + 1))
    counts = np.bincount(labels, minlength=n)
    if np.any(counts == 0):
        raise ConfigError("every patch must have at least one member")
    values = params.copy()
    # first member index of each patch
    order = np.argsort(labels, kind="stable")
    starts = np.searchsorted(labels[order], np.arange(n))
    first = order[starts]
    ref = params[first[labels], ROTATION]
    flip = np.einsum("md,md->m", values[:, ROTATION], ref) < 0
    values[flip, ROTATION] *= -1.0
    sums = np.stack([np.bincount(labels, weights=values[:, j], minlength=n)
                     for j in range(NUM_ATTRIBUTES)], axis=1)
    means = sums / counts[:, None]
    q = means[:, ROTATION]
    means[:, ROTATION] = q / np.linalg.norm(q, axis=1, keepdims=True)
    return means
