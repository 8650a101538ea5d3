"""KNN hypergraphs over patch vertices and the hypergraph convolution.

The convolution is the normalized smoother

    X_out = leaky_relu(Dv^-1/2 H W De^-1 H^T Dv^-1/2 X diag(theta))

with ``De`` the vertex count of each hyperedge and ``Dv`` the weighted
hyperedge count of each vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalError

GROUPS = ("spatial", "latent", "concatenated")


@dataclass(frozen=True)
class Hypergraph:
    incidence: sp.csr_matrix  # (N, E), entries 0/1
    edge_weights: np.ndarray  # (E,)
    group: str = "spatial"

    @property
    def n_vertices(self):
        return self.incidence.shape[0]

    @property
    def n_edges(self):
        return self.incidence.shape[1]

    def edge_degrees(self):
        return np.asarray(self.incidence.sum(axis=0)).ravel()

    def vertex_degrees(self):
        return np.asarray(self.incidence @ self.edge_weights).ravel()

    def edges(self):
        """Member vertex lists, one per hyperedge."""
        csc = self.incidence.tocsc()
        return [csc.indices[csc.indptr[e]:csc.indptr[e + 1]].tolist() for e in range(self.n_edges)]

    def dense(self):
        return self.incidence.toarray()


def knn_indices(points, k):
    """``(N, k)`` nearest other vertices by Euclidean distance, ties to lower index."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ConfigError("points must be an (N, d) array")
    n = pts.shape[0]
    k = int(k)
    if k < 0 or k >= max(n, 1):
        raise ConfigError(f"k must satisfy 0 <= k <= N-1 (got k={k}, N={n})")
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k]


def build_knn_hypergraph(points, k, group="spatial"):
    """One hyperedge per vertex: the vertex itself plus its ``k`` nearest neighbours."""
    nbrs = knn_indices(points, k)
    n = nbrs.shape[0]
    rows = np.concatenate([np.arange(n), nbrs.ravel()])
    cols = np.concatenate([np.arange(n), np.repeat(np.arange(n), nbrs.shape[1])])
    incidence = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return Hypergraph(incidence=incidence, edge_weights=np.ones(n), group=group)


def concat_hypergraphs(h_spa, h_lat, w_spa=1.0, w_lat=1.0):
    if h_spa.n_vertices != h_lat.n_vertices:
        raise ConfigError("hypergraphs must share the vertex set")
    if not (w_spa > 0 and w_lat > 0):
        raise ConfigError("hyperedge group weights must be positive")
    incidence = sp.hstack([h_spa.incidence, h_lat.incidence], format="csr")
    weights = np.concatenate([
        np.full(h_spa.n_edges, float(w_spa)) * h_spa.edge_weights,
        np.full(h_lat.n_edges, float(w_lat)) * h_lat.edge_weights,
    ])
    return Hypergraph(incidence=incidence, edge_weights=weights, group="concatenated")


def _degrees(h):
    dv = h.vertex_degrees()
    de = h.edge_degrees()
    if np.any(dv <= 0):
        raise NumericalError("hypergraph has a vertex with zero degree")
    if np.any(de <= 0):
        raise NumericalError("hypergraph has an empty hyperedge")
    return dv, de


def sparse_operator(h):
    """Sparse ``(N, N)`` operator ``Dv^-1/2 H W De^-1 H^T Dv^-1/2``.

    The vertex normalization is folded into each entry as
    ``m_ij / sqrt(dv_i dv_j)`` so that an operator equal to the identity
    in exact arithmetic is also the identity in floating point.
    """
    dv, de = _degrees(h)
    inc = h.incidence.tocsr()
    m = (inc @ sp.diags(h.edge_weights / de) @ inc.T).tocoo()
    vals = m.data / np.sqrt(dv[m.row] * dv[m.col])
    return sp.csr_matrix((vals, (m.row, m.col)), shape=m.shape)


def propagate(x, h):
    """Apply the normalized hypergraph operator to vertex features ``x``."""
    return sparse_operator(h) @ np.asarray(x, dtype=np.float64)


def normalized_operator(h):
    """Dense ``(N, N)`` smoothing operator ``Dv^-1/2 H W De^-1 H^T Dv^-1/2``."""
    return sparse_operator(h).toarray()


def leaky_relu(z, slope):
    return np.where(z >= 0, z, slope * z)


def leaky_relu_grad(z, slope):
    return np.where(z >= 0, 1.0, slope)


def _check_inputs(x, theta):
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if x.ndim != 2:
        raise ConfigError("vertex matrix must be 2-D")
    if theta.shape != (x.shape[1],):
        raise ConfigError(f"theta has {theta.size} entries for {x.shape[1]} columns")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(theta))):
        raise NumericalError("non-finite vertex features or theta")
    return x, theta


def hgnn_forward(x, h, theta=None, leaky_slope=0.01):
    x = np.asarray(x, dtype=np.float64)
    theta = np.ones(x.shape[1]) if theta is None else theta
    x, theta = _check_inputs(x, theta)
    if h.n_vertices != x.shape[0]:
        raise ConfigError("vertex matrix rows do not match hypergraph vertices")
    return leaky_relu(propagate(x, h) * theta, leaky_slope)


# ---------------------------------------------------------------------------
# Graph-convolution baseline


def knn_graph_adjacency(points, k):
    """Symmetric KNN adjacency with self loops (edge if either end selects the other)."""
    nbrs = knn_indices(points, k)
    n = nbrs.shape[0]
    a = np.eye(n)
    rows = np.repeat(np.arange(n), nbrs.shape[1])
    a[rows, nbrs.ravel()] = 1.0
    return np.maximum(a, a.T)


def gcn_operator(points_spa, points_lat, k):
    a = np.maximum(knn_graph_adjacency(points_spa, k), knn_graph_adjacency(points_lat, k))
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def gcn_forward(x, points_spa, points_lat, k, theta=None, leaky_slope=0.01):
    x = np.asarray(x, dtype=np.float64)
    theta = np.ones(x.shape[1]) if theta is None else theta
    x, theta = _check_inputs(x, theta)
    op = gcn_operator(points_spa, points_lat, k)
    if op.shape[0] != x.shape[0]:
        raise ConfigError("vertex matrix rows do not match graph vertices")
    return leaky_relu(op @ x * theta, leaky_slope)


def format_edge_list(h):
    """Text dump, one ``edge_id: v1 v2 ...`` line per hyperedge."""
    return "\n".join(f"{e}: " + " ".join(str(v) for v in members)
                     for e, members in enumerate(h.edges())) + "\n"
