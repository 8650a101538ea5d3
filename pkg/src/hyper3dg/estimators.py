"""scikit-learn style wrappers around the functional core."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .gaussians import GaussianCloud
from .hypergraph import (
    build_knn_hypergraph, concat_hypergraphs, gcn_operator, leaky_relu, normalized_operator,
)
from .patchify import kmeans


class PatchKMeans(ClusterMixin, BaseEstimator):
    """K-Means patchify over Gaussian positions (or any point matrix)."""

    def __init__(self, n_clusters=50, seed=0, max_iter=50):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = _points(X)
        result = kmeans(X, self.n_clusters, seed=self.seed, max_iter=self.max_iter)
        self.assignment_ = result
        self.labels_ = result.labels
        self.cluster_centers_ = result.centroids
        self.inertia_ = result.sse
        self.n_iter_ = result.n_iter
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = _points(X)
        d = ((X[:, None, :] - self.cluster_centers_[None]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)


class HypergraphConv(TransformerMixin, BaseEstimator):
    """Dual KNN hypergraph convolution over patch vertex features.

    ``fit`` builds the structure from spatial columns ``X[:, spatial]`` and
    latent columns ``X[:, latent]``; ``transform`` applies the smoother,
    the diagonal ``theta_`` and the activation.
    """

    def __init__(self, k_spa=13, k_lat=13, w_spa=1.0, w_lat=1.0, leaky_slope=0.01,
                 conv="hgnn", spatial=slice(0, 3), latent=slice(14, None), theta=None):
        self.k_spa = k_spa
        self.k_lat = k_lat
        self.w_spa = w_spa
        self.w_lat = w_lat
        self.leaky_slope = leaky_slope
        self.conv = conv
        self.spatial = spatial
        self.latent = latent
        self.theta = theta

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        spa, lat = X[:, self.spatial], X[:, self.latent]
        if lat.shape[1] == 0:
            lat = spa
        if self.conv == "gcn":
            self.hypergraph_ = None
            self.operator_ = gcn_operator(spa, lat, self.k_spa)
        else:
            self.hypergraph_ = concat_hypergraphs(
                build_knn_hypergraph(spa, self.k_spa, "spatial"),
                build_knn_hypergraph(lat, self.k_lat, "latent"),
                self.w_spa, self.w_lat,
            )
            self.operator_ = normalized_operator(self.hypergraph_)
        self.theta_ = (np.ones(X.shape[1]) if self.theta is None
                       else np.asarray(self.theta, dtype=np.float64).copy())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "operator_")
        X = check_array(X, dtype=np.float64)
        return leaky_relu((self.operator_ @ X) * self.theta_, self.leaky_slope)


class Hyper3DG(BaseEstimator):
    """Full optimization loop; ``fit`` takes an initial cloud or PLY path.

    Any :class:`PipelineConfig` field may be overridden through ``params``.
    """

    def __init__(self, predictor=None, prompt="reference", params=None, output=None):
        self.predictor = predictor
        self.prompt = prompt
        self.params = params
        self.output = output

    def fit(self, X, y=None):
        from .guidance import ZeroPredictor
        from .pipeline import PipelineConfig, optimize

        config = PipelineConfig.from_dict(dict(self.params or {}))
        predictor = self.predictor if self.predictor is not None else ZeroPredictor()
        cloud = X if isinstance(X, GaussianCloud) else _as_source(X)
        self.cloud_, self.report_ = optimize(config, cloud, y if y is not None else self.prompt,
                                             predictor, output=self.output)
        self.loss_trace_ = np.asarray(self.report_.loss_trace)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "cloud_")
        return self.cloud_.to_attribute_matrix()


def _points(X):
    if isinstance(X, GaussianCloud):
        return X.positions
    return check_array(X, dtype=np.float64)


def _as_source(X):
    if isinstance(X, np.ndarray):
        return GaussianCloud(check_array(X, dtype=np.float64))
    return X
