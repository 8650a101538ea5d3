import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hyper3dg.estimators import Hyper3DG, HypergraphConv, PatchKMeans
from hyper3dg.gaussians import synth_init
from hyper3dg.guidance import ZeroPredictor
from hyper3dg.hypergraph import build_knn_hypergraph, concat_hypergraphs, gcn_forward, hgnn_forward
from hyper3dg.patchify import kmeans


class TestPatchKMeans:
    def test_matches_functional_core(self):
        cloud = synth_init("sphere", 300, seed=0)
        est = PatchKMeans(n_clusters=8, seed=3).fit(cloud)
        res = kmeans(cloud.positions, 8, seed=3)
        assert np.array_equal(est.labels_, res.labels)
        assert est.inertia_ == res.sse and est.cluster_centers_.shape == (8, 3)

    def test_predict_recovers_training_labels(self):
        pts = synth_init("two-blobs", 200, seed=1).positions
        est = PatchKMeans(n_clusters=2).fit(pts)
        assert np.array_equal(est.predict(pts), est.labels_)
        assert np.array_equal(PatchKMeans(n_clusters=2).fit_predict(pts), est.labels_)

    def test_params_and_clone(self):
        est = PatchKMeans(n_clusters=5, seed=2)
        assert est.get_params() == {"n_clusters": 5, "seed": 2, "max_iter": 50}
        twin = clone(est.set_params(max_iter=7))
        assert twin.max_iter == 7 and not hasattr(twin, "labels_")

    def test_unfitted(self):
        with pytest.raises(NotFittedError):
            PatchKMeans().predict(np.zeros((2, 3)))


class TestHypergraphConv:
    def test_matches_functional_core(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((20, 22))
        out = HypergraphConv(k_spa=3, k_lat=4).fit_transform(x)
        h = concat_hypergraphs(build_knn_hypergraph(x[:, :3], 3), build_knn_hypergraph(x[:, 14:], 4))
        assert np.allclose(out, hgnn_forward(x, h))

    def test_gcn(self):
        x = np.random.default_rng(1).standard_normal((15, 20))
        est = HypergraphConv(k_spa=3, conv="gcn").fit(x)
        assert est.hypergraph_ is None
        assert np.allclose(est.transform(x), gcn_forward(x, x[:, :3], x[:, 14:], 3))

    def test_theta(self):
        x = np.random.default_rng(2).standard_normal((10, 16))
        assert np.all(HypergraphConv(k_spa=2, k_lat=2, theta=np.zeros(16)).fit_transform(x) == 0)

    def test_clone(self):
        twin = clone(HypergraphConv(k_spa=4, leaky_slope=0.3))
        assert twin.get_params()["k_spa"] == 4 and twin.leaky_slope == 0.3


class TestHyper3DG:
    def test_fit_transform(self, tmp_path):
        params = dict(n0=2, total_iterations=2, guidance_resolution=16, cm_count=1)
        est = Hyper3DG(predictor=ZeroPredictor(), params=params, output=tmp_path / "o.ply")
        est.fit(synth_init("sphere", 50, seed=0))
        assert est.transform().shape == (50, 14)
        assert len(est.loss_trace_) == 2 and (tmp_path / "o.ply").exists()

    def test_accepts_synth_spec(self):
        est = Hyper3DG(predictor=ZeroPredictor(), params=dict(n0=1, total_iterations=1, guidance_resolution=8))
        assert est.fit("synth:box:30").cloud_.params.shape == (30, 14)

    def test_unfitted(self):
        with pytest.raises(NotFittedError):
            Hyper3DG().transform()
