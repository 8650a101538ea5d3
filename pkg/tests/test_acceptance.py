"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is printed in the
pytest terminal summary; running this file directly prints the same lines.
"""

import sys
import time

import numpy as np
import oracles
from hyper3dg.camera import CameraPose, sample_poses
from hyper3dg.features import standardize
from hyper3dg.gaussians import (
    COLOR, OPACITY, POSITION, ROTATION, GaussianCloud, synth_init, two_blob_membership,
)
from hyper3dg.guidance import (
    IsmConfig, PointMassPredictor, ZeroPredictor, ddim_invert, ism_grad, schedule_linear,
)
from hyper3dg.hypergraph import (
    build_knn_hypergraph, concat_hypergraphs, hgnn_forward, normalized_operator,
)
from hyper3dg.patchify import kmeans, patch_means, recompute_sse
from hyper3dg.pipeline import (
    Adam, PipelineConfig, RefinerCache, ReferenceTargets, ddim_update, guidance_poses,
    hg_refine_step, optimize,
)
from hyper3dg.render import Rasterization, render

# Observed in the oracle descent run (error ratio 0.1421 after 200 steps),
# pinned with a 10% margin.
DESCENT_PINNED_RATIO = 0.1421 * 1.1


def _record(store, number, title, ok, detail):
    line = f"criterion {number:2d} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})"
    store[number] = line
    print(line)
    return ok


# 1 -------------------------------------------------------------------------


def criterion_1():
    rng = np.random.default_rng(1)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(2, 65))
        c = int(rng.integers(3, 79))
        x = rng.standard_normal((n, c))
        spa = x[:, :3]
        lat = x[:, 3:] if c > 3 else rng.standard_normal((n, 4))
        k_spa = int(rng.integers(0, n))
        k_lat = int(rng.integers(0, n))
        w_spa, w_lat = rng.uniform(0.1, 3.0, size=2)
        theta = rng.uniform(-2.0, 2.0, size=c)
        slope = float(rng.uniform(0.0, 1.0))
        h = concat_hypergraphs(build_knn_hypergraph(spa, k_spa), build_knn_hypergraph(lat, k_lat),
                               w_spa, w_lat)
        got = hgnn_forward(x, h, theta, slope)
        want = oracles.dense_hgnn(x, spa, lat, k_spa, k_lat, w_spa, w_lat, theta, slope)
        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - t0
    return worst < 1e-10 and elapsed < 30, f"max |diff| = {worst:.2e}, {elapsed:.1f} s"


def test_criterion_1_hypergraph_oracle(acceptance):
    ok, detail = criterion_1()
    assert _record(acceptance, 1, "hypergraph oracle equivalence", ok, detail), detail


# 2 -------------------------------------------------------------------------


def criterion_2():
    rng = np.random.default_rng(2)
    exact = True
    for n in (1, 2, 7, 50):
        x = rng.standard_normal((n, 30))
        h = concat_hypergraphs(build_knn_hypergraph(x[:, :3], 0), build_knn_hypergraph(x[:, 14:], 0),
                               1.0, 1.0)
        exact &= np.array_equal(hgnn_forward(x, h, np.ones(30), leaky_slope=1.0), x)
        xp = np.abs(x)
        exact &= np.array_equal(hgnn_forward(xp, h, np.ones(30), leaky_slope=0.01), xp)
    return bool(exact), "bitwise X_out == X for N in {1, 2, 7, 50}"


def test_criterion_2_identity_preservation(acceptance):
    ok, detail = criterion_2()
    assert _record(acceptance, 2, "identity preservation", ok, detail), detail


# 3 -------------------------------------------------------------------------


def criterion_3():
    rng = np.random.default_rng(3)
    asym = min_eig = 0.0
    radius = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 65))
        spa = rng.standard_normal((n, 3))
        lat = rng.standard_normal((n, int(rng.integers(1, 40))))
        h = concat_hypergraphs(build_knn_hypergraph(spa, int(rng.integers(1, n))),
                               build_knn_hypergraph(lat, int(rng.integers(1, n))),
                               *rng.uniform(0.1, 3.0, size=2))
        a = normalized_operator(h)
        asym = max(asym, float(np.max(np.abs(a - a.T).sum(axis=1))))
        eig = np.linalg.eigvalsh((a + a.T) / 2)
        min_eig = min(min_eig, float(eig.min()))
        radius = max(radius, float(np.max(np.abs(eig))))
    ok = asym < 1e-12 and min_eig > -1e-12 and radius <= 1 + 1e-9
    return ok, f"asym {asym:.1e}, min eig {min_eig:.1e}, radius {radius:.12f}"


def test_criterion_3_operator_spectrum(acceptance):
    ok, detail = criterion_3()
    assert _record(acceptance, 3, "normalized-operator spectrum", ok, detail), detail


# 4 -------------------------------------------------------------------------


def random_scene(rng, m):
    params = np.zeros((m, 14))
    params[:, 0:2] = rng.uniform(-0.5, 0.5, size=(m, 2))
    params[:, 2] = np.linspace(-0.6, 0.6, m) + rng.uniform(-0.01, 0.01, size=m)
    params[:, OPACITY] = rng.normal(0.0, 1.0, size=m)
    params[:, 4:7] = np.log(rng.uniform(0.1, 0.3, size=(m, 3)))
    q = rng.standard_normal((m, 4))
    params[:, ROTATION] = q / np.linalg.norm(q, axis=1, keepdims=True)
    params[:, COLOR] = rng.uniform(0, 1, size=(m, 3))
    return GaussianCloud(params)


FD_POSE = CameraPose(eye=(0.0, 0.0, 3.0), target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), width=16, height=16)
FD_COLUMNS = {"position": POSITION, "opacity": slice(OPACITY, OPACITY + 1), "color": COLOR}


def fd_errors(rng, h=1e-3):
    m = int(rng.integers(1, 6))
    cloud = random_scene(rng, m)
    bg = rng.uniform(0, 1, size=3)
    g = rng.standard_normal((16, 16, 3))
    analytic = Rasterization(cloud, FD_POSE, bg).backward(g)

    def loss(p):
        return float(np.sum(g * render(GaussianCloud(p), FD_POSE, bg).rgb))

    errors = {}
    for name, sl in FD_COLUMNS.items():
        cols = np.arange(14)[sl]

        def f(sub, cols=cols):
            p = cloud.params.copy()
            p[:, cols] = sub
            return loss(p)

        fd = oracles.central_difference(f, cloud.params[:, cols], h)
        an = analytic[:, cols]
        errors[name] = float(np.max(np.abs(fd - an)) / max(np.max(np.abs(fd)), 1e-8))
    return errors


def criterion_4():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = {k: 0.0 for k in FD_COLUMNS}
    for _ in range(20):
        for k, v in fd_errors(rng).items():
            worst[k] = max(worst[k], v)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-3 and elapsed < 60
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s"


def test_criterion_4_renderer_gradients(acceptance):
    ok, detail = criterion_4()
    assert _record(acceptance, 4, "renderer gradient check", ok, detail), detail


# 5 -------------------------------------------------------------------------


def criterion_5():
    sch = schedule_linear()
    rng = np.random.default_rng(5)
    x0 = rng.uniform(0, 1, size=(8, 8, 3))
    traj = ddim_invert(x0, 960, 80, ZeroPredictor(sch))
    tele = max(float(np.max(np.abs(x - np.sqrt(sch.at(80 * (i + 1))) * x0))) for i, x in enumerate(traj))

    m = rng.uniform(0, 1, size=(8, 8, 3))
    pm = PointMassPredictor({"y": m}, unconditional=m, schedule=sch)
    trip = 0.0
    for t in (80, 320, 640, 960):
        xt = ddim_invert(m, t, 80, pm)[-1]
        back = oracles.reverse_ddim(xt, t, 80, sch.at, lambda x, s: pm.predict(x, s, None))
        trip = max(trip, float(np.max(np.abs(back - m))))

    manifold = 0.0
    for t in range(160, 981, 80):
        res = ism_grad(m, "y", pm, sch, IsmConfig(), t=t)
        manifold = max(manifold, res.loss)
    ok = tele < 1e-9 and trip < 1e-5 and manifold < 1e-10
    return ok, f"telescoping {tele:.1e}, round trip {trip:.1e}, on-manifold loss {manifold:.1e}"


def test_criterion_5_ddim_identities(acceptance):
    ok, detail = criterion_5()
    assert _record(acceptance, 5, "DDIM identities", ok, detail), detail


# 6 -------------------------------------------------------------------------


def descent_run(steps=200, m=400):
    init = synth_init("sphere", m, seed=0)
    ref = init.params.copy()
    ref[:, COLOR] = np.random.default_rng(5).random((m, 3))
    ref = GaussianCloud(ref)
    cfg = PipelineConfig(trainable="color", color_lr=1e-2, guidance_resolution=32, cm_count=2)
    pred = PointMassPredictor(ReferenceTargets(ref), "anchor", cfg.schedule)
    eval_poses = sample_poses(8, cfg.camera_radius, seed=123, width=32, height=32)
    targets = [render(ref, p).rgb for p in eval_poses]

    def error(c):
        return float(np.mean([np.abs(render(c, p).rgb - t).mean() for p, t in zip(eval_poses, targets)]))

    optimizer = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(0)
    cloud = init
    e0 = error(cloud)
    for _ in range(steps):
        cloud, _, _ = ddim_update(cloud, "ref", guidance_poses(cfg, rng), pred, cfg, optimizer, rng)
    return error(cloud) / e0, init, cloud


def criterion_6():
    final, init, cloud = descent_run()
    untouched = np.array_equal(np.delete(cloud.params, COLOR, axis=1), np.delete(init.params, COLOR, axis=1))
    ok = final <= 0.5 and final <= DESCENT_PINNED_RATIO and untouched
    return ok, f"error ratio after 200 steps {final:.4f} (need <= 0.5, pinned <= {DESCENT_PINNED_RATIO:.4f})"


def test_criterion_6_guided_descent(acceptance):
    ok, detail = criterion_6()
    assert _record(acceptance, 6, "guided-descent sanity", ok, detail), detail


# 7 -------------------------------------------------------------------------


def criterion_7():
    monotone = nonempty = exact_sse = blobs = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        base = rng.standard_normal((int(rng.integers(5, 40)), 3)) * rng.uniform(0.1, 5)
        pts = np.concatenate([base[rng.integers(0, len(base), 200)], rng.standard_normal((100, 3))])
        k = int(rng.integers(1, 60))
        res = kmeans(pts, k, seed=seed)
        trace = np.asarray(res.sse_trace)
        monotone &= bool(np.all(np.diff(trace) <= 1e-9 * max(1.0, trace[0])))
        nonempty &= bool(np.all(res.sizes() >= 1)) and res.n_patches == k
        exact_sse &= abs(recompute_sse(pts, res) - res.sse) <= 1e-9 * max(1.0, res.sse)
        cloud = synth_init("two-blobs", int(rng.integers(4, 500)), seed=seed)
        two = kmeans(cloud.positions, 2, seed=seed)
        truth = two_blob_membership(cloud)
        blobs &= np.array_equal(two.labels, truth) or np.array_equal(two.labels, 1 - truth)
    ok = monotone and nonempty and exact_sse and blobs
    return ok, f"monotone={monotone}, non-empty={nonempty}, sse exact={exact_sse}, two-blobs={blobs} over 100 seeds"


def test_criterion_7_kmeans_properties(acceptance):
    ok, detail = criterion_7()
    assert _record(acceptance, 7, "K-Means properties", ok, detail), detail


# 8 -------------------------------------------------------------------------


def small_refine_config(**kw):
    base = dict(k_pat=16, k_spa=4, k_lat=4, patch_resolution=16, patch_views=2)
    base.update(kw)
    return PipelineConfig(**base)


def criterion_8():
    ok = True
    checked = 0
    for seed, conv, damping in [(0, "hgnn", 1.0), (1, "gcn", 1.0), (2, "hgnn", 0.37), (3, "hgnn", 1e-3)]:
        cloud = synth_init("sphere", 500, seed=seed)
        cfg = small_refine_config(seed=seed, conv=conv, refine_damping=damping)
        refined, cache = hg_refine_step(cloud, RefinerCache(), cfg, None, np.random.default_rng(seed))
        applied = refined.params - cloud.params
        for p in range(cache.assignment.n_patches):
            rows = cache.delta[cache.labels == p]
            ok &= bool(np.all(rows == rows[0]))
            checked += 1
        keep = np.r_[0:7, 11:14]
        ok &= np.array_equal(refined.params[:, keep], cloud.params[:, keep] + damping * cache.delta[:, keep])
        ok &= bool(np.allclose(applied[:, keep], damping * cache.delta[:, keep], rtol=0, atol=1e-12))
        ok &= bool(np.allclose(np.linalg.norm(refined.rotations, axis=1), 1.0, atol=1e-12))
    return ok, f"{checked} patches checked, increments identical within every patch"


def test_criterion_8_replication(acceptance):
    ok, detail = criterion_8()
    assert _record(acceptance, 8, "replication property", ok, detail), detail


# 9 -------------------------------------------------------------------------


def tiny_run_config(**kw):
    base = dict(n0=3, n1=3, total_iterations=9, guidance_resolution=32, cm_count=2, k_pat=12,
                k_spa=4, k_lat=4, patch_resolution=16, patch_views=2, refine_damping=1e-3, seed=7)
    base.update(kw)
    return PipelineConfig(**base)


def criterion_9(tmp_path):
    cfg = tiny_run_config()
    ref = synth_init("sphere", 300, seed=11)
    outputs = []
    traces = []
    for i in range(2):
        pred = PointMassPredictor(ReferenceTargets(ref), "anchor", cfg.schedule)
        out = tmp_path / f"run{i}.ply"
        _, report = optimize(cfg, "synth:sphere:300:3", "ref", pred, output=out)
        outputs.append(out.read_bytes())
        traces.append(report.loss_trace)
    same_ply = outputs[0] == outputs[1]
    same_trace = traces[0] == traces[1]
    return same_ply and same_trace and len(traces[0]) == 9, (
        f"PLY bytes identical={same_ply}, loss traces identical={same_trace}")


def test_criterion_9_determinism(acceptance, tmp_path):
    ok, detail = criterion_9(tmp_path)
    assert _record(acceptance, 9, "determinism", ok, detail), detail


# 10 ------------------------------------------------------------------------


def criterion_10():
    cloud = synth_init("sphere", 100_000, seed=0)
    feats = standardize(np.random.default_rng(0).standard_normal((50, 64)))
    t0 = time.perf_counter()
    assignment = kmeans(cloud.positions, 50, seed=0)
    vbar = patch_means(cloud, assignment)
    h = concat_hypergraphs(build_knn_hypergraph(vbar[:, POSITION], 13, "spatial"),
                           build_knn_hypergraph(feats, 13, "latent"))
    out = hgnn_forward(np.concatenate([vbar, feats], axis=1), h)
    elapsed = time.perf_counter() - t0
    ok = elapsed < 10.0 and out.shape == (50, 78)
    return ok, f"{elapsed:.2f} s for M=100000, K_pat=50 (limit 10 s)"


def test_criterion_10_timing_envelope(acceptance):
    ok, detail = criterion_10()
    assert _record(acceptance, 10, "timing envelope", ok, detail), detail


# 11 ------------------------------------------------------------------------


def criterion_11():
    cloud = synth_init("two-blobs", 600, seed=0)
    ref = cloud.params.copy()
    ref[:, COLOR] = np.random.default_rng(1).random((600, 3))
    ref = GaussianCloud(ref)
    deltas = {}
    finals = {}
    for conv in ("hgnn", "gcn"):
        cfg = tiny_run_config(conv=conv, camera_radius=14.0, total_iterations=8, n0=2)
        _, cache = hg_refine_step(cloud, RefinerCache(), cfg, None, np.random.default_rng(0))
        deltas[conv] = cache.delta
        pred = PointMassPredictor(ReferenceTargets(ref), "anchor", cfg.schedule)
        finals[conv], report = optimize(cfg, cloud, "ref", pred)
        assert report.iterations == 8 and report.blocks == 2
    differ = not np.array_equal(deltas["hgnn"], deltas["gcn"])
    finals_differ = finals["hgnn"] != finals["gcn"]
    return differ and finals_differ, f"both runs completed; increments differ={differ}, final clouds differ={finals_differ}"


def test_criterion_11_ablation_hook(acceptance):
    ok, detail = criterion_11()
    assert _record(acceptance, 11, "ablation hook", ok, detail), detail


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    lines = {}
    runners = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
               6: criterion_6, 7: criterion_7, 10: criterion_10, 11: criterion_11, 8: criterion_8}
    titles = {1: "hypergraph oracle equivalence", 2: "identity preservation",
              3: "normalized-operator spectrum", 4: "renderer gradient check", 5: "DDIM identities",
              6: "guided-descent sanity", 7: "K-Means properties", 8: "replication property",
              9: "determinism", 10: "timing envelope", 11: "ablation hook"}
    failed = 0
    for n in range(1, 12):
        if n == 9:
            with tempfile.TemporaryDirectory() as d:
                ok, detail = criterion_9(Path(d))
        else:
            ok, detail = runners[n]()
        failed += not _record(lines, n, titles[n], ok, detail)
    sys.exit(1 if failed else 0)
