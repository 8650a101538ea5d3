"""Warm-up and hypergraph-refinement optimization loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from .camera import sample_poses
from .errors import ConfigError, NumericalError
from .gaussians import (
    COLOR, NUM_ATTRIBUTES, OPACITY, POSITION, ROTATION, GaussianCloud, load_ply,
    normalize_quaternions, save_ply, synth_init,
)
from .guidance import IsmConfig, ViewCondition, ism_grad, schedule_linear
from .hypergraph import (
    build_knn_hypergraph, concat_hypergraphs, gcn_operator, leaky_relu, leaky_relu_grad,
    normalized_operator,
)
from .patchify import kmeans, patch_means
from .render import Rasterization, render

log = logging.getLogger(__name__)

ATTRIBUTE_GROUPS = {"position": POSITION, "opacity": OPACITY, "color": COLOR}


@dataclass
class PipelineConfig:
    seed: int = 0
    # loop structure
    n0: int = 1000
    n1: int = 50
    total_iterations: int = 4000
    converge_window: int = 100
    converge_patience: int = 3
    converge_tol: float = 1e-3
    # refiner
    k_pat: int = 50
    k_spa: int = 13
    k_lat: int = 13
    kmeans_max_iter: int = 50
    w_spa: float = 1.0
    w_lat: float = 1.0
    leaky_slope: float = 0.01
    conv: str = "hgnn"
    refine_damping: float = 1.0
    patch_views: int = 4
    patch_resolution: int = 64
    extractor: str = "downsample-gray"
    extractor_grid: int = 8
    extractor_bins: int = 4
    extractor_command: str = ""
    # optimizer
    position_lr: float = 1.6e-6
    color_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    theta_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    trainable: str = "position,opacity,color"
    # guidance and rendering
    cm_count: int = 4
    camera_radius: float = 4.0
    guidance_resolution: int = 256
    fov_y_deg: float = 49.1
    background: tuple = (0.0, 0.0, 0.0)
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    delta_t: int = 80
    delta_s: int = 160
    t_max: int = 980
    cfg_scale: float = 7.5
    omega_mode: str = "one-minus-alpha-bar"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.background = tuple(float(v) for v in np.broadcast_to(np.asarray(self.background, float), 3))

    def validate(self):
        if self.n0 < 0:
            raise ConfigError("n0 must be >= 0")
        if self.n1 < 1:
            raise ConfigError("n1 must be >= 1")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if not (0 <= self.k_spa < self.k_pat and 0 <= self.k_lat < self.k_pat):
            raise ConfigError("k_spa and k_lat must be smaller than k_pat")
        for name in ("position_lr", "color_lr", "opacity_lr", "theta_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.conv not in ("hgnn", "gcn"):
            raise ConfigError("conv must be 'hgnn' or 'gcn'")
        if self.refine_damping < 0:
            raise ConfigError("refine_damping must be >= 0")
        unknown = set(self.trainable_groups) - set(ATTRIBUTE_GROUPS)
        if unknown:
            raise ConfigError(f"unknown trainable groups {sorted(unknown)}")
        if self.cm_count < 1 or self.patch_views < 1:
            raise ConfigError("need at least one camera pose")
        self.ism_config.validate(self.schedule)
        _ = self.extractor_spec
        return self

    @property
    def trainable_groups(self):
        return [g.strip() for g in self.trainable.split(",") if g.strip()]

    @property
    def ism_config(self):
        return IsmConfig(delta_t=self.delta_t, delta_s=self.delta_s, t_max=self.t_max,
                         cfg_scale=self.cfg_scale, omega_mode=self.omega_mode)

    @property
    def schedule(self):
        return schedule_linear(self.schedule_T, self.beta_start, self.beta_end)

    @property
    def extractor_spec(self):
        return feat.ExtractorSpec(kind=self.extractor, grid=self.extractor_grid,
                                  bins=self.extractor_bins, command=self.extractor_command)

    def learning_rates(self):
        """Per-column learning rates for the attribute matrix; frozen columns get 0."""
        lr = np.zeros(NUM_ATTRIBUTES)
        rates = {"position": self.position_lr, "opacity": self.opacity_lr, "color": self.color_lr}
        for group in self.trainable_groups:
            lr[ATTRIBUTE_GROUPS[group]] = rates[group]
        return lr

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


class Adam:
    """Adam over named numpy parameters; learning rates may be arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.steps = defaultdict(int)

    def step(self, name, param, grad, lr):
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
        if self.m[name].shape != param.shape:
            raise ConfigError(f"moment shape mismatch for {name!r}")
        self.steps[name] += 1
        t = self.steps[name]
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * (grad * grad)
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class RefinerCache:
    """Per-block structure plus the quantities of the latest refine step."""

    block: int = -1
    assignment: object = None
    operator: np.ndarray = None
    hypergraph: object = None
    patch_poses: list = None
    builds: int = 0
    hits: int = 0
    block_hits: dict = field(default_factory=dict)
    # latest step
    x: np.ndarray = None
    ax: np.ndarray = None
    preact: np.ndarray = None
    labels: np.ndarray = None
    damping: float = 1.0
    leaky_slope: float = 0.01
    delta: np.ndarray = None


@dataclass
class RunReport:
    loss_trace: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    phase_times: dict = field(default_factory=lambda: defaultdict(float))
    final_path: str = None
    iterations: int = 0
    blocks: int = 0
    converged: bool = False
    cache_builds: int = 0
    cache_hits: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "loss_trace": list(self.loss_trace),
            "phases": list(self.phases),
            "phase_times": dict(self.phase_times),
            "final_path": self.final_path,
            "iterations": self.iterations,
            "blocks": self.blocks,
            "converged": self.converged,
            "cache_builds": self.cache_builds,
            "cache_hits": {str(k): v for k, v in self.cache_hits.items()},
        }


class _Timer:
    def __init__(self, times, key):
        self.times, self.key = times, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.times[self.key] += time.perf_counter() - self.t0


class ReferenceTargets:
    """Point-mass targets: renders of a reference cloud at each view's pose."""

    def __init__(self, reference, background=None):
        self.reference = reference
        self.background = background
        self._cache = {}

    def __call__(self, condition):
        pose = getattr(condition, "pose", None)
        if pose is None:
            return None
        key = (pose.eye.tobytes(), pose.target.tobytes(), pose.width, pose.height, pose.fov_y)
        if key not in self._cache:
            self._cache[key] = render(self.reference, pose, self.background).rgb
        return self._cache[key]


def _apply_attribute_step(cloud, grad, optimizer, config):
    params = cloud.to_attribute_matrix()
    new = optimizer.step("cloud", params, grad, config.learning_rates())
    new[:, COLOR] = np.clip(new[:, COLOR], 0.0, 1.0)
    if not np.all(np.isfinite(new)):
        raise NumericalError("optimizer produced non-finite attributes")
    return GaussianCloud(new)


def guidance_gradients(cloud, y, poses, predictor, config, rng, times=None):
    """Mean ISM loss and the view-averaged attribute gradient ``(M, 14)``."""
    times = times if times is not None else defaultdict(float)
    schedule = getattr(predictor, "schedule", None) or config.schedule
    cfg = config.ism_config
    grad = np.zeros((len(cloud), NUM_ATTRIBUTES))
    loss = 0.0
    for pose in poses:
        with _Timer(times, "render"):
            raster = Rasterization(cloud, pose, config.background)
        with _Timer(times, "guidance"):
            res = ism_grad(raster.image, ViewCondition(y, pose), predictor, schedule, cfg, rng)
        with _Timer(times, "render"):
            grad += raster.backward(res.pixel_grad)
        loss += res.loss
    n = len(poses)
    return loss / n, grad / n


def ddim_update(cloud, y, poses, predictor, config, optimizer, rng, times=None):
    """One guided Adam step on the trainable attribute columns.

    Returns ``(cloud', loss, attribute_gradient)``.
    """
    loss, grad = guidance_gradients(cloud, y, poses, predictor, config, rng, times)
    return _apply_attribute_step(cloud, grad, optimizer, config), loss, grad


def evaluation_loss(cloud, y, predictor, poses, config, t=480):
    """View-averaged interval-score loss at a fixed timestep (no sampling)."""
    schedule = getattr(predictor, "schedule", None) or config.schedule
    cfg = config.ism_config
    total = 0.0
    for pose in poses:
        image = render(cloud, pose, config.background)
        total += ism_grad(image, ViewCondition(y, pose), predictor, schedule, cfg, t=t).loss
    return total / len(poses)


def guidance_poses(config, rng):
    res = int(config.guidance_resolution)
    return sample_poses(config.cm_count, config.camera_radius, rng=rng, width=res, height=res,
                        fov_y=np.deg2rad(config.fov_y_deg))


def hg_refine_step(cloud, cache, config, theta, rng=None, *, rebuild=None, times=None):
    """Apply the patch hypergraph refiner once; returns ``(cloud', cache)``.

    Structure (patches, patch cameras, hypergraph) is rebuilt when
    ``rebuild`` is true, or when the cache is empty; otherwise reused.
    ``theta=None`` is the all-ones diagonal.
    """
    times = times if times is not None else defaultdict(float)
    if len(cloud) == 0:
        raise ConfigError("cannot refine an empty cloud")
    cache = cache if cache is not None else RefinerCache()
    if rebuild is None:
        rebuild = cache.assignment is None

    if rebuild:
        with _Timer(times, "patchify"):
            assignment = kmeans(cloud.positions, config.k_pat, seed=config.seed,
                                max_iter=config.kmeans_max_iter)
        n = assignment.n_patches
        if config.k_spa >= n or config.k_lat >= n:
            raise ConfigError(f"k_spa={config.k_spa} and k_lat={config.k_lat} must be < N={n}")
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        res = int(config.patch_resolution)
        cache.patch_poses = sample_poses(config.patch_views, 1.0, rng=rng, width=res, height=res,
                                         fov_y=np.deg2rad(config.fov_y_deg))
        cache.assignment = assignment
    else:
        cache.hits += 1
        cache.block_hits[cache.block] = cache.block_hits.get(cache.block, 0) + 1
        assignment = cache.assignment

    vbar = patch_means(cloud, assignment)
    with _Timer(times, "render"):
        views = feat.render_patch_views(cloud, assignment, cache.patch_poses, config.background)
    with _Timer(times, "features"):
        fmat = feat.extract(views, config.extractor_spec).matrix
    fstd = feat.standardize(fmat)
    x = np.concatenate([vbar, fstd], axis=1)
    theta = np.ones(x.shape[1]) if theta is None else np.asarray(theta, dtype=np.float64)
    if theta.shape != (x.shape[1],):
        raise ConfigError(f"theta has {theta.size} entries, vertex matrix has {x.shape[1]} columns")

    if rebuild:
        with _Timer(times, "construction"):
            if config.conv == "hgnn":
                h = concat_hypergraphs(
                    build_knn_hypergraph(vbar[:, POSITION], config.k_spa, "spatial"),
                    build_knn_hypergraph(fstd, config.k_lat, "latent"),
                    config.w_spa, config.w_lat,
                )
                cache.hypergraph = h
                cache.operator = normalized_operator(h)
            else:
                cache.hypergraph = None
                cache.operator = gcn_operator(vbar[:, POSITION], fstd, config.k_spa)
        cache.builds += 1
        cache.block += 1
        cache.block_hits[cache.block] = 0

    with _Timer(times, "hgnn"):
        ax = cache.operator @ x
        z = ax * theta
        x_new = leaky_relu(z, config.leaky_slope)
    delta_patch = (x_new - x)[:, :NUM_ATTRIBUTES]
    labels = assignment.labels
    cache.x, cache.ax, cache.preact, cache.labels = x, ax, z, labels
    cache.damping, cache.leaky_slope = float(config.refine_damping), float(config.leaky_slope)
    cache.delta = delta_patch[labels]

    if config.refine_damping == 0:
        return cloud, cache
    params = cloud.to_attribute_matrix() + config.refine_damping * cache.delta
    params[:, ROTATION] = normalize_quaternions(params[:, ROTATION])
    if not np.all(np.isfinite(params)):
        raise NumericalError("refiner produced non-finite attributes")
    return GaussianCloud(params), cache


def theta_gradient(attr_grad, cache):
    """Gradient of the loss w.r.t. the diagonal of theta through the refiner.

    ``attr_grad`` is dL/d(refined cloud). Feature columns get zero.
    """
    if cache is None or cache.preact is None:
        raise ConfigError("refiner cache holds no forward pass")
    attr_grad = np.asarray(attr_grad, dtype=np.float64)
    n, c = cache.preact.shape
    agg = np.stack([np.bincount(cache.labels, weights=attr_grad[:, j], minlength=n)
                    for j in range(NUM_ATTRIBUTES)], axis=1)
    sl = slice(0, NUM_ATTRIBUTES)
    local = leaky_relu_grad(cache.preact[:, sl], cache.leaky_slope) * cache.ax[:, sl]
    g = np.zeros(c)
    g[sl] = cache.damping * np.sum(agg * local, axis=0)
    return g


def resolve_init(source, seed=0):
    """A cloud from a :class:`GaussianCloud`, a PLY path, or ``synth:SHAPE:M[:SEED]``."""
    if isinstance(source, GaussianCloud):
        return source
    if isinstance(source, dict):
        return synth_init(source["shape"], source["m"], source.get("seed", seed))
    text = str(source)
    if text.startswith("synth:"):
        parts = text.split(":")
        if len(parts) not in (3, 4):
            raise ConfigError(f"bad synth string {text!r}; expected synth:SHAPE:M[:SEED]")
        return synth_init(parts[1], int(parts[2]), int(parts[3]) if len(parts) == 4 else seed)
    return load_ply(text)


def _write_atomic_json(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2), encoding="utf-8")
    os.replace(tmp, path)


def _plateaued(trace, window, patience, tol):
    n_windows = len(trace) // window
    if n_windows < patience + 1:
        return False
    means = [float(np.mean(trace[i * window:(i + 1) * window])) for i in range(n_windows)]
    recent = means[-(patience + 1):]
    for prev, cur in zip(recent[:-1], recent[1:]):
        gain = prev - cur
        if gain > tol * abs(prev) or (prev == 0 and gain != 0):
            return False
    return True


def optimize(config, init_source, y, predictor, *, output=None, checkpoint_dir=None,
             callback=None):
    """Run warm-up followed by refine blocks; returns ``(cloud, RunReport)``."""
    config.validate()
    cloud = resolve_init(init_source, config.seed).check_finite()
    guide_ss, refine_ss = np.random.SeedSequence(config.seed).spawn(2)
    guide_rng = np.random.default_rng(guide_ss)
    refine_rng = np.random.default_rng(refine_ss)
    optimizer = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    report = RunReport()
    times = report.phase_times
    theta = None
    cache = RefinerCache()

    for it in range(config.total_iterations):
        if it < config.n0:
            phase = "warmup"
            poses = guidance_poses(config, guide_rng)
            cloud, loss, _ = ddim_update(cloud, y, poses, predictor, config, optimizer, guide_rng, times)
        else:
            phase = "refine"
            j = (it - config.n0) % config.n1
            if j == 0:
                report.blocks += 1
            refined, cache = hg_refine_step(cloud, cache, config, theta, refine_rng,
                                            rebuild=(j == 0), times=times)
            if theta is None:
                theta = np.ones(cache.x.shape[1])
            poses = guidance_poses(config, guide_rng)
            loss, grad = guidance_gradients(refined, y, poses, predictor, config, guide_rng, times)
            g_theta = theta_gradient(grad, cache)
            theta = optimizer.step("theta", theta, g_theta, config.theta_lr)
            cloud = _apply_attribute_step(refined, grad, optimizer, config)
        report.loss_trace.append(float(loss))
        report.phases.append(phase)
        report.iterations = it + 1
        if callback is not None:
            callback(it, phase, cloud, loss)
        if checkpoint_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_ply(cloud, Path(checkpoint_dir) / f"checkpoint_{it + 1:06d}.ply")
        if _plateaued(report.loss_trace, config.converge_window, config.converge_patience,
                      config.converge_tol):
            report.converged = True
            log.info("loss plateaued after %d iterations", it + 1)
            break

    report.cache_builds = cache.builds
    report.cache_hits = dict(cache.block_hits)
    if output is not None:
        save_ply(cloud, output)
        report.final_path = str(output)
    return cloud, report


