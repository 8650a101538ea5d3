"""Diffusion schedule, DDIM inversion and interval score matching.

Timesteps are integers ``0..T``. ``alpha_bar(0) = 1`` denotes the clean
latent; ``alpha_bar(t)`` for ``t >= 1`` is the cumulative product of the
first ``t`` noise-schedule factors. Latents are the rendered pixels.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from .errors import ConfigError, NumericalError

OMEGA_MODES = ("constant", "one-minus-alpha-bar")


@dataclass(frozen=True)
class DiffusionSchedule:
    alpha_bar: np.ndarray  # (T,), entry t-1 is alpha_bar at timestep t

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 1:
            raise ConfigError("alpha_bar must be a non-empty 1-D sequence")
        if not (np.all(ab > 0) and np.all(ab <= 1) and np.all(np.diff(ab) < 0)):
            raise ConfigError("alpha_bar must be strictly decreasing within (0, 1]")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self):
        return self.alpha_bar.size

    def at(self, t):
        t = int(t)
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t - 1])


def schedule_linear(T=1000, beta_start=1e-4, beta_end=0.02):
    if not 0 < beta_start < beta_end < 1:
        raise ConfigError("need 0 < beta_start < beta_end < 1")
    if int(T) < 1:
        raise ConfigError("T must be positive")
    betas = np.linspace(beta_start, beta_end, int(T))
    return DiffusionSchedule(np.cumprod(1.0 - betas))


@dataclass(frozen=True, eq=False)
class ViewCondition:
    """A text condition paired with the camera it is evaluated under."""

    prompt: Any
    pose: Any = None


class NoisePredictor(Protocol):
    """``predict(x, t, y)`` returns the predicted noise; ``y=None`` is unconditional."""

    schedule: DiffusionSchedule

    def predict(self, x: np.ndarray, t: int, y: Any = None) -> np.ndarray: ...


class ZeroPredictor:
    def __init__(self, schedule=None):
        self.schedule = schedule or schedule_linear()

    def predict(self, x, t, y=None):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


class PointMassPredictor:
    """Exact noise predictor for data concentrated on one image per condition.

    ``predict(x, t, y) = (x - sqrt(ab_t) m_y) / sqrt(1 - ab_t)`` where
    ``m_y`` is the target for condition ``y`` and ``m_None`` the
    unconditional target. ``targets`` is a mapping or a callable from
    condition to image. At ``t = 0`` the prediction is defined as zero.

    With ``unconditional="anchor"`` the unconditional target is bound to
    the clean render at the start of every interval-score evaluation.
    """

    def __init__(self, targets, unconditional=0.5, schedule=None):
        self.schedule = schedule or schedule_linear()
        self.targets = targets
        self.unconditional = unconditional

    def target(self, y, like):
        if y is None:
            m = self.unconditional
            if isinstance(m, str):
                raise ConfigError("anchored predictor must be bound to a render before use")
        elif isinstance(self.targets, Mapping):
            key = y.prompt if isinstance(y, ViewCondition) else y
            try:
                m = self.targets[key]
            except KeyError:
                raise ConfigError(f"unknown condition {y!r}") from None
        else:
            m = self.targets(y)
            if m is None:
                raise ConfigError(f"unknown condition {y!r}")
        return np.broadcast_to(np.asarray(m, dtype=np.float64), np.shape(like))

    def predict(self, x, t, y=None):
        x = np.asarray(x, dtype=np.float64)
        ab = self.schedule.at(t)
        if ab >= 1.0:
            return np.zeros_like(x)
        return (x - np.sqrt(ab) * self.target(y, x)) / np.sqrt(1.0 - ab)

    def conditioned_on_render(self, x0):
        if isinstance(self.unconditional, str) and self.unconditional == "anchor":
            return PointMassPredictor(self.targets, np.array(x0, dtype=np.float64), self.schedule)
        return self


def point_mass_predictor(target_images, unconditional=0.5, schedule=None):
    return PointMassPredictor(target_images, unconditional, schedule)


def _schedule_of(predictor, schedule):
    if schedule is not None:
        return schedule
    return getattr(predictor, "schedule", None) or schedule_linear()


def gamma(schedule, s):
    """Noise coefficient of the clean-latent estimate, ``sqrt(1-ab_s)/sqrt(ab_s)``."""
    ab = schedule.at(s)
    return np.sqrt(1.0 - ab) / np.sqrt(ab)


def predict_x0(x_s, s, eps_uncond, schedule):
    return x_s / np.sqrt(schedule.at(s)) - gamma(schedule, s) * eps_uncond


def ddim_step(x_s, s, t, predictor, y=None, *, schedule=None):
    """Deterministic DDIM move from timestep ``s`` to a noisier ``t``."""
    schedule = _schedule_of(predictor, schedule)
    if not 0 <= s < t:
        raise ConfigError(f"ddim_step needs 0 <= s < t (got s={s}, t={t})")
    x_s = np.asarray(x_s, dtype=np.float64)
    eps_u = predictor.predict(x_s, s, None)
    eps_y = eps_u if y is None else predictor.predict(x_s, s, y)
    x0 = predict_x0(x_s, s, eps_u, schedule)
    ab_t = schedule.at(t)
    return np.sqrt(ab_t) * x0 + np.sqrt(1.0 - ab_t) * eps_y


def _invert_grid(x0, grid, predictor, schedule):
    traj = []
    x = np.asarray(x0, dtype=np.float64)
    for s, t in zip(grid[:-1], grid[1:]):
        x = ddim_step(x, s, t, predictor, None, schedule=schedule)
        traj.append(x)
    return traj


def ddim_invert(x0, t_target, delta_t, predictor, *, schedule=None):
    """Unconditional inversion trajectory ``[x_dt, x_2dt, ..., x_t_target]``."""
    schedule = _schedule_of(predictor, schedule)
    t_target, delta_t = int(t_target), int(delta_t)
    if delta_t <= 0 or t_target <= 0 or t_target % delta_t:
        raise ConfigError("t_target must be a positive multiple of delta_t")
    return _invert_grid(x0, list(range(0, t_target + 1, delta_t)), predictor, schedule)


def invert_to(x0, s, stride, predictor, *, schedule=None):
    """Invert ``x0`` to timestep ``s`` in steps of ``stride`` (last step may be shorter)."""
    schedule = _schedule_of(predictor, schedule)
    if s == 0:
        return np.asarray(x0, dtype=np.float64)
    grid = list(range(0, int(s), int(stride))) + [int(s)]
    return _invert_grid(x0, grid, predictor, schedule)[-1]


def ddim_denoise_step(x_t, t, s, predictor, y=None, *, schedule=None):
    """Deterministic DDIM move from ``t`` down to ``s < t``."""
    schedule = _schedule_of(predictor, schedule)
    eps = predictor.predict(x_t, t, y)
    x0 = predict_x0(np.asarray(x_t, dtype=np.float64), t, eps, schedule)
    ab_s = schedule.at(s)
    return np.sqrt(ab_s) * x0 + np.sqrt(1.0 - ab_s) * eps


def ddim_sample(x_t, t, stride, predictor, y=None, *, schedule=None):
    """Denoise from timestep ``t`` all the way to the clean latent."""
    schedule = _schedule_of(predictor, schedule)
    x = np.asarray(x_t, dtype=np.float64)
    cur = int(t)
    while cur > 0:
        nxt = max(cur - int(stride), 0)
        x = ddim_denoise_step(x, cur, nxt, predictor, y, schedule=schedule)
        cur = nxt
    return x


@dataclass(frozen=True)
class IsmConfig:
    delta_t: int = 80
    delta_s: int = 160
    t_max: int = 980
    cfg_scale: float = 7.5
    omega_mode: str = "one-minus-alpha-bar"
    omega_scale: float = 1.0

    def validate(self, schedule):
        if not 0 < self.delta_t <= self.t_max < schedule.T:
            raise ConfigError("need 0 < delta_t <= t_max < T")
        if self.delta_s <= 0 or (self.delta_s != self.delta_t and self.delta_s % self.delta_t):
            raise ConfigError("delta_s must equal delta_t or be a multiple of it")
        if self.omega_mode not in OMEGA_MODES:
            raise ConfigError(f"omega_mode must be one of {OMEGA_MODES}")
        if 2 * self.delta_t > self.t_max:
            raise ConfigError("t_max must admit a timestep above delta_t")

    def omega(self, schedule, t):
        base = 1.0 if self.omega_mode == "constant" else 1.0 - schedule.at(t)
        return self.omega_scale * base


@dataclass
class IsmResult:
    loss: float
    pixel_grad: np.ndarray
    t_used: int
    s_used: int


def sample_timestep(cfg, rng):
    """``t ~ U(1, t_max)`` rounded to a ``delta_t`` multiple; redrawn until ``t > delta_t``."""
    dt = cfg.delta_t
    while True:
        t = int(rng.integers(1, cfg.t_max + 1))
        t = int(round(t / dt)) * dt
        if t > cfg.t_max:
            t -= dt
        if t > dt:
            return t


def ism_grad(rendered, y, predictor, schedule=None, cfg=None, rng=None, *, t=None):
    """Interval-score loss and its pixel-space direction for one view."""
    cfg = cfg or IsmConfig()
    schedule = _schedule_of(predictor, schedule)
    cfg.validate(schedule)
    rng = rng if rng is not None else np.random.default_rng()
    x0 = np.asarray(getattr(rendered, "rgb", rendered), dtype=np.float64)
    if t is None:
        t = sample_timestep(cfg, rng)
    s = t - cfg.delta_t
    pred = predictor.conditioned_on_render(x0) if hasattr(predictor, "conditioned_on_render") else predictor

    x_s = invert_to(x0, s, cfg.delta_s, pred, schedule=schedule)
    eps_s = pred.predict(x_s, s, None)
    ab_t = schedule.at(t)
    x_t = np.sqrt(ab_t) * predict_x0(x_s, s, eps_s, schedule) + np.sqrt(1.0 - ab_t) * eps_s

    eps_u = pred.predict(x_t, t, None)
    eps_c = pred.predict(x_t, t, y)
    eps_hat = eps_u + cfg.cfg_scale * (eps_c - eps_u)
    diff = eps_hat - eps_s
    w = cfg.omega(schedule, t)
    grad = w * diff
    loss = float(w * np.mean(diff * diff))
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalError(f"non-finite interval score at t={t}")
    return IsmResult(loss=loss, pixel_grad=grad, t_used=int(t), s_used=int(s))
