"""Noise schedule, DDIM sampling and inversion, and the guided sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import tensor as T
from .denoiser import NULL_CLASS, ConfigError, Denoiser
from .synthgen import VideoClip
from .tensor import NumericError, Tape, Tensor

logger = logging.getLogger(__name__)

MODES = ("off", "plain", "primary", "inversion_1")
SCHEDULE_PRESETS = {"camera": (100, 50), "object": (300, 180)}


class NoiseSchedule:
    """Linear beta schedule; index 0 is the clean sample (alpha_bar = 1)."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        self.T = T
        self.betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(self.alphas)])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def grid(self, steps: int) -> list[int]:
        """Descending inference timesteps, a uniform subset of 1..T."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"step count {steps} outside [1, {self.T}]")
        return [int(round(self.T * (steps - i) / steps)) for i in range(steps)]


def add_noise(schedule: NoiseSchedule, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    schedule.check_t(t)
    if z0.shape != eps.shape:
        raise T.ShapeError(f"add_noise: dims {list(z0.shape)} vs {list(eps.shape)}")
    ab = schedule.alpha_bar[t]
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def predict_x0(schedule: NoiseSchedule, z_t, eps, t: int):
    ab = schedule.alpha_bar[t]
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def ddim_step(
    schedule: NoiseSchedule, z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, clip_x0: float | None = None
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    With ``clip_x0`` the predicted clean sample is clamped to
    ``[-clip_x0, clip_x0]`` and the noise estimate is re-derived from it.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"ddim_step needs t > t_prev >= 0, got {t}, {t_prev}")
    x0 = predict_x0(schedule, z_t, eps, t)
    if clip_x0 is not None:
        x0 = np.clip(x0, -clip_x0, clip_x0)
        ab = schedule.alpha_bar[t]
        eps = (z_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    ab_prev = schedule.alpha_bar[t_prev]
    return (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps).astype(np.float32)


def ddim_invert(
    model: Denoiser,
    schedule: NoiseSchedule,
    z0: np.ndarray,
    cond: int,
    steps: int,
    record: str | None = None,
) -> tuple[list[np.ndarray], dict[int, np.ndarray]]:
    """Run the sampler ODE backwards from a clean clip.

    Returns the trajectory ``[z_0, z_{t_1}, ..., z_T]`` (length ``steps + 1``)
    and, if ``record`` names a block, that block's attention map keyed by the
    timestep at which the model was evaluated.
    """
    grid = schedule.grid(steps)[::-1]
    z = np.asarray(z0, dtype=np.float32)[None]
    traj = [z[0].copy()]
    maps: dict[int, np.ndarray] = {}
    t_cur = 0
    for t_next in grid:
        eps, recs = model.predict_noise(z, cond, t_next, () if record is None else (record,))
        e = eps.data
        if record is not None:
            maps[t_next] = recs[0].attn.data
        ab, ab_next = schedule.alpha_bar[t_cur], schedule.alpha_bar[t_next]
        x0 = (z - np.sqrt(1.0 - ab) * e) / np.sqrt(ab)
        z = (np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * e).astype(np.float32)
        traj.append(z[0].copy())
        t_cur = t_next
    return traj, maps


class Guidance(Protocol):
    mode: str
    block: str

    def energy(self, attn: Tensor, t: int) -> Tensor: ...


@dataclass
class SamplerConfig:
    steps: int = 100
    guidance_steps: int = 50
    cfg_scale: float = 7.5
    lam: float = 2000.0
    mode: str = "off"
    seed: int = 0
    clip_x0: float | None = 1.0
    lam_schedule: Callable[[int], float] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.guidance_steps > self.steps:
            raise ConfigError("guidance_steps cannot exceed steps")
        if self.cfg_scale < 0 or self.lam < 0:
            raise ConfigError("cfg_scale and lam must be non-negative")

    @classmethod
    def preset(cls, name: str, **kw) -> "SamplerConfig":
        steps, guided = SCHEDULE_PRESETS[name]
        return cls(steps=steps, guidance_steps=guided, **kw)


def sample(
    model: Denoiser,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    cond: int,
    guidance: Guidance | None = None,
    z_T: np.ndarray | None = None,
) -> VideoClip:
    """Classifier-free guided DDIM sampling with optional attention-energy guidance.

    In the first ``config.guidance_steps`` steps the conditional prediction is
    recorded on a tape, the guidance energy on ``guidance.block`` is
    backpropagated to ``z_t``, and ``lam * sqrt(1 - alpha_bar_t) * grad`` is
    added to the combined noise estimate.  With deterministic DDIM that moves
    ``z_{t_prev}`` down the energy.
    """
    cfg = model.config
    guided = config.mode != "off"
    if guided:
        if guidance is None:
            raise ConfigError(f"mode {config.mode!r} needs a motion representation")
        if guidance.mode != config.mode:
            raise ConfigError(f"representation mode {guidance.mode!r} does not match sampler mode {config.mode!r}")
        model.check_blocks([guidance.block])
    shape = (1, cfg.frames, cfg.channels, cfg.resolution, cfg.resolution)
    if z_T is None:
        z = np.random.default_rng(config.seed).standard_normal(shape).astype(np.float32)
    else:
        z = np.asarray(z_T, dtype=np.float32).reshape(shape)
    grid = schedule.grid(config.steps)
    energies: list[float] = []
    grad_norms: list[float] = []  # RMS of the guidance term added to eps
    for i, t in enumerate(grid):
        t_prev = grid[i + 1] if i + 1 < len(grid) else 0
        if guided and i < config.guidance_steps:
            zt = Tensor(z, requires_grad=True)
            with Tape() as tape:
                eps_c, recs = model.predict_noise(zt, cond, t, (guidance.block,))
                g = guidance.energy(recs[0].attn, t)
                T.backward(g, tape)
            grad = zt.grad if zt.grad is not None else np.zeros_like(z)
            if not np.isfinite(grad).all():
                raise NumericError(f"non-finite guidance gradient at step {i} (t={t})")
            energies.append(float(g.data))
            e_c = eps_c.data
        else:
            grad = None
            e_c = model.predict_noise(z, cond, t)[0].data
        if config.cfg_scale != 0.0:
            e_u = model.predict_noise(z, NULL_CLASS, t)[0].data
            eps = e_c + np.float32(config.cfg_scale) * (e_c - e_u)
        else:
            eps = e_c
        if grad is not None:
            mult = config.lam_schedule(i) if config.lam_schedule is not None else 1.0
            w = np.float32(config.lam * mult * np.sqrt(1.0 - schedule.alpha_bar[t]))
            # with eta = 0 DDIM the eps coefficient of z_{t_prev} is negative, so
            # adding the gradient to eps moves z_{t_prev} down the energy
            eps = eps + w * grad
            grad_norms.append(float(w * np.sqrt(np.mean(grad.astype(np.float64) ** 2))))
        z = ddim_step(schedule, z, eps, t, t_prev, config.clip_x0)
    meta = {"seed": config.seed, "mode": config.mode, "energies": energies, "guidance_rms": grad_norms}
    return VideoClip(z[0], clip_id=f"sample-{config.mode}-seed{config.seed}", motion_class=int(cond), meta=meta)
