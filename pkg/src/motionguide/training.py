"""Noise-prediction training, Adam, and checkpoints."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io
from . import tensor as T
from .denoiser import NULL_CLASS, ConfigError, Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule
from .tensor import NumericError, Tape, Tensor

logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    pass


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> float:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p = self.params[k]
            p.data = (p.data - upd).astype(np.float32)
        return norm


def drop_conditions(classes: np.ndarray, p_uncond: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each class id by the null token with probability ``p_uncond``."""
    cond = np.array(classes, dtype=np.int64)
    drop = rng.random(cond.shape[0]) < p_uncond
    cond[drop] = NULL_CLASS
    return cond


def train_step(
    model: Denoiser,
    opt: Adam,
    z0: np.ndarray,
    classes: Sequence[int],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float = 0.1,
    cond_log: list | None = None,
    snr_gamma: float | None = None,
) -> float:
    """One Adam step on the noise-prediction MSE with t ~ U{1..T}.

    With ``snr_gamma`` each sample's loss is scaled by min(SNR_t, gamma)/SNR_t,
    which stops the nearly-clean timesteps dominating the gradient.  The
    returned value is always the plain unweighted MSE.
    """
    b = z0.shape[0]
    cond = drop_conditions(np.asarray(classes), p_uncond, rng)
    if cond_log is not None:
        cond_log.extend(cond.tolist())
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    ab = schedule.alpha_bar[t].reshape((b,) + (1,) * (z0.ndim - 1))
    z_t = (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)
    weight = None
    if snr_gamma is not None:
        snr = schedule.alpha_bar[t] / (1.0 - schedule.alpha_bar[t])
        weight = np.minimum(snr, snr_gamma) / snr
    model.requires_grad_(True)
    try:
        with Tape() as tape:
            pred, _ = model.predict_noise(z_t, cond, t)
            loss = T.mse(pred, Tensor(eps), weight)
            T.backward(loss, tape)
        value = float(np.mean((pred.data.astype(np.float64) - eps) ** 2))
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at optimizer step {opt.t + 1} (t={t.tolist()})")
        opt.step()
    finally:
        model.requires_grad_(False)
    return value


def moving_average(xs: Sequence[float], window: int) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) < window:
        return np.array([xs.mean()]) if len(xs) else xs
    c = np.cumsum(np.insert(xs, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def train(
    model: Denoiser,
    data: np.ndarray,
    classes: np.ndarray,
    schedule: NoiseSchedule,
    steps: int,
    batch: int = 8,
    lr: float = 2e-3,
    seed: int = 0,
    p_uncond: float = 0.1,
    warmup: int = 100,
    ema: float | None = 0.999,
    snr_gamma: float | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Train for ``steps`` optimizer steps; returns the per-step loss curve.

    Learning rate warms up linearly then follows a cosine decay to 10%.
    With ``ema`` set, the model ends up holding the exponential moving
    average of its weights rather than the last iterate.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=lr)
    avg = {k: p.data.astype(np.float64) for k, p in model.params.items()} if ema else None
    losses = []
    n = data.shape[0]
    for step in range(steps):
        frac = step / max(steps - 1, 1)
        warm = min(1.0, (step + 1) / warmup) if warmup else 1.0
        opt.lr = lr * warm * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        idx = rng.integers(0, n, size=batch)
        loss = train_step(model, opt, data[idx], classes[idx], schedule, rng, p_uncond, snr_gamma=snr_gamma)
        losses.append(loss)
        if avg is not None:
            d = min(ema, (1 + step) / (10 + step))  # short runs should not stay near init
            for k, p in model.params.items():
                avg[k] += (1 - d) * (p.data - avg[k])
        if callback is not None:
            callback(step, loss)
        if step % 100 == 0:
            logger.info("step %d loss %.4f", step, loss)
    if avg is not None:
        for k, p in model.params.items():
            p.data = avg[k].astype(np.float32)
    return losses


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Denoiser, path, step: int = 0, seed: int = 0, extra: dict | None = None) -> Path:
    """Directory with ``manifest.txt`` (key=value) and ``weights.mclt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = list(model.params)
    io.save_tensors(path / "weights.mclt", [model.params[k].data for k in names])
    man = {"kind": "denoiser-checkpoint", **model.config.to_manifest(), "train_step": step, "train_seed": seed}
    man["guidance_grad_through_norm_stats"] = 1
    man["params"] = ",".join(names)
    man.update(extra or {})
    io.write_manifest(path / "manifest.txt", man)
    return path


def load_checkpoint(path, config: DenoiserConfig | None = None) -> tuple[Denoiser, dict[str, str]]:
    path = Path(path)
    try:
        man = io.read_manifest(path / "manifest.txt")
    except FileNotFoundError as e:
        raise CheckpointError(f"{path}: no manifest.txt") from e
    saved = DenoiserConfig.from_manifest(man)
    if config is not None and config != saved:
        diffs = [
            f"{k}: checkpoint {getattr(saved, k)} vs requested {getattr(config, k)}"
            for k in saved.to_manifest()
            if k != "seed" and getattr(saved, k) != getattr(config, k)
        ]
        if diffs:
            raise CheckpointError("config mismatch: " + "; ".join(diffs))
    arrays = io.load_tensors(path / "weights.mclt")
    model = Denoiser(saved)
    names = man.get("params", "").split(",")
    if names != list(model.params) or len(arrays) != len(names):
        raise CheckpointError(f"{path}: parameter list does not match the architecture")
    for k, arr in zip(names, arrays):
        if arr.shape != model.params[k].shape:
            raise CheckpointError(f"{k}: dims {list(arr.shape)} vs expected {model.params[k].dims}")
    for k, arr in zip(names, arrays):
        model.params[k].data = arr
    return model, man
