"""Sparse temporal-attention motion representations and their guidance energy.

A representation stores, for one up-path block, the top-k mask ``M`` of a
reference clip's temporal attention and the masked attention ``L = M * A``.
During sampling the energy ``||L - M * A_gen||^2`` pulls the generated
clip's attention toward the reference on the selected entries only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .denoiser import NULL_CLASS, ConfigError, Denoiser
from .diffusion import NoiseSchedule, add_noise, ddim_invert
from .tensor import ShapeError, Tensor

GUIDANCE_MODES = ("plain", "primary")


def topk_mask(attn: np.ndarray, k: int) -> np.ndarray:
    """Binary mask of the ``k`` largest entries of each last-axis row.

    Ties go to the lower index.
    """
    attn = np.asarray(attn)
    f = attn.shape[-1]
    if not 1 <= k <= f:
        raise ValueError(f"k must be in [1, {f}], got {k}")
    order = np.argsort(-attn, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(attn.shape, dtype=np.float32)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


@dataclass
class MotionRepresentation:
    """Portable motion clone of one reference clip at one block."""

    L: np.ndarray  # (h*w, f, f)
    M: np.ndarray  # (h*w, f, f), binary
    t_alpha: int
    block: str
    k: int
    mode: str = "primary"  # plain | primary
    extraction: str = "single-step"  # single-step | inversion
    source: str = ""
    seed: int = 0
    cond: int = NULL_CLASS
    shared_noise: bool = True

    @property
    def frames(self) -> int:
        return self.L.shape[-1]

    def energy(self, attn: Tensor, t: int | None = None) -> Tensor:
        return guidance_energy(self, attn)

    def manifest(self) -> dict:
        return {
            "kind": "motion-representation",
            "t_alpha": self.t_alpha,
            "block": self.block,
            "k": self.k,
            "mode": self.mode,
            "extraction": self.extraction,
            "source": self.source,
            "seed": self.seed,
            "cond": self.cond,
            "shared_noise": int(self.shared_noise),
            "hw": self.L.shape[0],
            "frames": self.frames,
            "storage": "sparse" if self.mode == "primary" else "dense",
        }


def guidance_energy(rep: MotionRepresentation, attn: Tensor) -> Tensor:
    """Squared L2 distance between ``L`` and the masked generated attention."""
    if tuple(attn.shape) != rep.L.shape:
        raise ShapeError(
            f"representation dims {list(rep.L.shape)} (block {rep.block}) do not match generated attention dims {attn.dims}"
        )
    masked = T.mul_const(attn, rep.M)
    return T.sq_norm(T.sub(Tensor(rep.L), masked))


def _extraction_noise(shape, seed: int, shared: bool) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if shared:
        one = rng.standard_normal((shape[0], 1) + tuple(shape[2:]))
        return np.repeat(one, shape[1], axis=1).astype(np.float32)
    return rng.standard_normal(shape).astype(np.float32)


def _check_clip(model: Denoiser, data: np.ndarray) -> None:
    c = model.config
    want = (c.frames, c.channels, c.resolution, c.resolution)
    if tuple(data.shape) != want:
        raise ShapeError(f"clip dims {list(data.shape)} do not match model dims {list(want)}")


def build_representation(attn: np.ndarray, k: int, mode: str, **meta) -> MotionRepresentation:
    if mode not in GUIDANCE_MODES:
        raise ConfigError(f"guidance mode must be one of {GUIDANCE_MODES}, got {mode!r}")
    f = attn.shape[-1]
    if mode == "plain":
        k = f
    M = topk_mask(attn, k)
    L = (M * attn).astype(np.float32)
    return MotionRepresentation(L=L, M=M, k=k, mode=mode, **meta)


def extract_representation(
    model: Denoiser,
    schedule: NoiseSchedule,
    clip,
    t_alpha: int = 400,
    k: int = 1,
    block: str = "up_block.1",
    cond: int = NULL_CLASS,
    seed: int = 0,
    mode: str = "primary",
    shared_noise: bool = True,
) -> MotionRepresentation:
    """One noise-add to ``t_alpha`` plus one denoiser call, recording ``block``.

    With ``shared_noise`` a single noise image is reused for every frame, so
    frame-to-frame differences in the noised clip come from the clip alone.
    """
    model.check_blocks([block])
    data = getattr(clip, "data", clip)
    _check_clip(model, data)
    z0 = np.asarray(data, dtype=np.float32)[None]
    eps = _extraction_noise(z0.shape, seed, shared_noise)
    z = add_noise(schedule, z0, t_alpha, eps)
    _, recs = model.predict_noise(z, cond, t_alpha, (block,))
    attn = recs[0].attn.data
    return build_representation(
        attn, k, mode, t_alpha=t_alpha, block=block, extraction="single-step",
        source=getattr(clip, "clip_id", ""), seed=seed, cond=cond, shared_noise=shared_noise,
    )


def extract_by_inversion(
    model: Denoiser,
    schedule: NoiseSchedule,
    clip,
    t_alpha: int = 400,
    k: int = 1,
    block: str = "up_block.1",
    cond: int = NULL_CLASS,
    steps: int = 100,
    mode: str = "primary",
) -> MotionRepresentation:
    """{L, M} at ``t_alpha`` taken from a DDIM inversion trajectory."""
    model.check_blocks([block])
    data = getattr(clip, "data", clip)
    _check_clip(model, data)
    if t_alpha not in schedule.grid(steps):
        raise ValueError(f"t_alpha={t_alpha} is not on the {steps}-step inversion grid")
    _, maps = ddim_invert(model, schedule, data, cond, steps, record=block)
    return build_representation(
        maps[t_alpha], k, mode, t_alpha=t_alpha, block=block, extraction="inversion",
        source=getattr(clip, "clip_id", ""), cond=cond, shared_noise=False,
    )


@dataclass
class GuidanceTrajectory:
    """Per-timestep {A_ref^t, M^t} from DDIM inversion."""

    block: str
    k: int
    maps: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    source: str = ""
    mode: str = "inversion_1"

    @property
    def timesteps(self) -> list[int]:
        return sorted(self.maps, reverse=True)

    def energy(self, attn: Tensor, t: int) -> Tensor:
        if t not in self.maps:
            raise KeyError(f"no reference attention for timestep {t}")
        A, M = self.maps[t]
        if tuple(attn.shape) != A.shape:
            raise ShapeError(f"trajectory dims {list(A.shape)} vs generated {attn.dims}")
        return T.sq_norm(T.sub(Tensor(M * A), T.mul_const(attn, M)))

    def at(self, t: int, t_alpha: int | None = None) -> MotionRepresentation:
        A, M = self.maps[t]
        return MotionRepresentation((M * A).astype(np.float32), M, t, self.block, self.k, "primary", "inversion", self.source)


def extract_trajectory(
    model: Denoiser,
    schedule: NoiseSchedule,
    clip,
    steps: int,
    guidance_steps: int,
    k: int = 1,
    block: str = "up_block.1",
    cond: int = NULL_CLASS,
) -> GuidanceTrajectory:
    """Invert ``clip`` on the sampler's grid and keep the guided window's maps.

    The top-k mask is re-applied at every step.
    """
    model.check_blocks([block])
    data = getattr(clip, "data", clip)
    _check_clip(model, data)
    _, maps = ddim_invert(model, schedule, data, cond, steps, record=block)
    window = schedule.grid(steps)[:guidance_steps]
    out = {t: (maps[t].astype(np.float32), topk_mask(maps[t], k)) for t in window}
    return GuidanceTrajectory(block, k, out, getattr(clip, "clip_id", ""))


def motion_intensity_map(rep: MotionRepresentation, selected_only: bool = True) -> np.ndarray:
    """Per-position mean of ``L`` reshaped to (h, w).

    By default the mean runs over the masked-in entries; ``selected_only=False``
    averages over all f*f entries including the zeros.
    """
    hw = rep.L.shape[0]
    side = int(round(np.sqrt(hw)))
    if selected_only:
        vals = rep.L.sum(axis=(1, 2)) / np.maximum(rep.M.sum(axis=(1, 2)), 1.0)
    else:
        vals = rep.L.mean(axis=(1, 2))
    return vals.reshape(side, side)


def export_heatmap(path, rep: MotionRepresentation, selected_only: bool = True) -> np.ndarray:
    m = motion_intensity_map(rep, selected_only)
    lo, hi = float(m.min()), float(m.max())
    io.write_pgm(path, m, lo, hi if hi > lo else lo + 1.0)
    return m


# ---------------------------------------------------------------- persistence


def save_representation(path, rep: MotionRepresentation) -> Path:
    """Directory with ``manifest.txt`` and ``tensors.mclt``.

    Primary-mode masks are stored sparsely as one (h*w, f, k, 2) record of
    (column index, value) pairs; plain mode stores L densely.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if rep.mode == "primary":
        idx = np.argsort(-rep.M, axis=-1, kind="stable")[..., : rep.k]
        vals = np.take_along_axis(rep.L, idx, axis=-1)
        payload = [np.stack([idx.astype(np.float32), vals], axis=-1)]
    else:
        payload = [rep.L]
    io.save_tensors(path / "tensors.mclt", payload)
    io.write_manifest(path / "manifest.txt", rep.manifest())
    return path


def load_representation(path, frames: int | None = None) -> MotionRepresentation:
    path = Path(path)
    man = io.read_manifest(path / "manifest.txt")
    arrs = io.load_tensors(path / "tensors.mclt")
    hw, f, k = int(man["hw"]), int(man["frames"]), int(man["k"])
    if frames is not None and frames != f:
        raise ShapeError(f"representation has {f} frames, model expects {frames}")
    if len(arrs) != 1:
        raise io.ContainerError(f"{path}: expected one tensor record, found {len(arrs)}")
    arr = arrs[0]
    if man["storage"] == "sparse":
        if arr.shape != (hw, f, k, 2):
            raise io.ContainerError(f"{path}: sparse record dims {list(arr.shape)} disagree with manifest {[hw, f, k, 2]}")
        idx = arr[..., 0].astype(np.int64)
        M = np.zeros((hw, f, f), dtype=np.float32)
        np.put_along_axis(M, idx, 1.0, axis=-1)
        L = np.zeros((hw, f, f), dtype=np.float32)
        np.put_along_axis(L, idx, arr[..., 1], axis=-1)
    else:
        if arr.shape != (hw, f, f):
            raise io.ContainerError(f"{path}: dense record dims {list(arr.shape)} disagree with manifest {[hw, f, f]}")
        L = arr
        M = np.ones_like(L)
    return MotionRepresentation(
        L=L, M=M, t_alpha=int(man["t_alpha"]), block=man["block"], k=k, mode=man["mode"],
        extraction=man["extraction"], source=man["source"], seed=int(man["seed"]),
        cond=int(man["cond"]), shared_noise=bool(int(man["shared_noise"])),
    )
