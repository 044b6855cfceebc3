"""Command-line entry point: ``motionguide <command> [flags]``.

Commands: gen-data, train, extract, sample, eval, ablate, demo.  Every run
writes its artifacts and fully resolved ``config.txt`` into a fresh run
directory ``<out>/<command>-<timestamp>-seed<seed>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import io, metrics, synthgen
from .denoiser import ConfigError, Denoiser, DenoiserConfig
from .diffusion import SCHEDULE_PRESETS, NoiseSchedule, SamplerConfig, sample
from .guidance import (
    extract_by_inversion,
    extract_representation,
    extract_trajectory,
    export_heatmap,
    load_representation,
    save_representation,
)
from .synthgen import ClipParams, MotionTruth, VideoClip
from .training import load_checkpoint, moving_average, save_checkpoint, train

logger = logging.getLogger(__name__)

# file keys that differ from the field name
_KEY_ALIASES = {"lambda": "lam"}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    # model / data
    frames: int = 8
    resolution: int = 32
    patch: int = 4
    width: int = 32
    levels: int = 2
    count: int = 256
    data: str = ""
    # training
    train_steps: int = 6000
    batch: int = 8
    lr: float = 2e-3
    p_uncond: float = 0.1
    snr_gamma: float = 5.0  # 0 disables loss weighting
    # extraction
    checkpoint: str = ""
    clip: str = ""
    truth: str = ""
    kind: str = "pan"
    velocity: str = "2,0"
    t_alpha: int = 400
    k: int = 1
    block: str = "up_block.1"
    extract_cond: int = 0
    extraction: str = "single-step"
    shared_noise: bool = True
    # sampling
    rep: str = ""
    mode: str = "primary"
    cond: str = "pan"
    lam: float = 2000.0
    cfg_scale: float = 7.5
    schedule: str = "camera"
    # ablation / demo
    axis: str = "k"
    grid: str = "1,4,8"
    seeds: int = 4
    refs: int = 2

    def steps(self) -> tuple[int, int]:
        if self.schedule in SCHEDULE_PRESETS:
            return SCHEDULE_PRESETS[self.schedule]
        try:
            total, guided = (int(x) for x in self.schedule.split(","))
        except ValueError as e:
            raise ConfigError(f"schedule must be camera, object, or N,M; got {self.schedule!r}") from e
        return total, guided

    def velocity_tuple(self) -> tuple[int, int]:
        try:
            vx, vy = (int(x) for x in self.velocity.split(","))
        except ValueError as e:
            raise ConfigError(f"velocity must be DX,DY; got {self.velocity!r}") from e
        return vx, vy

    def cond_id(self) -> int:
        if self.cond.isdigit():
            return int(self.cond)
        if self.cond in ("null", "none"):
            return 0
        if self.cond not in synthgen.CLASS_IDS:
            raise ConfigError(f"unknown condition {self.cond!r}")
        return synthgen.CLASS_IDS[self.cond]

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(frames=self.frames, resolution=self.resolution, patch=self.patch,
                              width=self.width, levels=self.levels, vocab=len(synthgen.KINDS) + 1, seed=self.seed)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            key = next((k for k, v in _KEY_ALIASES.items() if v == f.name), f.name)
            out.append(f"{key}={getattr(self, f.name)}")
        return "\n".join(out) + "\n"


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got {raw!r}")
    caster = {"int": int, "float": float, "str": str}.get(field.type if isinstance(field.type, str) else field.type.__name__, str)
    try:
        return caster(raw)
    except ValueError as e:
        raise ConfigError(f"{field.name}: cannot parse {raw!r}") from e


def load_config(path: str | None, overrides: dict[str, str]) -> RunConfig:
    """Merge a key=value file and command-line overrides; unknown keys are rejected."""
    by_name = {f.name: f for f in fields(RunConfig)}
    raw: dict[str, str] = {}
    if path:
        raw.update(io.read_manifest(path))
    raw.update(overrides)
    values = {}
    for key, val in raw.items():
        name = _KEY_ALIASES.get(key, key).replace("-", "_")
        if name not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        values[name] = _coerce(by_name[name], str(val))
    return RunConfig(**values)


def _run_dir(cfg: RunConfig, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(cfg.out) / f"{command}-{stamp}-seed{cfg.seed}"
    path, n = base, 1
    while path.exists():
        path = Path(f"{base}-{n}")
        n += 1
    path.mkdir(parents=True)
    (path / "config.txt").write_text(cfg.to_text())
    return path


def _need(path: str, what: str) -> Path:
    if not path:
        raise FileNotFoundError(f"{what} path not given")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _reference(cfg: RunConfig) -> tuple[VideoClip, MotionTruth | None]:
    if cfg.clip:
        data = io.load_tensor(_need(cfg.clip, "clip"))
        truth = MotionTruth.from_text(_need(cfg.truth, "truth").read_text()) if cfg.truth else None
        return VideoClip(data, Path(cfg.clip).stem), truth
    params = ClipParams(frames=cfg.frames, size=cfg.resolution, square=_square(cfg.resolution), velocity=cfg.velocity_tuple())
    return synthgen.gen_clip(cfg.kind, params, seed=cfg.seed)


def _square(size: int) -> int:
    return max(2, size * 5 // 16)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> Path:
    run = _run_dir(cfg, "gen-data")
    items = synthgen.gen_dataset(cfg.count, cfg.seed, cfg.frames, cfg.resolution)
    synthgen.write_dataset(run / "data", items)
    print(f"wrote {len(items)} clips to {run / 'data'}")
    return run


def train_model(cfg: RunConfig):
    """Build the corpus named by ``cfg`` and train a fresh model on it."""
    if cfg.data:
        items = synthgen.read_dataset(_need(cfg.data, "dataset"))
    else:
        items = synthgen.gen_dataset(cfg.count, cfg.seed, cfg.frames, cfg.resolution)
    data = np.stack([c.data for c, _ in items])
    classes = np.array([c.motion_class for c, _ in items])
    model = Denoiser(cfg.model_config())
    losses = train(model, data, classes, NoiseSchedule(), cfg.train_steps, cfg.batch, cfg.lr, cfg.seed,
                   cfg.p_uncond, snr_gamma=cfg.snr_gamma or None)
    return model, losses


def cmd_train(cfg: RunConfig) -> Path:
    run = _run_dir(cfg, "train")
    model, losses = train_model(cfg)
    save_checkpoint(model, run / "checkpoint", step=cfg.train_steps, seed=cfg.seed)
    (run / "losses.txt").write_text("".join(f"{i}\t{v:.6f}\n" for i, v in enumerate(losses)))
    ma = moving_average(losses, min(200, len(losses)))
    print(f"loss moving average {ma[0]:.4f} -> {ma[-1]:.4f}; checkpoint {run / 'checkpoint'}")
    return run


def _extract(cfg: RunConfig, model, schedule, clip, *, mode: str | None = None, k: int | None = None,
             t_alpha: int | None = None, block: str | None = None):
    mode = mode or cfg.mode
    kw = dict(t_alpha=t_alpha or cfg.t_alpha, k=k or cfg.k, block=block or cfg.block, cond=cfg.extract_cond)
    if cfg.extraction == "inversion":
        return extract_by_inversion(model, schedule, clip, mode=mode, **kw)
    return extract_representation(model, schedule, clip, seed=cfg.seed, mode=mode, shared_noise=cfg.shared_noise, **kw)


def cmd_extract(cfg: RunConfig) -> Path:
    model, _ = load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    clip, _ = _reference(cfg)
    run = _run_dir(cfg, "extract")
    rep = _extract(cfg, model, NoiseSchedule(), clip, mode="plain" if cfg.mode == "plain" else "primary")
    save_representation(run / "representation", rep)
    export_heatmap(run / "intensity.pgm", rep)
    print(f"representation {run / 'representation'} (block {rep.block}, t_alpha {rep.t_alpha}, k {rep.k})")
    return run


def _guidance_for(cfg: RunConfig, model, schedule, steps):
    total, guided = steps
    if cfg.mode == "off":
        return None
    if cfg.mode == "inversion_1":
        clip, _ = _reference(cfg)
        return extract_trajectory(model, schedule, clip, total, guided, cfg.k, cfg.block, cfg.extract_cond)
    rep = load_representation(_need(cfg.rep, "representation"), frames=model.config.frames)
    if rep.mode != cfg.mode:
        raise ConfigError(f"representation is {rep.mode!r} but --mode is {cfg.mode!r}")
    return rep


def cmd_sample(cfg: RunConfig) -> Path:
    model, _ = load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    schedule = NoiseSchedule()
    total, guided = cfg.steps()
    guidance = _guidance_for(cfg, model, schedule, (total, guided))
    run = _run_dir(cfg, "sample")
    sc = SamplerConfig(steps=total, guidance_steps=guided, cfg_scale=cfg.cfg_scale, lam=cfg.lam, mode=cfg.mode, seed=cfg.seed)
    clip = sample(model, schedule, sc, cfg.cond_id(), guidance)
    io.save_tensor(run / "clip.mclt", clip.data)
    io.write_frames(run / "frames", clip.data)
    print(f"sample {run / 'clip.mclt'}")
    return run


def cmd_eval(cfg: RunConfig) -> Path:
    clip = io.load_tensor(_need(cfg.clip, "clip"))
    truth = MotionTruth.from_text(_need(cfg.truth, "truth").read_text())
    run = _run_dir(cfg, "eval")
    score = metrics.motion_fidelity(truth, clip)
    tc = metrics.temporal_consistency(clip)
    (run / "scores.tsv").write_text(
        "correlation\tmean_error\ttemporal_consistency\n"
        f"{score.correlation:.6f}\t{score.mean_error:.6f}\t{tc:.6f}\n"
    )
    print(f"correlation {score.correlation:.4f} mean_error {score.mean_error:.4f} temporal_consistency {tc:.4f}")
    return run


def reference_set(n: int, frames: int = 8, size: int = 32, seed: int = 0) -> list[tuple[VideoClip, MotionTruth]]:
    """Alternating pan / translate references with distinct x and y speeds."""
    velocities = [(2, 0), (0, 2), (-2, 1), (1, -2), (-2, 0), (0, -2), (2, -1), (-1, 2)]
    out = []
    for i in range(n):
        kind = "pan" if i % 2 == 0 else "translate"
        v = velocities[(i // 2 + 3 * (i % 2)) % len(velocities)]
        params = ClipParams(frames=frames, size=size, square=_square(size), velocity=v)
        out.append(synthgen.gen_clip(kind, params, seed=seed + 1000 + i))
    return out


def run_grid_point(cfg: RunConfig, model, schedule, axis: str, value, refs, seeds) -> list[tuple[MotionTruth, VideoClip]]:
    total, guided = cfg.steps()
    pairs = []
    for clip, truth in refs:
        mode, k, t_alpha, block = cfg.mode, cfg.k, cfg.t_alpha, cfg.block
        if axis == "k":
            k = int(value)
        elif axis == "t_alpha":
            t_alpha = int(value)
        elif axis == "block":
            block = str(value)
        elif axis == "mode":
            mode = str(value)
        if mode == "off":
            guidance = None
        elif mode == "inversion_1":
            guidance = extract_trajectory(model, schedule, clip, total, guided, k, block, cfg.extract_cond)
        else:
            guidance = _extract(cfg, model, schedule, clip, mode=mode, k=k, t_alpha=t_alpha, block=block)
        for s in seeds:
            sc = SamplerConfig(steps=total, guidance_steps=guided, cfg_scale=cfg.cfg_scale, lam=cfg.lam, mode=mode, seed=s)
            pairs.append((truth, sample(model, schedule, sc, clip.motion_class, guidance)))
    return pairs


def cmd_ablate(cfg: RunConfig) -> Path:
    model, _ = load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    schedule = NoiseSchedule()
    grid = [g for g in cfg.grid.split(",") if g]
    refs = reference_set(cfg.refs, cfg.frames, cfg.resolution, cfg.seed)
    seeds = list(range(cfg.seed, cfg.seed + cfg.seeds))
    run = _run_dir(cfg, "ablate")
    threads = max(1, int(os.environ.get("MCL_THREADS", "1")))
    cache = {}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(grid))) as pool:
            futs = {v: pool.submit(run_grid_point, cfg, model, schedule, cfg.axis, v, refs, seeds) for v in grid}
            cache = {v: f for v, f in futs.items()}
        rows = metrics.ablation_sweep(cfg.axis, grid, lambda v: cache[v].result())
    else:
        rows = metrics.ablation_sweep(cfg.axis, grid, lambda v: run_grid_point(cfg, model, schedule, cfg.axis, v, refs, seeds))
    path = metrics.write_table(run / f"ablate_{cfg.axis}.tsv", cfg.axis, rows)
    sys.stdout.write(path.read_text())
    return run


def frame_strip(clip: np.ndarray) -> np.ndarray:
    return np.concatenate([frame[0] for frame in clip], axis=1)


def cmd_demo(cfg: RunConfig) -> Path:
    model, _ = load_checkpoint(_need(cfg.checkpoint, "checkpoint"))
    schedule = NoiseSchedule()
    clip, truth = _reference(cfg)
    if truth is None:
        raise ConfigError("demo needs reference truth (use a generated reference or pass --truth)")
    total, guided = cfg.steps()
    run = _run_dir(cfg, "demo")
    strips = {"reference": clip.data}
    scores = {}
    for mode in ("off", "plain", "primary"):
        guidance = None if mode == "off" else _extract(cfg, model, schedule, clip, mode=mode)
        sc = SamplerConfig(steps=total, guidance_steps=guided, cfg_scale=cfg.cfg_scale, lam=cfg.lam, mode=mode, seed=cfg.seed)
        out = sample(model, schedule, sc, clip.motion_class, guidance)
        name = {"off": "unguided", "plain": "plain", "primary": "primary"}[mode]
        strips[name] = out.data
        scores[name] = metrics.motion_fidelity(truth, out).correlation
    for name, data in strips.items():
        io.write_pgm(run / f"strip_{name}.pgm", frame_strip(data))
    line = " ".join(f"{k}={v:.4f}" for k, v in scores.items())
    (run / "summary.txt").write_text(line + "\n")
    print(f"fidelity {line}")
    return run


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "demo": cmd_demo,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motionguide", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["off", "plain", "primary", "inversion_1"])
    p.add_argument("--k", type=int)
    p.add_argument("--t-alpha", type=int, dest="t_alpha")
    p.add_argument("--block")
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--cfg-scale", type=float, dest="cfg_scale")
    p.add_argument("--schedule", help="camera, object, or TOTAL,GUIDED")
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable), e.g. --set checkpoint=runs/x/checkpoint")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f'error kind=ConfigError message="--set expects KEY=VALUE, got {item}"', file=sys.stderr)
            return 2
        k, v = item.split("=", 1)
        overrides[k] = v
    for name in ("seed", "mode", "k", "t_alpha", "block", "lam", "cfg_scale", "schedule", "out"):
        val = getattr(args, name)
        if val is not None:
            overrides[name] = str(val)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config, overrides)
        run = COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, FileNotFoundError, ArithmeticError) as e:
        msg = str(e).replace('"', "'").replace("\n", " ")
        print(f'error kind={type(e).__name__} command={args.command} message="{msg}"', file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    print(f"run_dir={run}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
