"""Procedural clips with exact ground-truth motion.

Four motion kinds: ``translate`` (a textured square over a textured
background), ``pan`` (the whole view shifts, a camera-motion analog),
``rotate`` (a patterned disc spins in place) and ``static``.  All
displacements are integer pixels so registration against the truth is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io

KINDS = ("translate", "pan", "rotate", "static")
CLASS_IDS = {k: i + 1 for i, k in enumerate(KINDS)}  # 0 is the null token


class TrajectoryError(ValueError):
    pass


@dataclass
class VideoClip:
    data: np.ndarray  # (f, ch, h, w), values in [-1, 1]
    clip_id: str = ""
    motion_class: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass
class MotionTruth:
    kind: str
    displacements: np.ndarray  # (f, 2) int: (dx, dy) from frame t-1 to t; row 0 is zero
    track: np.ndarray | None = None  # (f, 2) object centroid (x, y), if any

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.displacements, axis=0)

    def to_text(self) -> str:
        return "".join(f"{t} {dx} {dy}\n" for t, (dx, dy) in enumerate(self.displacements))

    @classmethod
    def from_text(cls, text: str, kind: str = "unknown") -> "MotionTruth":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        disp = np.array([[int(r[1]), int(r[2])] for r in rows], dtype=np.int64)
        return cls(kind, disp)


@dataclass(frozen=True)
class ClipParams:
    frames: int = 8
    size: int = 32
    square: int = 10
    velocity: tuple[int, int] = (1, 0)  # px/frame for translate and pan
    angular_rate: float = 20.0  # degrees/frame for rotate
    start: tuple[int, int] | None = None  # top-left of the square; centered on the path if None


def smooth_texture(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Unit-range smoothed noise."""
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    tex -= tex.mean()
    return tex / (np.abs(tex).max() + 1e-12)


def _background(rng, shape, amp: float = 0.25) -> np.ndarray:
    return -0.35 + amp * smooth_texture(rng, shape, 2.0)


def _translate(p: ClipParams, rng) -> tuple[np.ndarray, MotionTruth]:
    f, n, s = p.frames, p.size, p.square
    vx, vy = p.velocity
    if p.start is None:
        span_x, span_y = vx * (f - 1), vy * (f - 1)
        x0 = (n - s - span_x) // 2
        y0 = (n - s - span_y) // 2
    else:
        x0, y0 = p.start
    xs = x0 + vx * np.arange(f)
    ys = y0 + vy * np.arange(f)
    if xs.min() < 0 or ys.min() < 0 or xs.max() + s > n or ys.max() + s > n:
        raise TrajectoryError(f"square leaves the {n}x{n} frame for velocity {p.velocity}")
    bg = _background(rng, (n, n))
    patch = 0.55 + 0.4 * smooth_texture(rng, (s, s), 1.0)
    clip = np.empty((f, 1, n, n), dtype=np.float32)
    for t in range(f):
        frame = bg.copy()
        frame[ys[t]:ys[t] + s, xs[t]:xs[t] + s] = patch
        clip[t, 0] = frame
    disp = np.zeros((f, 2), dtype=np.int64)
    disp[1:] = (vx, vy)
    track = np.stack([xs + (s - 1) / 2.0, ys + (s - 1) / 2.0], axis=1)
    return clip, MotionTruth("translate", disp, track)


def _pan(p: ClipParams, rng) -> tuple[np.ndarray, MotionTruth]:
    f, n = p.frames, p.size
    vx, vy = p.velocity
    mx, my = abs(vx) * (f - 1), abs(vy) * (f - 1)
    canvas = 0.9 * smooth_texture(rng, (n + my, n + mx), 2.5)
    # content moves by +v per frame, so the viewing window moves by -v
    ox = mx if vx > 0 else 0
    oy = my if vy > 0 else 0
    clip = np.empty((f, 1, n, n), dtype=np.float32)
    for t in range(f):
        cx, cy = ox - vx * t, oy - vy * t
        clip[t, 0] = canvas[cy:cy + n, cx:cx + n]
    disp = np.zeros((f, 2), dtype=np.int64)
    disp[1:] = (vx, vy)
    return clip, MotionTruth("pan", disp)


def _rotate(p: ClipParams, rng) -> tuple[np.ndarray, MotionTruth]:
    f, n = p.frames, p.size
    bg = _background(rng, (n, n))
    r = n * 0.35
    yy, xx = np.mgrid[0:n, 0:n] - (n - 1) / 2.0
    inside = xx ** 2 + yy ** 2 <= r ** 2
    pattern = smooth_texture(rng, (n, n), 1.5)
    pattern = np.where(np.abs(xx) < 2, 0.9, 0.2 + 0.5 * pattern)  # a bar makes the spin visible
    clip = np.empty((f, 1, n, n), dtype=np.float32)
    for t in range(f):
        rot = ndimage.rotate(pattern, -p.angular_rate * t, reshape=False, order=0, mode="nearest")
        clip[t, 0] = np.where(inside, rot, bg)
    disp = np.zeros((f, 2), dtype=np.int64)
    c = (n - 1) / 2.0
    return clip, MotionTruth("rotate", disp, np.full((f, 2), c))


def _static(p: ClipParams, rng) -> tuple[np.ndarray, MotionTruth]:
    f, n = p.frames, p.size
    frame = 0.9 * smooth_texture(rng, (n, n), 2.5)
    clip = np.repeat(frame[None, None].astype(np.float32), f, axis=0)
    return clip, MotionTruth("static", np.zeros((f, 2), dtype=np.int64))


_RENDER = {"translate": _translate, "pan": _pan, "rotate": _rotate, "static": _static}


def gen_clip(kind: str, params: ClipParams | None = None, seed: int = 0, clip_id: str | None = None):
    """Render one clip; returns ``(VideoClip, MotionTruth)``."""
    if kind not in _RENDER:
        raise ValueError(f"unknown motion kind {kind!r}; expected one of {KINDS}")
    params = params or ClipParams()
    rng = np.random.default_rng(seed)
    data, truth = _RENDER[kind](params, rng)
    data = np.clip(data, -1.0, 1.0).astype(np.float32)
    cid = clip_id or f"{kind}-{seed}"
    return VideoClip(data, cid, CLASS_IDS[kind]), truth


_VELOCITIES = [(vx, vy) for vx in (-2, -1, 0, 1, 2) for vy in (-2, -1, 0, 1, 2) if (vx, vy) != (0, 0)]


def random_params(kind: str, rng: np.random.Generator, frames: int = 8, size: int = 32) -> ClipParams:
    """Draw motion parameters that keep everything in frame."""
    if kind in ("translate", "pan"):
        vx, vy = _VELOCITIES[rng.integers(len(_VELOCITIES))]
        return ClipParams(frames=frames, size=size, velocity=(int(vx), int(vy)))
    if kind == "rotate":
        rate = float(rng.choice([-30.0, -20.0, 20.0, 30.0]))
        return ClipParams(frames=frames, size=size, angular_rate=rate)
    return ClipParams(frames=frames, size=size)


def gen_dataset(count_per_class: int, seed: int = 0, frames: int = 8, size: int = 32):
    """Balanced in-memory dataset: list of (clip, truth), classes interleaved."""
    rng = np.random.default_rng(seed)
    items = []
    for n in range(count_per_class):
        for kind in KINDS:
            params = random_params(kind, rng, frames, size)
            clip_seed = int(rng.integers(2**31))
            items.append(gen_clip(kind, params, clip_seed, clip_id=f"{kind}-{n:05d}"))
    return items


def write_dataset(out_dir, items) -> Path:
    """Write clips (MCLT), truths (``t dx dy`` text) and a manifest.

    Manifest lines are ``clip_id class_id clip_file truth_file``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for clip, truth in items:
        cf, tf = f"{clip.clip_id}.mclt", f"{clip.clip_id}.truth.txt"
        io.save_tensor(out_dir / cf, clip.data)
        (out_dir / tf).write_text(truth.to_text())
        lines.append(f"{clip.clip_id} {clip.motion_class} {cf} {tf}\n")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(lines))
    return manifest


def read_dataset(out_dir):
    out_dir = Path(out_dir)
    items = []
    for line in (out_dir / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        cid, cls, cf, tf = line.split()
        kind = KINDS[int(cls) - 1]
        data = io.load_tensor(out_dir / cf)
        truth = MotionTruth.from_text((out_dir / tf).read_text(), kind)
        items.append((VideoClip(data, cid, int(cls)), truth))
    return items
