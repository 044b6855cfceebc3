"""Small video noise-prediction network with recordable temporal attention.

Layout (default 32x32 input, two levels)::

    frames -> space_to_depth(4) -> conv_in
    down.0 (8x8)    ResBlock                       -> skip0
    down.1 (4x4)    avgpool, ResBlock              -> skip1
    mid   (4x4)     ResBlock
    up_block.0 (4x4)   concat skip1, ResBlock, TemporalAttention, upsample
    up_block.1 (8x8)   concat skip0, ResBlock, TemporalAttention
    norm, silu, conv_out -> depth_to_space

Spatial layers see every frame independently; the temporal-attention blocks
are the only place frames exchange information, apart from a per-frame
index embedding added to the time/class conditioning.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

NULL_CLASS = 0


class ConfigError(ValueError):
    pass


def _pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class DenoiserConfig:
    frames: int = 8
    channels: int = 1
    resolution: int = 32
    patch: int = 4
    width: int = 32
    levels: int = 2
    time_dim: int = 64
    vocab: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError(f"frames must be >= 2, got {self.frames}")
        if self.levels < 1:
            raise ConfigError("need at least one level")
        for size in self.level_sizes():
            if size < 2 or not _pow2(size):
                raise ConfigError(f"level spatial size {size} must be a power of two >= 2")
        if self.vocab < 2:
            raise ConfigError("vocab must include the null token and one class")

    def level_sizes(self) -> list[int]:
        base = self.resolution // self.patch
        return [base >> lvl for lvl in range(self.levels)]

    def level_widths(self) -> list[int]:
        return [self.width * (lvl + 1) for lvl in range(self.levels)]

    @property
    def block_names(self) -> list[str]:
        return [f"up_block.{i}" for i in range(self.levels)]

    def block_size(self, name: str) -> int:
        """Spatial side length of the named up block (up_block.0 is the coarsest)."""
        i = self.block_names.index(name)
        return self.level_sizes()[self.levels - 1 - i]

    def to_manifest(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_manifest(cls, items: dict[str, str]) -> "DenoiserConfig":
        kw = {f.name: int(items[f.name]) for f in fields(cls) if f.name in items}
        return cls(**kw)


@dataclass
class AttentionRecord:
    """Temporal attention map of one block; ``attn`` has dims (b*h*w, f, f)."""

    block: str
    t: int
    attn: Tensor


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def frame_encoding(frames: int, dim: int) -> np.ndarray:
    pos = np.arange(frames, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / max(half, 1))
    args = pos[:, None] * freqs[None, :]
    enc = np.zeros((frames, dim))
    enc[:, 0:2 * half:2] = np.sin(args)
    enc[:, 1:2 * half:2] = np.cos(args)
    return enc


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class Denoiser:
    """Noise predictor eps(z_t, c, t) over clips of dims (b, f, ch, h, w)."""

    def __init__(self, config: DenoiserConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(config.seed)
        self._build()

    # ------------------------------------------------------------- params

    def _p(self, name: str, shape: Sequence[int], init: str = "normal", fan_in: int | None = None):
        if init == "zeros":
            arr = np.zeros(shape)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            fan = fan_in if fan_in is not None else int(np.prod(shape[1:])) or 1
            arr = self._rng.standard_normal(shape) / math.sqrt(fan)
        self.params[name] = Tensor(arr.astype(np.float32), name=name)

    def _res_params(self, prefix: str, cin: int, cout: int) -> None:
        e = self.config.time_dim
        self._p(f"{prefix}.norm1.g", (cin,), "ones")
        self._p(f"{prefix}.norm1.b", (cin,), "zeros")
        self._p(f"{prefix}.conv1.w", (cout, cin, 3, 3))
        self._p(f"{prefix}.conv1.b", (cout,), "zeros")
        self._p(f"{prefix}.emb.w", (e, cout), fan_in=e)
        self._p(f"{prefix}.emb.b", (cout,), "zeros")
        self._p(f"{prefix}.norm2.g", (cout,), "ones")
        self._p(f"{prefix}.norm2.b", (cout,), "zeros")
        self._p(f"{prefix}.conv2.w", (cout, cout, 3, 3))
        self.params[f"{prefix}.conv2.w"].data *= 0.1
        self._p(f"{prefix}.conv2.b", (cout,), "zeros")
        if cin != cout:
            self._p(f"{prefix}.skip.w", (cout, cin, 1, 1))
            self._p(f"{prefix}.skip.b", (cout,), "zeros")

    def _attn_params(self, prefix: str, c: int) -> None:
        self._p(f"{prefix}.norm.g", (c,), "ones")
        self._p(f"{prefix}.norm.b", (c,), "zeros")
        for k in ("q", "k", "v"):
            self._p(f"{prefix}.{k}.w", (c, c), fan_in=c)
        # keys start equal to queries so the initial logits measure feature
        # similarity between frames; random independent q/k train to uniform maps
        self.params[f"{prefix}.k.w"].data = self.params[f"{prefix}.q.w"].data.copy()
        self._p(f"{prefix}.out.w", (c, c), fan_in=c)
        self.params[f"{prefix}.out.w"].data *= 0.1
        self._p(f"{prefix}.out.b", (c,), "zeros")

    def _build(self) -> None:
        cfg = self.config
        widths = cfg.level_widths()
        cin = cfg.channels * cfg.patch * cfg.patch
        e = cfg.time_dim
        self._p("time.l1.w", (e, e), fan_in=e)
        self._p("time.l1.b", (e,), "zeros")
        self._p("time.l2.w", (e, e), fan_in=e)
        self._p("time.l2.b", (e,), "zeros")
        self._p("class.emb", (cfg.vocab, e), fan_in=1)
        self._p("frame.w", (e, e), fan_in=e)
        self._p("conv_in.w", (widths[0], cin, 3, 3))
        self._p("conv_in.b", (widths[0],), "zeros")
        prev = widths[0]
        for lvl, w in enumerate(widths):
            self._res_params(f"down.{lvl}", prev, w)
            prev = w
        self._res_params("mid", prev, prev)
        for i in range(cfg.levels):
            lvl = cfg.levels - 1 - i
            skip = widths[lvl]
            self._res_params(f"up_block.{i}.res", prev + skip, widths[lvl])
            prev = widths[lvl]
            self._attn_params(f"up_block.{i}.attn", prev)
        self._p("out.norm.g", (prev,), "ones")
        self._p("out.norm.b", (prev,), "zeros")
        self._p("conv_out.w", (cin, prev, 3, 3))
        self.params["conv_out.w"].data *= 0.1
        self._p("conv_out.b", (cin,), "zeros")
        self._frame_pe = {c: frame_encoding(cfg.frames, c).astype(np.float32) for c in set(widths) | {e}}

    def parameters(self) -> Iterable[Tensor]:
        return self.params.values()

    def requires_grad_(self, flag: bool) -> "Denoiser":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------- blocks

    def _res(self, prefix: str, x: Tensor, emb: Tensor) -> Tensor:
        P = self.params
        h = T.group_norm(x, _groups(x.shape[1]), P[f"{prefix}.norm1.g"], P[f"{prefix}.norm1.b"])
        h = T.conv2d(T.silu(h), P[f"{prefix}.conv1.w"], P[f"{prefix}.conv1.b"])
        h = T.add_channel(h, T.linear(emb, P[f"{prefix}.emb.w"], P[f"{prefix}.emb.b"]))
        h = T.group_norm(h, _groups(h.shape[1]), P[f"{prefix}.norm2.g"], P[f"{prefix}.norm2.b"])
        h = T.conv2d(T.silu(h), P[f"{prefix}.conv2.w"], P[f"{prefix}.conv2.b"])
        if f"{prefix}.skip.w" in P:
            x = T.conv2d(x, P[f"{prefix}.skip.w"], P[f"{prefix}.skip.b"], pad=0)
        return T.add(x, h)

    def temporal_attention(self, prefix: str, x: Tensor, b: int) -> tuple[Tensor, Tensor]:
        """Self-attention along frames with spatial positions merged into the batch.

        ``x`` has dims (b*f, c, h, w).  Returns the output (same dims) and the
        attention map with dims (b*h*w, f, f).
        """
        P = self.params
        n, c, hh, ww = x.shape
        f = n // b
        hw = hh * ww
        seq = T.reshape(x, (b, f, c, hw))
        seq = T.transpose(seq, (0, 3, 1, 2))  # (b, hw, f, c)
        h = T.layer_norm_last(seq, P[f"{prefix}.norm.g"], P[f"{prefix}.norm.b"])
        q = T.linear(h, P[f"{prefix}.q.w"])
        k = T.linear(h, P[f"{prefix}.k.w"])
        # frame order enters through the values only, so identical frames
        # still attend uniformly
        v = T.linear(T.add_const(h, self._frame_pe[c]), P[f"{prefix}.v.w"])
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(c))
        attn = T.softmax_last(logits)
        o = T.linear(T.matmul(attn, v), P[f"{prefix}.out.w"], P[f"{prefix}.out.b"])
        o = T.add(seq, o)
        o = T.transpose(o, (0, 2, 3, 1))  # (b, f, c, hw)
        out = T.reshape(o, (n, c, hh, ww))
        return out, T.reshape(attn, (b * hw, f, f))

    # ------------------------------------------------------------- forward

    def _embedding(self, cond: np.ndarray, t: np.ndarray) -> Tensor:
        """Per-frame conditioning vectors, dims (b*f, time_dim).

        Each frame gets its own index added here.  Without it every layer
        would be equivariant to frame permutations and ordered motion could
        not be generated at all.
        """
        P = self.params
        cfg = self.config
        b = len(cond)
        temb = Tensor(timestep_embedding(t, cfg.time_dim))
        h = T.silu(T.linear(temb, P["time.l1.w"], P["time.l1.b"]))
        h = T.linear(h, P["time.l2.w"], P["time.l2.b"])
        h = T.add(h, T.embed(P["class.emb"], cond))
        fe = T.linear(Tensor(self._frame_pe[cfg.time_dim]), P["frame.w"])
        h = T.add(T.repeat_rows(h, cfg.frames), T.concat([fe] * b, axis=0))
        return T.silu(h)

    def check_blocks(self, names: Iterable[str]) -> None:
        unknown = sorted(set(names) - set(self.config.block_names))
        if unknown:
            raise ConfigError(f"unknown block(s) {unknown}; valid: {self.config.block_names}")

    def __call__(self, z_t, cond, t, record: Iterable[str] = ()) -> tuple[Tensor, list[AttentionRecord]]:
        return self.predict_noise(z_t, cond, t, record)

    def predict_noise(
        self, z_t, cond, t, record: Iterable[str] = ()
    ) -> tuple[Tensor, list[AttentionRecord]]:
        """Predict the noise in ``z_t`` (b, f, ch, h, w).

        ``cond`` and ``t`` are an int or one value per batch item.  Attention
        maps are returned only for block names listed in ``record``.
        """
        cfg = self.config
        record = set(record)
        self.check_blocks(record)
        z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z.ndim != 5 or tuple(z.shape[1:]) != (cfg.frames, cfg.channels, cfg.resolution, cfg.resolution):
            raise T.ShapeError(
                f"predict_noise: input dims {z.dims} do not match model "
                f"(b, {cfg.frames}, {cfg.channels}, {cfg.resolution}, {cfg.resolution})"
            )
        b, f = z.shape[:2]
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (b,))
        tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        if cond.min() < 0 or cond.max() >= cfg.vocab:
            raise ConfigError(f"condition ids must be < vocab {cfg.vocab}")
        P = self.params
        emb = self._embedding(cond, tt)

        x = T.reshape(z, (b * f, cfg.channels, cfg.resolution, cfg.resolution))
        x = T.space_to_depth(x, cfg.patch)
        h = T.conv2d(x, P["conv_in.w"], P["conv_in.b"])
        skips = []
        for lvl in range(cfg.levels):
            if lvl > 0:
                h = T.avgpool2x(h)
            h = self._res(f"down.{lvl}", h, emb)
            skips.append(h)
        h = self._res("mid", h, emb)
        records = []
        for i in range(cfg.levels):
            name = f"up_block.{i}"
            h = T.concat([h, skips.pop()], axis=1)
            h = self._res(f"{name}.res", h, emb)
            h, attn = self.temporal_attention(f"{name}.attn", h, b)
            if name in record:
                records.append(AttentionRecord(name, int(tt[0]), attn))
            if i < cfg.levels - 1:
                h = T.upsample2x(h)
        h = T.group_norm(h, _groups(h.shape[1]), P["out.norm.g"], P["out.norm.b"])
        h = T.conv2d(T.silu(h), P["conv_out.w"], P["conv_out.b"])
        h = T.depth_to_space(h, cfg.patch)
        eps = T.reshape(h, (b, f, cfg.channels, cfg.resolution, cfg.resolution))
        return eps, records
