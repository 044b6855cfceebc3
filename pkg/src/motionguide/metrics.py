"""Motion scores against synthetic ground truth.

Displacements come from an exhaustive integer-shift search maximizing the
zero-mean normalized cross-correlation over the overlap of consecutive
frames.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .synthgen import MotionTruth, VideoClip


class MetricError(ValueError):
    pass


def _frames(clip) -> np.ndarray:
    data = clip.data if isinstance(clip, VideoClip) else np.asarray(clip)
    if data.ndim == 4:
        data = data.mean(axis=1)
    if data.shape[0] < 2:
        raise MetricError("need at least two frames")
    return data.astype(np.float64)


def ncc(a: np.ndarray, b: np.ndarray) -> float | None:
    """Zero-mean NCC; ``None`` when either input is constant."""
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den < 1e-12:
        return None
    return float((a * b).sum() / den)


def _overlap(prev: np.ndarray, nxt: np.ndarray, dx: int, dy: int):
    # compare nxt(x, y) with prev(x - dx, y - dy)
    h, w = prev.shape
    ys, ye = max(0, dy), min(h, h + dy)
    xs, xe = max(0, dx), min(w, w + dx)
    return prev[ys - dy:ye - dy, xs - dx:xe - dx], nxt[ys:ye, xs:xe]


def _shift_order(r: int):
    shifts = [(dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)]
    # ties resolve to the smallest magnitude, then lexicographic (dx, dy)
    return sorted(shifts, key=lambda s: (s[0] ** 2 + s[1] ** 2, s[0], s[1]))


def best_shift(prev: np.ndarray, nxt: np.ndarray, radius: int) -> tuple[int, int, float | None]:
    best, best_score = (0, 0), None
    for dx, dy in _shift_order(radius):
        a, b = _overlap(prev, nxt, dx, dy)
        s = ncc(a, b)
        if s is None:
            continue
        if best_score is None or s > best_score + 1e-12:
            best, best_score = (dx, dy), s
    return best[0], best[1], best_score


@dataclass
class Displacements:
    shifts: np.ndarray  # (f-1, 2) int (dx, dy)
    scores: np.ndarray  # (f-1,) NCC at the chosen shift
    low_confidence: np.ndarray  # (f-1,) bool, set for degenerate frame pairs


def estimate_displacements(clip, radius: int | None = None) -> Displacements:
    frames = _frames(clip)
    f, h, _ = frames.shape
    r = h // 4 if radius is None else radius
    shifts = np.zeros((f - 1, 2), dtype=np.int64)
    scores = np.zeros(f - 1)
    low = np.zeros(f - 1, dtype=bool)
    for t in range(f - 1):
        dx, dy, s = best_shift(frames[t], frames[t + 1], r)
        if s is None:
            low[t] = True
            continue
        shifts[t] = (dx, dy)
        scores[t] = s
    return Displacements(shifts, scores, low)


@dataclass
class MotionScore:
    correlation: float
    mean_error: float
    track: np.ndarray  # estimated per-step (dx, dy)


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def motion_fidelity(reference: MotionTruth, generated, radius: int | None = None) -> MotionScore:
    """Correlation between the reference and estimated displacement sequences.

    x and y components are concatenated.  A generated clip with no
    displacement variance scores 0.
    """
    ref = np.asarray(reference.displacements)[1:].astype(np.float64)
    est = estimate_displacements(generated, radius)
    if est.shifts.shape[0] != ref.shape[0]:
        raise MetricError(f"frame count mismatch: reference {ref.shape[0] + 1}, generated {est.shifts.shape[0] + 1}")
    rv = np.concatenate([ref[:, 0], ref[:, 1]])
    if rv.std() == 0:
        raise MetricError("reference displacements have zero variance; use the static-clip check instead")
    ev = np.concatenate([est.shifts[:, 0], est.shifts[:, 1]]).astype(np.float64)
    err = float(np.abs(ref - est.shifts).sum(axis=1).mean())
    return MotionScore(_corr(rv, ev), err, est.shifts)


def temporal_consistency(clip, radius: int | None = None) -> float:
    frames = _frames(clip)
    est = estimate_displacements(frames, radius)
    vals = []
    for t in range(frames.shape[0] - 1):
        if est.low_confidence[t]:
            vals.append(1.0)
            continue
        a, b = _overlap(frames[t], frames[t + 1], *est.shifts[t])
        s = ncc(a, b)
        vals.append(1.0 if s is None else s)
    return float(np.mean(vals))


@dataclass
class SweepRow:
    value: str
    fidelity: float
    consistency: float
    seconds: float
    error: str = ""


def ablation_sweep(
    axis: str,
    grid: Sequence,
    run: Callable[[object], list[tuple[MotionTruth, VideoClip]]],
) -> list[SweepRow]:
    """One row per grid point.

    ``run(value)`` produces (reference truth, generated clip) pairs for that
    grid point; fidelity and consistency are averaged over them.  A failing
    grid point yields a row with ``error`` set instead of aborting the sweep.
    """
    if axis not in ("k", "t_alpha", "block", "mode"):
        raise ValueError(f"unknown ablation axis {axis!r}")
    rows = []
    for value in grid:
        start = time.perf_counter()
        try:
            pairs = run(value)
            fid = float(np.mean([motion_fidelity(tr, clip).correlation for tr, clip in pairs]))
            con = float(np.mean([temporal_consistency(clip) for _, clip in pairs]))
            rows.append(SweepRow(str(value), fid, con, time.perf_counter() - start))
        except Exception as e:  # noqa: BLE001 - flagged in the table, not swallowed
            rows.append(SweepRow(str(value), float("nan"), float("nan"), time.perf_counter() - start, f"{type(e).__name__}: {e}"))
    return rows


def format_table(axis: str, rows: Sequence[SweepRow]) -> str:
    lines = [f"{axis}\tfidelity\tconsistency\tseconds\terror"]
    for r in rows:
        lines.append(f"{r.value}\t{r.fidelity:.4f}\t{r.consistency:.4f}\t{r.seconds:.2f}\t{r.error}")
    if any(r.error for r in rows):
        lines.append("# partial: some grid points failed")
    return "\n".join(lines) + "\n"


def write_table(path, axis: str, rows: Sequence[SweepRow]) -> Path:
    path = Path(path)
    path.write_text(format_table(axis, rows))
    return path
