"""How much motion does the recorded attention actually carry?

    python walkthroughs/attention_probe.py CHECKPOINT_DIR

For a square moving right, tokens on its path see two kinds of frame (square
present or absent).  An attention map that tracks content gives more weight to
frames in the same state as the query frame.  The ratio printed per noise level
is that same-state weight over the other-state weight; 1.0 means the map is
blind to content at that level.
"""

import sys

import numpy as np

from motionguide import synthgen
from motionguide.diffusion import NoiseSchedule
from motionguide.guidance import extract_representation
from motionguide.synthgen import ClipParams
from motionguide.training import load_checkpoint

model, _ = load_checkpoint(sys.argv[1])
cfg = model.config
schedule = NoiseSchedule()
clip, _ = synthgen.gen_clip("translate", ClipParams(size=cfg.resolution, velocity=(2, 0)), seed=5)

side = cfg.block_size("up_block.1")
cell = cfg.resolution // side
frames = clip.data[:, 0]
changed = np.abs(frames - np.median(frames, axis=0)) > 0.3
occupied = changed.reshape(cfg.frames, side, cell, side, cell).mean(axis=(2, 4)).reshape(cfg.frames, -1) > 0.5

for t_alpha in (100, 200, 400, 600, 800):
    rep = extract_representation(model, schedule, clip, t_alpha=t_alpha, k=cfg.frames, mode="plain")
    same, other = [], []
    for p in range(side * side):
        state = occupied[:, p]
        if state.all() or not state.any():
            continue
        for i in range(cfg.frames):
            same.append(rep.L[p, i, state == state[i]].mean())
            other.append(rep.L[p, i, state != state[i]].mean())
    top1 = rep.L.max(-1).mean()
    print(f"t={t_alpha:4d}  same/other {np.mean(same) / np.mean(other):.3f}  mean top-1 weight {top1:.3f} (uniform {1 / cfg.frames:.3f})")
