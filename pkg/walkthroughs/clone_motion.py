"""End to end: train a small denoiser, lift motion from a reference, resample.

    python walkthroughs/clone_motion.py [train_steps] [out_dir]

With the default 300 steps this finishes in about two minutes and the model
is far too weak to follow the reference; pass 6000 to match the acceptance
budget (about 20 minutes on one core).
"""

import sys
from pathlib import Path

import numpy as np

from motionguide import io, metrics, synthgen
from motionguide.denoiser import Denoiser, DenoiserConfig
from motionguide.diffusion import NoiseSchedule, SamplerConfig, sample
from motionguide.guidance import export_heatmap, extract_representation
from motionguide.synthgen import ClipParams
from motionguide.training import moving_average, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path(sys.argv[2] if len(sys.argv) > 2 else "walkthrough-out")
out.mkdir(parents=True, exist_ok=True)

# 256 clips of each kind (translate, pan, rotate, static) with random textures.
items = synthgen.gen_dataset(256, seed=0)
data = np.stack([clip.data for clip, _ in items])
classes = np.array([clip.motion_class for clip, _ in items])
print(f"corpus: {data.shape[0]} clips of {data.shape[1:]} ")

model = Denoiser(DenoiserConfig())
schedule = NoiseSchedule()
losses = train(model, data, classes, schedule, steps, snr_gamma=5.0)
ma = moving_average(losses, min(200, len(losses)))
print(f"loss (moving average) {ma[0]:.4f} -> {ma[-1]:.4f}")

# The reference: the camera pans right by 2 px per frame and down by 1.
ref, truth = synthgen.gen_clip("pan", ClipParams(velocity=(2, 1)), seed=42)

# One noising to t=400 and one denoiser call give the attention map of up_block.1;
# keeping only the strongest entry per row (k=1) is the motion representation.
rep = extract_representation(model, schedule, ref, t_alpha=400, k=1, block="up_block.1")
export_heatmap(out / "intensity.pgm", rep)
print(f"representation: {rep.L.shape[0]} positions x {rep.L.shape[1]} frames, k={rep.k}")

# lambda=2000 overwhelms the noise estimate of a model this size; 200 keeps
# the guidance term comparable to it.
strips = {"reference": ref.data}
for mode in ("off", "plain", "primary"):
    guide = None if mode == "off" else extract_representation(model, schedule, ref, mode=mode)
    clip = sample(model, schedule, SamplerConfig(mode=mode, lam=200.0, seed=0), ref.motion_class, guide)
    score = metrics.motion_fidelity(truth, clip)
    energies = clip.meta["energies"]
    trend = f", energy {energies[0]:.3f} -> {energies[-1]:.3f}" if energies else ""
    print(f"{mode:8s} fidelity {score.correlation:+.3f}, estimated shifts {score.track.tolist()}{trend}")
    strips[mode] = clip.data

for name, clip in strips.items():
    io.write_pgm(out / f"{name}.pgm", np.concatenate([f[0] for f in clip], axis=1))
print(f"frame strips and heat map written to {out}/")
