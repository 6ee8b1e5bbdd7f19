"""Walk through the frontend and the model on one synthetic clip.

    python demos/01_frontend_and_model.py
"""
import numpy as np

from singdc.audio import multi_res_spectrogram
from singdc.dataset import CLASSES, synth_clip
from singdc.model import ModelConfig, Placement, build_model, count_params

# A 3 s vibrato clip at 44.1 kHz, turned into three stacked log-magnitude STFTs.
clip = synth_clip(CLASSES.index("vibrato"), seed=0)
spec = multi_res_spectrogram(clip)
print("clip samples", clip.shape, "-> spectrogram", spec.shape)
for ch, win in enumerate((2048, 1024, 512)):
    print(f"  window {win:4d}: strongest bin {spec[ch].mean(axis=1).argmax()}")

# Parameter cost of each deformable placement.
base = count_params(build_model(ModelConfig(placement="none"))).total
for p in Placement:
    total = count_params(build_model(ModelConfig(placement=p))).total
    print(f"{p.value:5s} {total:9,d}  (+{total - base:,d})")

# Offsets start at zero, so a fresh deformable model behaves like plain convolution.
late = build_model(ModelConfig(placement="late"), seed=0)
logits = late.forward(spec[None])
print("eval logits", np.round(logits[0], 3))
