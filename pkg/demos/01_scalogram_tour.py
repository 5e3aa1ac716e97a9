"""Render one synthetic note as a Morse scalogram and as an STFT spectrogram.

Run:  python3 demos/01_scalogram_tour.py [out_dir]

Writes two PNGs and prints where the energy sits in each representation.
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from scalosiam.audio import PRESETS, synth_instrument
from scalosiam.tfr import MorseParams, cwt_scalogram, render_image, stft_spectrogram

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# A clarinet-like tone: odd harmonics only, steady envelope.
clip = synth_instrument(PRESETS["clarinetish"], 220.0, 1.0, 8000, seed=0)

# The CWT keeps constant-Q resolution: rows are log-spaced in frequency.
scal = cwt_scalogram(clip, MorseParams(beta=20, gamma=3, voices_per_octave=10))
print(f"scalogram: {scal.magnitudes.shape[0]} scales from {scal.scale_axis[0]:.1f} "
      f"to {scal.scale_axis[-1]:.1f} Hz")
ridge = scal.scale_axis[np.argmax(scal.magnitudes[:, 4000])]
print(f"  strongest scale mid-clip: {ridge:.1f} Hz (fundamental 220 Hz)")

# The STFT has linear bins: fine at the top, coarse at the bottom.
spec = stft_spectrogram(clip, window_len=256, hop=64)
print(f"spectrogram: {spec.magnitudes.shape[0]} bins of {spec.scale_axis[1]:.2f} Hz, "
      f"{spec.magnitudes.shape[1]} frames")

for name, matrix in (("scalogram", scal), ("spectrogram", spec)):
    img = render_image(matrix, size=224)
    # flip so low frequencies sit at the bottom of the picture
    rgb = np.round(255 * img.pixels[::-1]).astype(np.uint8)
    Image.fromarray(rgb).save(out / f"{name}.png")
    print(f"wrote {out / name}.png")
