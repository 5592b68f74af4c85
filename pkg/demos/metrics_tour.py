"""How each vessel metric reacts to a typical segmentation error.

    python3 demos/metrics_tour.py

One synthetic label is compared with corrupted copies of itself: thickened,
thinned, broken into pieces, and with isolated false-positive specks.
"""

import numpy as np
from scipy import ndimage

from attukan.data import SynthConfig, synth_sample
from attukan.metrics import full_report

label = synth_sample(SynthConfig(size=128, seed=4)).label.astype(bool)
rng = np.random.default_rng(0)

thick = ndimage.binary_dilation(label)
thin = ndimage.binary_erosion(label) | (label & ~ndimage.binary_erosion(label) & (rng.uniform(size=label.shape) < 0.3))
broken = label.copy()
for y, x in zip(*np.nonzero(label)):
    if (y * 7 + x * 3) % 97 == 0:
        broken[max(0, y - 2) : y + 3, max(0, x - 2) : x + 3] = False
specks = label | (rng.uniform(size=label.shape) < 0.01)

cases = {"identical": label, "thickened": thick, "thinned": thin, "broken": broken, "specks": specks}
cols = ("f1", "miou", "hd95", "c", "a", "l", "f")
print(f"{'case':10s} " + " ".join(f"{c:>7s}" for c in cols))
for name, pred in cases.items():
    r = full_report(pred.astype(float), label)
    vals = [getattr(r, c) for c in cols]
    print(f"{name:10s} " + " ".join("    n/a" if v is None else f"{v:7.3f}" for v in vals))
print(f"\nlabel: {label.sum()} px, {ndimage.label(label, np.ones((3, 3)))[1]} component(s)")
