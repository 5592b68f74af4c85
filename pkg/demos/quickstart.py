"""Train a small model on synthetic vessels, score the held-out images and write an overlay.

    python3 demos/quickstart.py [out_dir]

Runs in well under a minute on one core.
"""

import sys
from pathlib import Path

import numpy as np

from attukan.config import parse_config
from attukan.data import write_image
from attukan.metrics import binarize
from attukan.network import parameter_count
from attukan.render import overlay
from attukan.training import evaluate, predict_full, train

CONFIG = """
model.channels = 4, 8, 16, 32, 64
synth.size = 64
data.n_images = 8
train.patch_size = 32
train.patches_per_image = 8
train.batch_size = 8
train.epochs = 8
train.val_fraction = 0.25
"""

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart")
cfg = parse_config(CONFIG)
res = train(cfg, out_dir=out, verbose=True)
print(f"parameters: {parameter_count(res.model):,}")
for h in res.history:
    terms = "  ".join(f"{k} {v:.3f}" for k, v in h["terms"].items())
    print(f"epoch {h['epoch']:2d}  loss {h['loss']:.3f}  [{terms}]  val_f1 {h['val_f1']:.3f}")

patch = cfg.train.patch_size
ev = evaluate(lambda s: predict_full(res.model, s.image, patch), res.split.val)
for row in ev["images"]:
    print(f"{row['id']}: f1 {row['f1']:.3f}  miou {row['miou']:.3f}  auc {row['auc']:.3f}  hd95 {row['hd95']}")

s = res.split.val[0]
prob = predict_full(res.model, s.image, patch)
write_image(out / f"{s.id}_overlay.ppm", overlay(s.image, binarize(prob), s.label))
write_image(out / f"{s.id}_prob.pgm", prob)
print(f"wrote {out}/{s.id}_overlay.ppm (green TP, yellow FP, red FN)")
print(f"foreground fraction {s.label.mean():.3f}, predicted {np.mean(prob >= 0.5):.3f}")
