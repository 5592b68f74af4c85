"""Confusion overlays: TP green, FP yellow, FN red, TN shows the grayscale input."""

from __future__ import annotations

import numpy as np

TP_RGB = (0, 255, 0)
FP_RGB = (255, 255, 0)
FN_RGB = (255, 0, 0)


def confusion_classes(pred_bin, target, mask=None) -> np.ndarray:
    """Per-pixel class code: 0 TN, 1 TP, 2 FP, 3 FN; -1 outside ``mask``."""
    p = np.asarray(pred_bin).astype(bool)
    t = np.asarray(target).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != label shape {t.shape}")
    cls = np.zeros(p.shape, dtype=np.int8)
    cls[p & t] = 1
    cls[p & ~t] = 2
    cls[~p & t] = 3
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        if m.shape != p.shape:
            raise ValueError(f"mask shape {m.shape} != label shape {p.shape}")
        cls[~m] = -1
    return cls


def overlay(gray, pred_bin, target, mask=None) -> np.ndarray:
    """[H, W, 3] uint8 overlay. Pixels outside ``mask`` keep the grayscale input like TN."""
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3 and g.shape[0] == 1:
        g = g[0]
    cls = confusion_classes(pred_bin, target, mask)
    if g.shape != cls.shape:
        raise ValueError(f"image shape {g.shape} != label shape {cls.shape}")
    v = np.round(np.clip(g, 0.0, 1.0) * 255).astype(np.uint8)
    out = np.repeat(v[..., None], 3, axis=-1)
    for code, rgb in ((1, TP_RGB), (2, FP_RGB), (3, FN_RGB)):
        out[cls == code] = rgb
    return out
