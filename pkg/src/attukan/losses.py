"""Segmentation losses and the label-guided pixel-wise contrastive term.

All losses take probability maps (after the sigmoid head) and binary targets
of the same shape, and return scalar tensors on the active tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.tensor import Tensor, as_tensor, no_tape

BCE_CLAMP = 1e-7
SMOOTH = 1e-6
LPCL_MODES = ("label_masked", "view_only")


@dataclass(frozen=True)
class LossWeights:
    bce: float = 0.8
    jaccard: float = 0.2
    dice: float = 1.0
    lpcl: float = 0.3

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {"bce": self.bce, "jaccard": self.jaccard, "dice": self.dice, "lpcl": self.lpcl}


def _check_pair(pred, target) -> tuple[Tensor, np.ndarray]:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if tuple(pred.shape) != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {target.shape}")
    return pred, target.astype(pred.data.dtype)


def bce(pred, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]."""
    pred, y = _check_pair(pred, target)
    p = ops.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = ops.add(ops.mul(ops.log(p), y), ops.mul(ops.log(ops.sub(1.0, p)), 1.0 - y))
    return ops.neg(ops.mean(ll))


def _overlap(pred, target):
    pred, y = _check_pair(pred, target)
    inter = ops.sum(ops.mul(pred, y))
    total = ops.add(ops.sum(pred), float(y.sum()))
    return inter, total


def dice_loss(pred, target, smooth: float = SMOOTH) -> Tensor:
    """1 - (2|P∩Y| + s) / (|P| + |Y| + s) over the whole batch."""
    inter, total = _overlap(pred, target)
    return ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), smooth), ops.add(total, smooth)))


def jaccard_loss(pred, target, smooth: float = SMOOTH) -> Tensor:
    """1 - (|P∩Y| + s) / (|P| + |Y| - |P∩Y| + s)."""
    inter, total = _overlap(pred, target)
    union = ops.sub(total, inter)
    return ops.sub(1.0, ops.div(ops.add(inter, smooth), ops.add(union, smooth)))


# ---------------------------------------------------------------- contrastive


@dataclass
class ContrastiveBatch:
    """Features of 2N augmented views, their downsampled labels and view pairing.

    ``pairing[i]`` is the partner view of ``i``. Views are interleaved, so the
    default pairing maps 0<->1, 2<->3, ...
    """

    features: Tensor  # [2N, D, S, S]
    labels_ds: np.ndarray  # [2N, S, S] in {0, 1}
    pairing: np.ndarray
    tau: float = 0.5

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.labels_ds = np.asarray(self.labels_ds)
        self.pairing = np.asarray(self.pairing, dtype=np.int64)
        n = self.features.shape[0]
        if n < 2:
            raise ValueError(f"contrastive batch needs at least 2 views, got {n}")
        if self.features.ndim != 4:
            raise ValueError(f"features must be [2N, D, S, S], got {tuple(self.features.shape)}")
        if self.labels_ds.shape != (n,) + tuple(self.features.shape[2:]):
            raise ValueError(f"labels_ds shape {self.labels_ds.shape} does not match features")
        if not np.isin(self.labels_ds, (0, 1)).all():
            raise ValueError("labels_ds must be binary")
        if self.pairing.shape != (n,) or np.any(self.pairing < 0) or np.any(self.pairing >= n):
            raise ValueError("pairing must hold one partner index per view")
        if np.any(self.pairing == np.arange(n)):
            raise ValueError("a view cannot be its own partner")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def interleaved_pairing(n_views: int) -> np.ndarray:
    if n_views % 2:
        raise ValueError(f"interleaved pairing needs an even view count, got {n_views}")
    return np.arange(n_views) ^ 1


def downsample_labels(labels, size: int) -> np.ndarray:
    """Average-pool [B, H, W] binary labels to [B, size, size], then threshold at 0.5."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim == 4:
        labels = labels[:, 0]
    B, H, W = labels.shape
    if H % size or W % size:
        raise ValueError(f"label size {H}x{W} is not a multiple of {size}")
    fh, fw = H // size, W // size
    pooled = labels.reshape(B, size, fh, size, fw).mean(axis=(2, 4))
    return (pooled >= 0.5).astype(np.int8)


def lpcl(batch: ContrastiveBatch, mode: str = "label_masked", reduction: str = "sum") -> Tensor:
    """Pixel-wise contrastive loss over same-location features of all views.

    For anchor view ``i`` at location ``s`` the positive is the partner view
    ``j`` at ``s``; the softmax runs over every other view ``k != i`` at ``s``.
    Each anchor's terms are averaged over the S*S locations. ``label_masked``
    drops locations where the anchor and its partner disagree on the label.
    ``reduction="sum"`` adds the anchors; ``"mean"`` divides that sum by 2N.
    """
    if mode not in LPCL_MODES:
        raise ValueError(f"lpcl mode must be one of {LPCL_MODES}, got {mode!r}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"lpcl reduction must be 'sum' or 'mean', got {reduction!r}")
    feats = batch.features
    n, d, sh, sw = feats.shape
    S2 = sh * sw
    dt = feats.data.dtype
    z = ops.l2_normalize(feats, axis=1)
    z = ops.transpose(ops.reshape(z, (n, d, S2)), (2, 0, 1))  # [S2, n, d]
    sim = ops.mul(ops.matmul(z, ops.transpose(z, (0, 2, 1))), 1.0 / batch.tau)  # [S2, n, n]
    others = ~np.eye(n, dtype=bool)
    lse = ops.logsumexp(sim, axis=-1, where=others[None])  # [S2, n]
    partner = np.zeros((n, n), dtype=dt)
    partner[np.arange(n), batch.pairing] = 1.0
    pos = ops.sum(ops.mul(sim, partner[None]), axis=-1)  # [S2, n]
    lab = batch.labels_ds.reshape(n, S2)
    if mode == "label_masked":
        keep = (lab == lab[batch.pairing]).T.astype(dt)
    else:
        keep = np.ones((S2, n), dtype=dt)
    total = ops.neg(ops.sum(ops.mul(ops.sub(pos, lse), keep)))
    scale = 1.0 / S2 if reduction == "sum" else 1.0 / (S2 * n)
    return ops.mul(total, scale)


# ---------------------------------------------------------------- hybrid


def hybrid_loss(
    pred,
    target,
    batch: ContrastiveBatch | None,
    w: LossWeights,
    mode: str = "label_masked",
    reduction: str = "sum",
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of BCE, jaccard, dice and the contrastive term, plus a per-term breakdown.

    With ``w.lpcl == 0`` (or no batch) the contrastive term is evaluated off
    the tape for logging only, so the gradient is exactly that of the
    segmentation objective.
    """
    terms = {"bce": bce(pred, target), "jaccard": jaccard_loss(pred, target), "dice": dice_loss(pred, target)}
    if batch is not None:
        if w.lpcl > 0:
            terms["lpcl"] = lpcl(batch, mode, reduction)
        else:
            with no_tape():
                terms["lpcl"] = lpcl(batch, mode, reduction)
    weights = w.as_dict()
    total = None
    for name, value in terms.items():
        if weights[name] == 0:
            continue
        part = ops.mul(value, weights[name])
        total = part if total is None else ops.add(total, part)
    if total is None:
        total = Tensor(np.zeros((), dtype=as_tensor(pred).data.dtype))
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown["total"] = float(total.data)
    return total, breakdown
