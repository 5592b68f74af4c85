"""Vessel segmentation metrics: confusion rates, ROC-AUC, HD95 and C/A/L/F.

Masks are boolean arrays; probability maps are floats in [0, 1]. Everything
here is plain numpy plus a few scipy.ndimage / scipy.stats calls.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

ALPHA = 2
BETA = 2
REPORT_KEYS = ("acc", "se", "sp", "f1", "miou", "miou_paper_literal", "auc", "hd95", "c", "a", "l", "f")

_EIGHT = np.ones((3, 3), dtype=bool)


class UndefinedEmpty(ValueError):
    """A metric is undefined because a required mask has no foreground."""


def _binary(x, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == bool:
        return x
    if not np.isin(x, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return x.astype(bool)


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays if a is not None}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


# ---------------------------------------------------------------- confusion


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred_bin, target, mask=None) -> ConfusionCounts:
    _same_shape(pred_bin, target, mask)
    p, t = _binary(pred_bin, "prediction"), _binary(target, "target")
    m = np.ones_like(p) if mask is None else _binary(mask, "mask")
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t & m)),
        fp=int(np.count_nonzero(p & ~t & m)),
        tn=int(np.count_nonzero(~p & ~t & m)),
        fn=int(np.count_nonzero(~p & t & m)),
    )


@dataclass(frozen=True)
class BasicMetrics:
    acc: float
    se: float
    sp: float
    f1: float
    miou: float
    miou_paper_literal: float
    undefined: tuple[str, ...] = ()  # metrics whose denominator was 0 (reported as 0)


def basic_metrics(c: ConfusionCounts) -> BasicMetrics:
    """Rates from counts. A zero denominator gives 0 and is listed in ``undefined``."""
    undefined = []

    def ratio(name, num, den):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    tp, fp, tn, fn = c.tp, c.fp, c.tn, c.fn
    vals = dict(
        acc=ratio("acc", tp + tn, c.total),
        se=ratio("se", tp, tp + fn),
        sp=ratio("sp", tn, tn + fp),
        f1=ratio("f1", 2 * tp, 2 * tp + fp + fn),
        miou=ratio("miou", tp, tp + fp + fn),
        miou_paper_literal=ratio("miou_paper_literal", 2 * tp, tp + fp + fn),
    )
    return BasicMetrics(**vals, undefined=tuple(undefined))


# ---------------------------------------------------------------- ranking


def roc_auc(prob, target, mask=None) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic with midranks.

    A one-class target has no ROC curve; 0.5 is returned with a warning.
    """
    _same_shape(prob, target, mask)
    s = np.asarray(prob, dtype=np.float64)
    t = _binary(target, "target")
    if mask is not None:
        m = _binary(mask, "mask")
        s, t = s[m], t[m]
    s, t = s.ravel(), t.ravel()
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("roc_auc undefined for a one-class target; returning 0.5", RuntimeWarning, stacklevel=2)
        return 0.5
    ranks = rankdata(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------- distances


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every foreground pixel of ``a`` to the nearest foreground pixel of ``b``."""
    return ndimage.distance_transform_edt(~b)[a]


def hd95(pred_bin, target) -> float:
    """Max of the two directed 95th-percentile distances between foreground pixel sets."""
    _same_shape(pred_bin, target)
    p, t = _binary(pred_bin, "prediction"), _binary(target, "target")
    if not p.any() or not t.any():
        raise UndefinedEmpty("hd95 is undefined when either mask is empty")
    d_pt = np.percentile(_directed(p, t), 95)
    d_tp = np.percentile(_directed(t, p), 95)
    return float(max(d_pt, d_tp))


# ---------------------------------------------------------------- morphology


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    if r < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    return dx * dx + dy * dy <= r * r


def dilate_disc(mask, radius: int) -> np.ndarray:
    m = _binary(mask, "mask")
    if radius == 0 or not m.any():
        return m.copy()
    return ndimage.binary_dilation(m, structure=disc(radius))


def count_components(mask) -> int:
    return int(ndimage.label(_binary(mask, "mask"), structure=_EIGHT)[1])


def _neighbours(img: np.ndarray):
    """P2..P9 (N, NE, E, SE, S, SW, W, NW) of every pixel, zero outside the image."""
    p = np.pad(img, 1)
    H, W = img.shape
    sl = lambda dy, dx: p[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]  # noqa: E731
    return [sl(-1, 0), sl(-1, 1), sl(0, 1), sl(1, 1), sl(1, 0), sl(1, -1), sl(0, -1), sl(-1, -1)]


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen thinning with both sub-iterations applied in parallel until stable."""
    img = _binary(mask, "mask").astype(np.uint8)
    if img.ndim != 2:
        raise ValueError("skeletonize expects a 2-D mask")
    while True:
        changed = False
        for step in (0, 1):
            n = _neighbours(img)
            P2, P3, P4, P5, P6, P7, P8, P9 = n
            b = sum(n)
            ring = n + [P2]
            a = sum((ring[k] == 0) & (ring[k + 1] == 1) for k in range(8))
            if step == 0:
                c1, c2 = P2 * P4 * P6, P4 * P6 * P8
            else:
                c1, c2 = P2 * P4 * P8, P2 * P6 * P8
            drop = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & (c1 == 0) & (c2 == 0)
            if drop.any():
                img[drop] = 0
                changed = True
        if not changed:
            return img.astype(bool)


@dataclass(frozen=True)
class VesselMetrics:
    c: float
    a: float
    l: float  # noqa: E741
    f: float


def cal_metrics(pred_bin, target, alpha: int = ALPHA, beta: int = BETA) -> VesselMetrics:
    """Connectivity, area and length agreement, and their product."""
    _same_shape(pred_bin, target)
    s, g = _binary(pred_bin, "prediction"), _binary(target, "target")
    n_g = int(g.sum())
    if n_g == 0:
        raise UndefinedEmpty("C/A/L/F are undefined for an empty reference mask")
    c = 1.0 - min(1.0, abs(count_components(g) - count_components(s)) / n_g)
    a = np.count_nonzero((dilate_disc(s, alpha) & g) | (s & dilate_disc(g, alpha))) / np.count_nonzero(s | g)
    phi_s, phi_g = skeletonize(s), skeletonize(g)
    both = np.count_nonzero(phi_s | phi_g)
    if both == 0:
        # neither mask keeps a skeleton pixel, so the skeletons coincide
        l_ = 1.0
    else:
        l_ = np.count_nonzero((phi_s & dilate_disc(g, beta)) | (dilate_disc(s, beta) & phi_g)) / both
    return VesselMetrics(c=float(c), a=float(a), l=float(l_), f=float(c * a * l_))


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    acc: float
    se: float
    sp: float
    f1: float
    miou: float
    miou_paper_literal: float
    auc: float
    hd95: float | None
    c: float | None
    a: float | None
    l: float | None  # noqa: E741
    f: float | None
    notes: list[str] = field(default_factory=list, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in REPORT_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= threshold


def full_report(prob, target, mask=None, threshold: float = 0.5) -> MetricsReport:
    """All metrics for one image. Undefined HD95 / C,A,L,F are reported as None."""
    _same_shape(prob, target, mask)
    t = _binary(target, "target")
    m = None if mask is None else _binary(mask, "mask")
    p = binarize(prob, threshold)
    if m is not None:
        p, t = p & m, t & m
    notes: list[str] = []
    bm = basic_metrics(confusion(p, t, m))
    notes += [f"{k}: zero denominator" for k in bm.undefined]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        auc = roc_auc(prob, t, m)
    notes += [str(w.message) for w in caught]
    try:
        h = hd95(p, t)
    except UndefinedEmpty as e:
        h = None
        notes.append(str(e))
    try:
        vm = cal_metrics(p, t)
        c, a, l_, f = vm.c, vm.a, vm.l, vm.f
    except UndefinedEmpty as e:
        c = a = l_ = f = None
        notes.append(str(e))
    return MetricsReport(
        acc=bm.acc, se=bm.se, sp=bm.sp, f1=bm.f1, miou=bm.miou, miou_paper_literal=bm.miou_paper_literal,
        auc=auc, hd95=h, c=c, a=a, l=l_, f=f, notes=notes,
    )  # fmt: skip


def aggregate(reports: list[MetricsReport]) -> dict:
    """Unweighted mean per key over images; None entries are skipped and counted."""
    out: dict = {}
    skipped: dict = {}
    for k in REPORT_KEYS:
        vals = [getattr(r, k) for r in reports if getattr(r, k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
        n_skip = len(reports) - len(vals)
        if n_skip:
            skipped[k] = n_skip
    out["n_images"] = len(reports)
    out["n_undefined"] = skipped
    return out
