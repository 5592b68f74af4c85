"""Synthetic vessel images, fundus-style preprocessing, patches, augmentation and PGM/PPM I/O."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
N_BINS = 256


@dataclass
class SegmentationSample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    label: np.ndarray  # [H, W] in {0, 1}
    mask: np.ndarray | None = None  # [H, W] in {0, 1}
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[None]
        self.label = np.asarray(self.label)
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} disagree")
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError("label must be binary")
        self.label = self.label.astype(np.uint8)
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != self.label.shape or not np.isin(self.mask, (0, 1)).all():
                raise ValueError("mask must be binary with the label's shape")
            self.mask = self.mask.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape


# ---------------------------------------------------------------- synthetic vessels


@dataclass(frozen=True)
class SynthConfig:
    size: int = 128
    n_trees: int = 3
    branch_depth: int = 3
    width_range: tuple[float, float] = (1.0, 3.5)
    tortuosity: float = 0.25
    noise_sigma: float = 0.03
    gradient_amplitude: float = 0.25
    contrast: float = 0.4
    seed: int = 0

    def __post_init__(self):
        w_min, w_max = self.width_range
        if self.size < 16 or self.n_trees < 1 or self.branch_depth < 0:
            raise ValueError("size >= 16, n_trees >= 1 and branch_depth >= 0 are required")
        if not 0 < w_min <= w_max:
            raise ValueError(f"invalid width range {self.width_range}")
        if self.noise_sigma < 0 or self.gradient_amplitude < 0 or not 0 < self.contrast <= 1:
            raise ValueError("noise_sigma, gradient_amplitude must be >= 0 and contrast in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_range"] = list(self.width_range)
        return d


FOREGROUND_RANGE = (0.03, 0.25)
MAX_RETRIES = 10


def _bezier(p0, p1, p2, step: float = 0.5) -> np.ndarray:
    length = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
    t = np.linspace(0.0, 1.0, max(2, int(np.ceil(length / step)) + 1))[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _grow(rng, cfg: SynthConfig, start, heading, length, depth, out):
    """Append (points, radius) for one quadratic segment and recurse into two children."""
    w_min, w_max = cfg.width_range
    width = max(w_min, w_max * 0.7**depth)
    end = start + length * np.array([np.cos(heading), np.sin(heading)])
    normal = np.array([-np.sin(heading), np.cos(heading)])
    ctrl = 0.5 * (start + end) + normal * cfg.tortuosity * length * rng.normal()
    out.append((_bezier(start, ctrl, end), width / 2.0))
    if depth >= cfg.branch_depth:
        return
    # children leave along the end tangent of the curve
    tangent = end - ctrl
    base = np.arctan2(tangent[1], tangent[0])
    for sign in (-1.0, 1.0):
        turn = sign * rng.uniform(np.deg2rad(20), np.deg2rad(45))
        _grow(rng, cfg, end, base + turn, length * rng.uniform(0.6, 0.8), depth + 1, out)


def _rasterize(segments, size: int) -> np.ndarray:
    label = np.zeros((size, size), dtype=bool)
    for radius in sorted({r for _, r in segments}):
        seeds = np.zeros((size, size), dtype=bool)
        for pts, r in segments:
            if r != radius:
                continue
            ij = np.rint(pts[:, ::-1]).astype(int)
            ok = (ij >= 0).all(axis=1) & (ij < size).all(axis=1)
            seeds[ij[ok, 0], ij[ok, 1]] = True
        if seeds.any():
            label |= ndimage.distance_transform_edt(~seeds) <= radius
    return label


def _draw_label(rng, cfg: SynthConfig) -> np.ndarray:
    size = cfg.size
    segments: list = []
    roots: list[int] = []
    for _ in range(cfg.n_trees):
        # roots start near the border and head inwards
        side = rng.integers(4)
        u = rng.uniform(0.15, 0.85) * (size - 1)
        start, heading = {
            0: (np.array([u, 0.0]), np.pi / 2),
            1: (np.array([u, size - 1.0]), -np.pi / 2),
            2: (np.array([0.0, u]), 0.0),
            3: (np.array([size - 1.0, u]), np.pi),
        }[int(side)]
        heading += rng.uniform(-0.4, 0.4)
        roots.append(len(segments))
        _grow(rng, cfg, start, heading, size * rng.uniform(0.3, 0.5), 0, segments)
    label = _rasterize(segments, size)
    # twigs that leave and re-enter the frame form islands with no trunk; drop them
    comps, _ = ndimage.label(label, structure=np.ones((3, 3)))
    trunk = _rasterize([segments[i] for i in roots], size) & label
    keep = np.unique(comps[trunk])
    return np.isin(comps, keep[keep > 0])


def render_image(label: np.ndarray, cfg: SynthConfig, rng) -> np.ndarray:
    """Dark vessels on a light background with a linear illumination ramp and noise."""
    size = label.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    blurred = ndimage.gaussian_filter(label.astype(np.float64), sigma=0.7)
    img = -cfg.gradient_amplitude * ramp + (1.0 - cfg.contrast * blurred)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_sample(cfg: SynthConfig, sample_id: str | None = None) -> SegmentationSample:
    """One synthetic vessel image; the label is redrawn until its foreground fraction is in range."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(MAX_RETRIES):
        label = _draw_label(rng, cfg)
        frac = label.mean()
        if FOREGROUND_RANGE[0] <= frac <= FOREGROUND_RANGE[1]:
            image = render_image(label, cfg, rng)
            return SegmentationSample(image[None], label.astype(np.uint8), None, sample_id or f"synth-{cfg.seed}")
    raise RuntimeError(f"foreground fraction stayed outside {FOREGROUND_RANGE} after {MAX_RETRIES} draws")


def synth_dataset(cfg: SynthConfig, n: int) -> list[SegmentationSample]:
    """``n`` samples with per-sample seeds derived from ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(n)
    return [synth_sample(replace(cfg, seed=int(s)), f"synth-{cfg.seed}-{i:03d}") for i, s in enumerate(seeds)]


# ---------------------------------------------------------------- preprocessing


def to_gray_normalize(image) -> np.ndarray:
    """Luminance for [H, W, 3] input, then per-image min-max to [0, 1] (constant -> zeros)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        img = img @ LUMA
    elif img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected a gray [H, W] or RGB [H, W, 3] image, got {img.shape}")
    lo, hi = img.min(), img.max()
    if hi - lo <= 0:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _bins(image: np.ndarray) -> np.ndarray:
    return np.minimum((image * N_BINS).astype(np.int64), N_BINS - 1)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def clahe_luts(image, clip_limit: float = 2.0, tiles: int = 8) -> np.ndarray:
    """Per-tile mapping tables [tiles, tiles, 256] from clipped, midpoint-CDF histograms."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    if H < tiles or W < tiles:
        raise ValueError(f"image {H}x{W} is smaller than the {tiles}x{tiles} tile grid")
    if not clip_limit > 0:
        raise ValueError(f"clip_limit must be positive, got {clip_limit}")
    b = _bins(img)
    ey, ex = _tile_edges(H, tiles), _tile_edges(W, tiles)
    luts = np.empty((tiles, tiles, N_BINS))
    for i in range(tiles):
        for j in range(tiles):
            tile = b[ey[i] : ey[i + 1], ex[j] : ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=N_BINS).astype(np.float64)
            n = tile.size
            if np.count_nonzero(hist) == 1:
                # no contrast to stretch: keep intensities (bin centres)
                luts[i, j] = (np.arange(N_BINS) + 0.5) / N_BINS
                continue
            if np.isfinite(clip_limit):
                clip = clip_limit * n / N_BINS
                excess = np.maximum(hist - clip, 0.0).sum()
                hist = np.minimum(hist, clip) + excess / N_BINS
            # midpoint CDF: half of each bin's own mass
            luts[i, j] = (np.cumsum(hist) - 0.5 * hist) / n
    return luts


def _blend_coords(n: int, tiles: int):
    edges = _tile_edges(n, tiles)
    centers = 0.5 * (edges[:-1] + edges[1:] - 1)
    f = np.interp(np.arange(n), centers, np.arange(tiles, dtype=np.float64))
    i0 = np.floor(f).astype(int)
    i1 = np.minimum(i0 + 1, tiles - 1)
    return i0, i1, f - i0


def clahe(image, clip_limit: float = 2.0, tiles: int = 8) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization with bilinear blending between tiles."""
    img = np.asarray(image, dtype=np.float64)
    luts = clahe_luts(img, clip_limit, tiles)
    b = _bins(img)
    y0, y1, wy = _blend_coords(img.shape[0], tiles)
    x0, x1, wx = _blend_coords(img.shape[1], tiles)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    WY, WX = np.meshgrid(wy, wx, indexing="ij")
    top = (1 - WX) * luts[Y0, X0, b] + WX * luts[Y0, X1, b]
    bot = (1 - WX) * luts[Y1, X0, b] + WX * luts[Y1, X1, b]
    return np.clip((1 - WY) * top + WY * bot, 0.0, 1.0)


def gamma_correct(image, gamma: float = 1.2) -> np.ndarray:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.power(np.asarray(image, dtype=np.float64), gamma)


@dataclass(frozen=True)
class PreprocessConfig:
    clip_limit: float = 2.0
    tiles: int = 8
    gamma: float = 1.2


def preprocess(image, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Gray + min-max, CLAHE, gamma. Returns [H, W] in [0, 1]."""
    return gamma_correct(clahe(to_gray_normalize(image), cfg.clip_limit, cfg.tiles), cfg.gamma)


def preprocess_sample(sample: SegmentationSample, cfg: PreprocessConfig = PreprocessConfig()) -> SegmentationSample:
    return SegmentationSample(preprocess(sample.image, cfg)[None], sample.label, sample.mask, sample.id)


# ---------------------------------------------------------------- patches and views


@dataclass
class Patch:
    image: np.ndarray  # [1, s, s]
    label: np.ndarray  # [s, s]
    corner: tuple[int, int]


MIN_VALID = 0.5


def sample_patches(sample: SegmentationSample, n: int, size: int, rng, max_tries: int = 100) -> list[Patch]:
    """``n`` patches with uniformly drawn top-left corners.

    With a validity mask, patches under 50% valid pixels are redrawn.
    """
    H, W = sample.shape
    if size > H or size > W:
        raise ValueError(f"patch size {size} exceeds image {H}x{W}")
    out: list[Patch] = []
    tries = 0
    while len(out) < n:
        y = int(rng.integers(0, H - size + 1))
        x = int(rng.integers(0, W - size + 1))
        tries += 1
        if sample.mask is not None and sample.mask[y : y + size, x : x + size].mean() < MIN_VALID:
            if tries > max_tries * max(n, 1):
                raise RuntimeError(f"could not find {n} patches with >= {MIN_VALID:.0%} valid pixels")
            continue
        out.append(
            Patch(
                sample.image[:, y : y + size, x : x + size].copy(),
                sample.label[y : y + size, x : x + size].copy(),
                (y, x),
            )
        )
    return out


@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 0.02
    flip_prob: float = 0.0


def augment_two_views(image, label, rng, cfg: AugmentConfig = AugmentConfig()):
    """Two intensity-jittered views of one patch sharing geometry and label.

    Each view is ``clip(c * x + b + noise)`` with its own contrast ``c``,
    brightness ``b`` and noise level in [0, noise_sigma]. A horizontal flip,
    if drawn, applies to both views and the label alike.
    """
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(label)
    if rng.uniform() < cfg.flip_prob:
        x, y = x[..., ::-1].copy(), y[..., ::-1].copy()
    views = []
    for _ in range(2):
        c = rng.uniform(*cfg.contrast)
        b = rng.uniform(-cfg.brightness, cfg.brightness)
        v = c * x + b
        if cfg.noise_sigma > 0:
            v = v + rng.normal(0.0, rng.uniform(0.0, cfg.noise_sigma), x.shape)
        views.append((np.clip(v, 0.0, 1.0), y.copy()))
    return views[0], views[1]


# ---------------------------------------------------------------- PGM / PPM


class ImageFormatError(ValueError):
    """Malformed or truncated PGM/PPM data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _header_tokens(buf: bytes, n: int):
    """Read ``n`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens = []
    i = 0
    while len(tokens) < n:
        while i < len(buf) and (buf[i : i + 1].isspace() or buf[i : i + 1] == b"#"):
            if buf[i : i + 1] == b"#":
                nl = buf.find(b"\n", i)
                i = len(buf) if nl < 0 else nl
            i += 1
        if i >= len(buf):
            raise ImageFormatError("truncated header", i)
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        tokens.append((buf[start:i], start))
    if i >= len(buf) or not buf[i : i + 1].isspace():
        raise ImageFormatError("expected a single whitespace byte after the header", i)
    return tokens, i + 1


def decode_image(buf: bytes) -> np.ndarray:
    """Decode P5 (-> [H, W]) or P6 (-> [H, W, 3]) 8-bit data to floats in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}, expected P5 or P6", 0)
    tokens, start = _header_tokens(buf[2:], 3)
    start += 2
    vals = []
    for tok, off in tokens:
        if not tok.isdigit():
            raise ImageFormatError(f"expected an unsigned integer, got {tok!r}", off + 2)
        vals.append(int(tok))
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid size {width}x{height}", tokens[0][1] + 2)
    if not 1 <= maxval <= 255:
        raise ImageFormatError(f"only 8-bit data is supported, got maxval {maxval}", tokens[2][1] + 2)
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = buf[start : start + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, found {len(payload)}", start + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / maxval
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)


def encode_image(image) -> bytes:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[-1] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode an array of shape {arr.shape}")
    H, W = arr.shape[:2]
    return magic + f"\n{W} {H}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_image(path, image) -> None:
    data = encode_image(image)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- datasets


def load_directory(root, preprocess_cfg: PreprocessConfig | None = PreprocessConfig()) -> list[SegmentationSample]:
    """Samples from ``images/``, ``labels/`` and optional ``masks/`` (*.pgm / *.ppm), matched by stem."""
    root = Path(root)
    img_dir, lab_dir, mask_dir = root / "images", root / "labels", root / "masks"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and labels/")
    images = sorted(p for p in img_dir.iterdir() if p.suffix in (".pgm", ".ppm"))
    if not images:
        raise FileNotFoundError(f"no .pgm/.ppm images under {img_dir}")
    samples = []
    for p in images:
        lab_path = lab_dir / f"{p.stem}.pgm"
        if not lab_path.exists():
            raise FileNotFoundError(f"missing label for {p.name}: {lab_path}")
        image = read_image(p)
        label = (read_image(lab_path) > 0.5).astype(np.uint8)
        mask = None
        if (mask_dir / f"{p.stem}.pgm").exists():
            mask = (read_image(mask_dir / f"{p.stem}.pgm") > 0.5).astype(np.uint8)
        img = preprocess(image, preprocess_cfg) if preprocess_cfg is not None else to_gray_normalize(image)
        samples.append(SegmentationSample(img[None], label, mask, p.stem))
    return samples


def save_directory(root, samples: list[SegmentationSample]) -> None:
    root = Path(root)
    for sub in ("images", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "images" / f"{s.id}.pgm", s.image[0])
        write_image(root / "labels" / f"{s.id}.pgm", s.label.astype(np.uint8) * 255)
        if s.mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            write_image(root / "masks" / f"{s.id}.pgm", s.mask.astype(np.uint8) * 255)


@dataclass
class Split:
    train: list[SegmentationSample] = field(default_factory=list)
    val: list[SegmentationSample] = field(default_factory=list)


def split(samples: list[SegmentationSample], val_fraction: float, rng) -> Split:
    """Shuffle and hold out ``ceil(val_fraction * n)`` samples (at least one, at most n - 1)."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(samples)
    if n < 2:
        raise ValueError("need at least two samples to split")
    n_val = min(n - 1, max(1, int(np.ceil(val_fraction * n))))
    order = rng.permutation(n)
    return Split([samples[i] for i in order[n_val:]], [samples[i] for i in order[:n_val]])
