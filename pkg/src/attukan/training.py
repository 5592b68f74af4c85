"""Patch-based training, tiled full-image inference and evaluation."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .data import (
    SegmentationSample,
    Split,
    augment_two_views,
    load_directory,
    preprocess_sample,
    sample_patches,
    split,
    synth_dataset,
)
from .losses import ContrastiveBatch, downsample_labels, hybrid_loss, interleaved_pairing
from .metrics import MetricsReport, aggregate, basic_metrics, binarize, confusion, full_report
from .network import Model, build, forward
from .numerics.params import adam_step
from .numerics.tensor import GradTape

LOG_NAME = "train_log.jsonl"


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; a diagnostic dump was written."""


# ---------------------------------------------------------------- data


def load_samples(cfg: RunConfig) -> list[SegmentationSample]:
    if cfg.data.source == "synthetic":
        raw = synth_dataset(cfg.synth, cfg.data.n_images)
        return [preprocess_sample(s, cfg.preprocess) for s in raw]
    return load_directory(cfg.data.source, cfg.preprocess)


def make_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the train/val split and for the patch/augmentation stream."""
    split_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(split_seq), np.random.default_rng(data_seq)


def prepare_split(cfg: RunConfig) -> Split:
    split_rng, _ = make_rngs(cfg.train.seed)
    return split(load_samples(cfg), cfg.train.val_fraction, split_rng)


def epoch_patches(samples: list[SegmentationSample], cfg: RunConfig, rng) -> tuple[list, str]:
    """Shuffled patches for one epoch and a hash of the (sample, corner) sequence."""
    patches = []
    for s in samples:
        for p in sample_patches(s, cfg.train.patches_per_image, cfg.train.patch_size, rng):
            patches.append((s.id, p))
    order = rng.permutation(len(patches))
    patches = [patches[i] for i in order]
    trace = json.dumps([[sid, p.corner[0], p.corner[1]] for sid, p in patches]).encode()
    return [p for _, p in patches], hashlib.sha256(trace).hexdigest()[:16]


def view_batch(patches, rng, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Stack two augmented views per patch, interleaved: [2B, 1, s, s] images and [2B, s, s] labels."""
    images, labels = [], []
    for p in patches:
        for img, lab in augment_two_views(p.image, p.label, rng, cfg.augment):
            images.append(img)
            labels.append(lab)
    return np.stack(images), np.stack(labels)


# ---------------------------------------------------------------- steps


def loss_on_batch(model: Model, images, labels, cfg: RunConfig, training: bool = True):
    """Forward pass and hybrid loss; call inside a GradTape to get gradients."""
    dt = model.store.dtype
    prob, feats = forward(model, images.astype(dt), training=training)
    level = cfg.lpcl.feature_level
    f = feats[level]
    batch = ContrastiveBatch(
        f, downsample_labels(labels, f.shape[-1]), interleaved_pairing(f.shape[0]), cfg.lpcl.tau
    )
    target = labels[:, None].astype(dt)
    return hybrid_loss(prob, target, batch, cfg.loss, cfg.lpcl.mode, cfg.lpcl.reduction)


def train_step(model: Model, images, labels, cfg: RunConfig) -> dict[str, float]:
    with GradTape() as tape:
        total, breakdown = loss_on_batch(model, images, labels, cfg)
    if not np.isfinite(total.data):
        raise TrainingDiverged(f"non-finite loss {breakdown}")
    tape.backward(total)
    o = cfg.optim
    adam_step(model.store, o.lr, o.beta1, o.beta2, o.eps)
    model.store.zero_grad()
    return breakdown


# ---------------------------------------------------------------- inference


def tile_corners(n: int, patch: int, stride: int) -> list[int]:
    if n < patch:
        raise ValueError(f"image side {n} is smaller than the patch size {patch}")
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def stitch(tile_fn, shape: tuple[int, int], patch: int, stride: int | None = None, batch: int = 16) -> np.ndarray:
    """Average overlapping tile predictions. ``tile_fn`` maps corners [(y, x)] to [n, patch, patch]."""
    H, W = shape
    stride = stride or max(1, patch // 2)
    corners = [(y, x) for y in tile_corners(H, patch, stride) for x in tile_corners(W, patch, stride)]
    acc = np.zeros((H, W))
    cnt = np.zeros((H, W))
    for k in range(0, len(corners), batch):
        chunk = corners[k : k + batch]
        out = tile_fn(chunk)
        for (y, x), tile in zip(chunk, out):
            acc[y : y + patch, x : x + patch] += tile
            cnt[y : y + patch, x : x + patch] += 1
    return acc / cnt


def predict_full(model: Model, image, patch: int, stride: int | None = None) -> np.ndarray:
    """Probability map [H, W] for a [1, H, W] image by overlapped tiling (stride = patch/2)."""
    image = np.asarray(image)
    dt = model.store.dtype

    def run(chunk):
        x = np.stack([image[:, y : y + patch, x : x + patch] for y, x in chunk]).astype(dt)
        prob, _ = forward(model, x, training=False)
        return prob.data[:, 0].astype(np.float64)

    return stitch(run, image.shape[1:], patch, stride)


def quick_f1(model: Model, samples, patch: int) -> float:
    scores = []
    for s in samples:
        prob = predict_full(model, s.image, patch)
        scores.append(basic_metrics(confusion(binarize(prob), s.label.astype(bool), s.mask)).f1)
    return float(np.mean(scores))


def evaluate(predict, samples: list[SegmentationSample]) -> dict:
    """Per-image reports and their aggregate. ``predict`` maps a sample to a probability map."""
    rows = []
    reports: list[MetricsReport] = []
    for s in samples:
        r = full_report(predict(s), s.label, s.mask)
        reports.append(r)
        rows.append({"id": s.id, **r.to_dict()})
    return {"images": rows, "aggregate": aggregate(reports)}


# ---------------------------------------------------------------- the loop


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    split: Split | None = None
    best_path: Path | None = None
    final_path: Path | None = None


def _log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def _dump_diagnostic(out_dir: Path | None, model: Model, epoch: int, step: int, message: str) -> None:
    if out_dir is None:
        return
    norms = {k: float(np.sqrt(np.sum(p.value.data.astype(np.float64) ** 2))) for k, p in model.store.entries.items()}
    finite = {k: bool(np.isfinite(p.value.data).all()) for k, p in model.store.entries.items()}
    record = {"epoch": epoch, "step": step, "message": message, "param_norms": norms, "param_finite": finite}
    (out_dir / "diagnostic.json").write_text(json.dumps(record, indent=1, sort_keys=True))


def train(
    cfg: RunConfig,
    out_dir=None,
    resume=None,
    data: Split | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Train per ``cfg``; with ``out_dir`` writes the JSONL log and best/final checkpoints.

    ``resume`` is a checkpoint path written by an earlier run of the same
    config; training continues from its epoch with its optimizer and RNG state.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    data = data or prepare_split(cfg)
    _, rng = make_rngs(cfg.train.seed)
    state = ckpt.TrainState()
    if resume is not None:
        loaded = ckpt.load(resume)
        if loaded.run_config is not None and loaded.run_config.get("model") != cfg.to_dict()["model"]:
            raise ckpt.CheckpointError("checkpoint model config does not match the run config")
        model, state = loaded.model, loaded.state
        if state.rng_state is not None:
            rng.bit_generator.state = state.rng_state
    else:
        model = build(cfg.model)
    echo = cfg.to_dict()
    result = TrainResult(model, split=data)
    log_path = out / LOG_NAME if out is not None else None
    if log_path is not None and resume is None:
        log_path.write_text("")

    def snapshot(path: Path):
        ckpt.save(path, model, echo, ckpt.TrainState(state.epoch, state.step, rng.bit_generator.state, state.best_val_f1))

    patch = cfg.train.patch_size
    bs = cfg.train.batch_size
    for epoch in range(state.epoch + 1, cfg.train.epochs + 1):
        patches, trace = epoch_patches(data.train, cfg, rng)
        sums: dict[str, float] = {}
        n_steps = 0
        for k in range(0, len(patches), bs):
            images, labels = view_batch(patches[k : k + bs], rng, cfg)
            try:
                br = train_step(model, images, labels, cfg)
            except TrainingDiverged as e:
                _dump_diagnostic(out, model, epoch, state.step, str(e))
                raise
            state.step += 1
            n_steps += 1
            for key, v in br.items():
                sums[key] = sums.get(key, 0.0) + v
        val_f1 = quick_f1(model, data.val, patch)
        state.epoch = epoch
        record = {
            "epoch": epoch,
            "step": state.step,
            "loss": sums["total"] / n_steps,
            "terms": {k: v / n_steps for k, v in sums.items() if k != "total"},
            "val_f1": val_f1,
            "patch_hash": trace,
        }
        result.history.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(_log_line(record))
        if verbose:
            print(f"epoch {epoch:3d}  loss {record['loss']:.4f}  val_f1 {val_f1:.4f}", file=sys.stderr)
        if state.best_val_f1 is None or val_f1 > state.best_val_f1:
            state.best_val_f1 = val_f1
            if out is not None:
                snapshot(out / "best.ckpt")
    if out is not None:
        snapshot(out / "final.ckpt")
        if not (out / "best.ckpt").exists():
            snapshot(out / "best.ckpt")
        result.best_path, result.final_path = out / "best.ckpt", out / "final.ckpt"
    return result
