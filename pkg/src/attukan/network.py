"""AttUKAN assembly: conv encoder stages, tokenized KAN stages, gated decoder.

Level layout for an input of size H (features ``X1..X5``)::

    X1  conv block          C1 @ H
    X2  pool + conv block   C2 @ H/2
    X3  pool + conv block   C3 @ H/4
    X4  pool + KAN stage    C4 @ H/8
    X5  pool + KAN stage    C5 @ H/16   (bottleneck)

The decoder walks back up: upsample, gate the skip with the coarser decoder
feature, concatenate (gated skip first), then a KAN stage (level 4) or a conv
block (levels 3..1). A 1x1 conv + sigmoid produces the probability map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionGateParams, attention_gate, fuse_skip, init_attention_gate
from .kanblocks import SplineSpec, TokenizedKanBlock, init_tokenized_kan_block, tokenized_kan_block
from .numerics import ops
from .numerics.params import ParamStore, uniform_fan_in
from .numerics.tensor import Tensor

N_LEVELS = 5
DOWNSAMPLE = 16


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    kan: SplineSpec = field(default_factory=SplineSpec)
    kan_layers: int = 3
    use_attention_gates: bool = True
    bottleneck_variant: str = "kan"
    input_channels: int = 1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        ch = tuple(int(c) for c in self.channels)
        object.__setattr__(self, "channels", ch)
        if len(ch) != N_LEVELS:
            raise ValueError(f"need {N_LEVELS} channel widths, got {len(ch)}")
        if any(c < 1 for c in ch) or any(b <= a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"channel widths must be positive and strictly increasing: {ch}")
        if self.bottleneck_variant not in ("kan", "mlp"):
            raise ValueError(f"bottleneck_variant must be 'kan' or 'mlp', got {self.bottleneck_variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.input_channels < 1 or self.kan_layers < 1:
            raise ValueError("input_channels and kan_layers must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["kan"] = SplineSpec(**d["kan"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class ConvBlock:
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    stats: ops.RunningStats


@dataclass
class KanStage:
    embed_w: Tensor
    embed_b: Tensor
    block: TokenizedKanBlock


@dataclass
class Model:
    config: ModelConfig
    store: ParamStore
    encoder: list  # ConvBlock x3, KanStage x2
    decoder: dict  # level -> ConvBlock | KanStage, levels 1..4
    gates: dict  # level -> AttentionGateParams
    head_w: Tensor
    head_b: Tensor
    buffers: dict[str, ops.RunningStats] = field(default_factory=dict)


def _conv_block(store, prefix, c_in, c_out, rng, buffers) -> ConvBlock:
    stats = ops.RunningStats(c_out, dtype=store.dtype)
    buffers[f"{prefix}.bn"] = stats
    return ConvBlock(
        store.add(f"{prefix}.conv.weight", uniform_fan_in(rng, (c_out, c_in, 3, 3), c_in * 9)),
        store.add(f"{prefix}.bn.gamma", np.ones(c_out)),
        store.add(f"{prefix}.bn.beta", np.zeros(c_out)),
        stats,
    )


def _kan_stage(store, prefix, c_in, c_out, cfg: ModelConfig, rng, buffers) -> KanStage:
    embed_w = store.add(f"{prefix}.embed.weight", uniform_fan_in(rng, (c_in, c_out), c_in))
    embed_b = store.add(f"{prefix}.embed.bias", np.zeros(c_out))
    block = init_tokenized_kan_block(
        store, f"{prefix}.block", c_out, cfg.kan, rng, n_layers=cfg.kan_layers, variant=cfg.bottleneck_variant
    )
    buffers.update(block.buffers)
    return KanStage(embed_w, embed_b, block)


def build(config: ModelConfig) -> Model:
    """Initialize every parameter deterministically from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    store = ParamStore(dtype=np.dtype(config.dtype))
    buffers: dict[str, ops.RunningStats] = {}
    c = config.channels
    c_in = (config.input_channels,) + c[:-1]
    encoder = [_conv_block(store, f"enc{i + 1}", c_in[i], c[i], rng, buffers) for i in range(3)]
    encoder += [_kan_stage(store, f"enc{i + 1}", c_in[i], c[i], config, rng, buffers) for i in (3, 4)]
    decoder: dict = {}
    gates: dict = {}
    for level in (4, 3, 2, 1):
        skip, below = c[level - 1], c[level]
        if config.use_attention_gates:
            gates[level] = init_attention_gate(store, f"ag{level}", skip, below, rng)
        if level == 4:
            decoder[level] = _kan_stage(store, f"dec{level}", skip + below, skip, config, rng, buffers)
        else:
            decoder[level] = _conv_block(store, f"dec{level}", skip + below, skip, rng, buffers)
    head_w = store.add("head.weight", uniform_fan_in(rng, (c[0], 1), c[0]))
    head_b = store.add("head.bias", np.zeros(1))
    return Model(config, store, encoder, decoder, gates, head_w, head_b, buffers)


def conv_block(x, blk: ConvBlock, training: bool) -> Tensor:
    # conv without bias: batch norm follows and cancels any per-channel offset
    y = ops.conv2d(x, blk.weight, np.zeros(blk.weight.shape[0], dtype=x.data.dtype), stride=1, padding=1)
    y = ops.batch_norm(y, blk.gamma, blk.beta, blk.stats, training)
    return ops.relu(y)


def kan_stage(x, stage: KanStage, training: bool) -> Tensor:
    y = ops.pointwise(x, stage.embed_w, stage.embed_b)
    return tokenized_kan_block(y, stage.block, training)


def _stage(x, stage, training):
    if isinstance(stage, ConvBlock):
        return conv_block(x, stage, training)
    return kan_stage(x, stage, training)


def forward(model: Model, images, training: bool = False) -> tuple[Tensor, dict[int, Tensor]]:
    """Probability map [B,1,H,W] and the encoder features {1: X1, ..., 5: X5}."""
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=model.store.dtype))
    B, C, H, W = images.shape
    if C != model.config.input_channels:
        raise ValueError(f"model expects {model.config.input_channels} input channels, got {C}")
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ValueError(f"input size {H}x{W} must be divisible by {DOWNSAMPLE}")
    feats: dict[int, Tensor] = {}
    x = images
    for level, stage in enumerate(model.encoder, start=1):
        if level > 1:
            x = ops.max_pool2x2(x)
        x = _stage(x, stage, training)
        feats[level] = x
    d = feats[N_LEVELS]
    for level in (4, 3, 2, 1):
        up = ops.bilinear_upsample2x(d)
        skip = feats[level]
        if model.config.use_attention_gates:
            skip = attention_gate(skip, d, model.gates[level]).gated
        d = _stage(fuse_skip(skip, up), model.decoder[level], training)
    logits = ops.pointwise(d, model.head_w, model.head_b)
    return ops.sigmoid(logits), feats


def parameter_count(model) -> int:
    store = model.store if isinstance(model, Model) else model
    return store.count()


def attention_maps(model: Model, images) -> dict[int, np.ndarray]:
    """Eval-mode gate coefficients per level, for inspection."""
    if not model.config.use_attention_gates:
        return {}
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=model.store.dtype))
    feats: dict[int, Tensor] = {}
    x = images
    for level, stage in enumerate(model.encoder, start=1):
        if level > 1:
            x = ops.max_pool2x2(x)
        x = _stage(x, stage, False)
        feats[level] = x
    d = feats[N_LEVELS]
    maps = {}
    for level in (4, 3, 2, 1):
        up = ops.bilinear_upsample2x(d)
        out = attention_gate(feats[level], d, model.gates[level])
        maps[level] = out.alpha.data[:, 0]
        d = _stage(fuse_skip(out.gated, up), model.decoder[level], False)
    return maps
