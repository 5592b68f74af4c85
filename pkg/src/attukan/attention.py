"""Additive attention gates on skip connections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.params import ParamStore, uniform_fan_in
from .numerics.tensor import Tensor


@dataclass
class AttentionGateParams:
    w_x: Tensor  # [C_skip, C_int]
    w_g: Tensor  # [C_gate, C_int]
    psi: Tensor  # [C_int, 1]
    b_g: Tensor  # [C_int]
    b_psi: Tensor  # [1]

    def __post_init__(self):
        c_int = self.w_x.shape[1]
        if c_int < 1 or self.w_g.shape[1] != c_int or self.psi.shape != (c_int, 1) or self.b_g.shape != (c_int,):
            raise ValueError("inconsistent attention gate parameter shapes")


@dataclass
class GateOutput:
    gated: Tensor  # [B, C_skip, H, W]
    alpha: Tensor  # [B, 1, H, W]


def intermediate_channels(c_skip: int) -> int:
    return max(1, c_skip // 2)


def init_attention_gate(store: ParamStore, prefix: str, c_skip: int, c_gate: int, rng) -> AttentionGateParams:
    c_int = intermediate_channels(c_skip)
    return AttentionGateParams(
        w_x=store.add(f"{prefix}.w_x", uniform_fan_in(rng, (c_skip, c_int), c_skip)),
        w_g=store.add(f"{prefix}.w_g", uniform_fan_in(rng, (c_gate, c_int), c_gate)),
        psi=store.add(f"{prefix}.psi", uniform_fan_in(rng, (c_int, 1), c_int)),
        b_g=store.add(f"{prefix}.b_g", np.zeros(c_int)),
        b_psi=store.add(f"{prefix}.b_psi", np.zeros(1)),
    )


def attention_gate(x, gate, params: AttentionGateParams) -> GateOutput:
    """Rescale skip features ``x`` by a per-pixel coefficient computed from ``x`` and ``gate``.

    ``gate`` comes from the coarser level and is resized to the skip's
    resolution first. All channel maps are 1x1 convolutions; the biases are
    broadcast over space so the gate works at any resolution.
    """
    if x.shape[1] != params.w_x.shape[0]:
        raise ValueError(f"attention_gate: skip has {x.shape[1]} channels, params expect {params.w_x.shape[0]}")
    if gate.shape[1] != params.w_g.shape[0]:
        raise ValueError(f"attention_gate: gate has {gate.shape[1]} channels, params expect {params.w_g.shape[0]}")
    H, W = x.shape[2:]
    if tuple(gate.shape[2:]) != (H, W):
        gate = ops.resize_bilinear(gate, (H, W))
    c_int = params.w_x.shape[1]
    zeros = np.zeros(c_int, dtype=x.data.dtype)
    hidden = ops.add(ops.pointwise(x, params.w_x, zeros), ops.pointwise(gate, params.w_g, params.b_g))
    q = ops.pointwise(ops.relu(hidden), params.psi, params.b_psi)
    # float sigmoid rounds to exactly 0 or 1 for large |q|; keep alpha strictly inside (0, 1)
    dt = x.data.dtype
    alpha = ops.clip(ops.sigmoid(q), float(np.finfo(dt).tiny), float(np.nextafter(dt.type(1), dt.type(0))))
    return GateOutput(ops.mul(x, alpha), alpha)


def fuse_skip(gated, upsampled) -> Tensor:
    """Channel concatenation, gated skip features first."""
    if tuple(gated.shape[2:]) != tuple(upsampled.shape[2:]) or gated.shape[0] != upsampled.shape[0]:
        raise ValueError(f"fuse_skip: shape mismatch {gated.shape} vs {upsampled.shape}")
    return ops.concat([gated, upsampled], axis=1)
