"""B-spline bases, KAN layers and the tokenized KAN block.

A KAN layer replaces the weight matrix of a linear layer by one learnable
univariate function per (input, output) edge::

    phi_pq(t) = w_base[p, q] * silu(t) + w_spline[p, q] * sum_i coef[p, q, i] * B_i(t)
    y_q = sum_p phi_pq(x_p)

with ``B_i`` the order-k B-spline basis on a uniform grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ops
from .numerics.ops import primitive, silu_grad
from .numerics.params import ParamStore, uniform_fan_in
from .numerics.tensor import Tensor


@dataclass(frozen=True)
class SplineSpec:
    grid_min: float = -2.0
    grid_max: float = 2.0
    grid_count: int = 5
    order: int = 3

    def __post_init__(self):
        if not self.grid_min < self.grid_max:
            raise ValueError(f"grid_min {self.grid_min} must be below grid_max {self.grid_max}")
        if self.grid_count < 1 or self.order < 1:
            raise ValueError(f"need grid_count >= 1 and order >= 1, got {self.grid_count}, {self.order}")

    @property
    def step(self) -> float:
        return (self.grid_max - self.grid_min) / self.grid_count

    @property
    def n_basis(self) -> int:
        return self.grid_count + self.order

    def knots(self) -> np.ndarray:
        """Uniform knots over [grid_min, grid_max] extended by ``order`` knots per side."""
        k = self.order
        return self.grid_min + self.step * np.arange(-k, self.grid_count + k + 1)


def _local_basis(x: np.ndarray, spec: SplineSpec, derivative: bool = False):
    """Nonzero basis values at each (already clamped) ``x`` by Cox-de Boor recursion.

    Returns ``(first, values, slopes)`` where ``values[..., r]`` is basis
    function ``first + r`` (r = 0..k) and ``slopes`` its derivative (or None).
    With uniform knots every ratio in the recursion reduces to the local
    coordinate ``u`` in [0, 1) of ``x`` inside its knot interval.
    """
    k, G = spec.order, spec.grid_count
    pos = (x - spec.grid_min) / spec.step
    # the right domain end belongs to the last interval
    span = np.clip(np.floor(pos), 0, G - 1)
    u = pos - span
    N = [np.ones_like(x)]
    lower = None
    for d in range(1, k + 1):
        if d == k:
            lower = N
        nxt = []
        saved = np.zeros_like(x)
        for r in range(d):
            temp = N[r] / d
            nxt.append(saved + (r + 1 - u) * temp)
            saved = (u + d - r - 1) * temp
        nxt.append(saved)
        N = nxt
    values = np.stack(N, axis=-1)
    slopes = None
    if derivative:
        zero = np.zeros_like(x)
        padded = [zero] + lower + [zero]
        slopes = np.stack([(padded[r] - padded[r + 1]) / spec.step for r in range(k + 1)], axis=-1)
    return span.astype(np.int64), values, slopes


def _dense(first: np.ndarray, values: np.ndarray, n_basis: int) -> np.ndarray:
    out = np.zeros(first.shape + (n_basis,), dtype=values.dtype)
    idx = first[..., None] + np.arange(values.shape[-1])
    np.put_along_axis(out, idx, values, axis=-1)
    return out


def bspline_basis_array(x, spec: SplineSpec) -> np.ndarray:
    """Basis values for every element of ``x`` (clamped to the domain), shape ``x.shape + (G+k,)``."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    x = np.clip(x, spec.grid_min, spec.grid_max)
    first, values, _ = _local_basis(x, spec)
    return _dense(first, values, spec.n_basis)


def bspline_basis(x: float, spec: SplineSpec) -> np.ndarray:
    """Vector of the ``G + k`` basis functions at scalar ``x``."""
    return bspline_basis_array(np.float64(x), spec)


def bspline_basis_derivative(x, spec: SplineSpec) -> np.ndarray:
    """d/dx of each basis function at ``x`` (clamped to the domain)."""
    x = np.clip(np.asarray(x, dtype=np.float64), spec.grid_min, spec.grid_max)
    first, _, slopes = _local_basis(x, spec, derivative=True)
    return _dense(first, slopes, spec.n_basis)


@primitive("kan_layer")
class KanLayer:
    @staticmethod
    def forward(ctx, x, coef, w_base, w_spline, *, spec: SplineSpec):
        M, n_in = x.shape
        if coef.shape[0] != n_in:
            raise ValueError(f"kan_layer: input width {n_in} does not match parameters ({coef.shape[0]})")
        n_out, nb = coef.shape[1], coef.shape[2]
        xc = np.clip(x, spec.grid_min, spec.grid_max)
        first, values, slopes = _local_basis(xc, spec, derivative=True)
        basis = _dense(first, values, nb).reshape(M, n_in * nb)
        eff = (coef * w_spline[..., None]).transpose(0, 2, 1).reshape(n_in * nb, n_out)
        sx = x * ops._sigmoid(x)
        ctx.x, ctx.first, ctx.slopes, ctx.basis, ctx.eff, ctx.sx = x, first, slopes, basis, eff, sx
        ctx.coef, ctx.w_base, ctx.w_spline, ctx.spec = coef, w_base, w_spline, spec
        return sx @ w_base + basis @ eff

    @staticmethod
    def backward(ctx, g):
        x, spec = ctx.x, ctx.spec
        M, n_in = x.shape
        n_out, nb = ctx.coef.shape[1], ctx.coef.shape[2]
        g_wb = ctx.sx.T @ g
        g_eff = (ctx.basis.T @ g).reshape(n_in, nb, n_out).transpose(0, 2, 1)
        g_coef = g_eff * ctx.w_spline[..., None]
        g_ws = (g_eff * ctx.coef).sum(axis=-1)
        g_basis = (g @ ctx.eff.T).reshape(M, n_in, nb)
        idx = ctx.first[..., None] + np.arange(spec.order + 1)
        g_local = np.take_along_axis(g_basis, idx, axis=-1)
        inside = (x >= spec.grid_min) & (x <= spec.grid_max)
        g_x = silu_grad(x) * (g @ ctx.w_base.T) + inside * (g_local * ctx.slopes).sum(axis=-1)
        return g_x, g_coef, g_wb, g_ws


@dataclass
class KanLayerParams:
    coef: Tensor  # [n_in, n_out, G+k]
    w_base: Tensor  # [n_in, n_out]
    w_spline: Tensor  # [n_in, n_out]

    def __post_init__(self):
        lead = self.coef.shape[:2]
        if self.w_base.shape != lead or self.w_spline.shape != lead:
            raise ValueError("coef, w_base and w_spline must share the [n_in, n_out] shape")


def init_kan_layer(store: ParamStore, prefix: str, n_in: int, n_out: int, spec: SplineSpec, rng) -> KanLayerParams:
    return KanLayerParams(
        coef=store.add(f"{prefix}.coef", rng.uniform(-0.1, 0.1, size=(n_in, n_out, spec.n_basis))),
        w_base=store.add(f"{prefix}.w_base", uniform_fan_in(rng, (n_in, n_out), n_in)),
        w_spline=store.add(f"{prefix}.w_spline", np.ones((n_in, n_out))),
    )


def kan_layer_forward(x, params: KanLayerParams, spec: SplineSpec) -> Tensor:
    """Apply one KAN layer to ``x`` of shape [batch, n_in]."""
    return ops.apply(KanLayer, x, params.coef, params.w_base, params.w_spline, spec=spec)


@dataclass
class MlpLayer:
    weight: Tensor  # [n_in, n_out]
    bias: Tensor  # [n_out]


def init_mlp_layer(store: ParamStore, prefix: str, n_in: int, n_out: int, rng) -> MlpLayer:
    return MlpLayer(
        store.add(f"{prefix}.weight", uniform_fan_in(rng, (n_in, n_out), n_in)),
        store.add(f"{prefix}.bias", np.zeros(n_out)),
    )


def mlp_block(x, layers: list[MlpLayer]) -> Tensor:
    """Affine layers with ReLU between them (none after the last)."""
    for i, layer in enumerate(layers):
        if i:
            x = ops.relu(x)
        x = ops.add(ops.matmul(x, layer.weight), layer.bias)
    return x


# ---------------------------------------------------------------- tokens


@dataclass
class TokenGrid:
    tokens: Tensor  # [B, T, D]
    hw: tuple[int, int]


def _to_tokens(x) -> Tensor:
    B, C, H, W = x.shape
    return ops.transpose(ops.reshape(x, (B, C, H * W)), (0, 2, 1))


def _to_map(tokens, hw) -> Tensor:
    B, T, D = tokens.shape
    return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (B, D, hw[0], hw[1]))


def tokenize(x, proj) -> TokenGrid:
    """One token per spatial position, projected to the embedding width."""
    if proj.shape[0] != x.shape[1]:
        raise ValueError(f"tokenize: projection expects {proj.shape[0]} channels, input has {x.shape[1]}")
    return TokenGrid(ops.matmul(_to_tokens(x), proj), tuple(x.shape[2:]))


def detokenize(grid: TokenGrid, proj_out) -> Tensor:
    if proj_out.shape[0] != grid.tokens.shape[-1]:
        raise ValueError(f"detokenize: projection expects width {proj_out.shape[0]}, tokens have {grid.tokens.shape[-1]}")
    return _to_map(ops.matmul(grid.tokens, proj_out), grid.hw)


def dwconv3x3(x, kernel, bias) -> Tensor:
    return ops.dwconv3x3(x, kernel, bias)


@dataclass
class TokenizedKanBlock:
    """Parameters and batch-norm buffers of one tokenized KAN block."""

    spec: SplineSpec
    proj: Tensor
    layers: list  # KanLayerParams or [MlpLayer]
    dw_kernel: list[Tensor]
    bn_gamma: list[Tensor]
    bn_beta: list[Tensor]
    bn_stats: list[ops.RunningStats]
    proj_out: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    variant: str = "kan"
    buffers: dict = field(default_factory=dict)


def init_tokenized_kan_block(
    store: ParamStore, prefix: str, channels: int, spec: SplineSpec, rng, n_layers: int = 3, variant: str = "kan"
) -> TokenizedKanBlock:
    if variant not in ("kan", "mlp"):
        raise ValueError(f"unknown bottleneck variant {variant!r}")
    C = channels
    proj = store.add(f"{prefix}.proj", uniform_fan_in(rng, (C, C), C))
    layers, dwk, gam, bet, stats = [], [], [], [], []
    for i in range(n_layers):
        p = f"{prefix}.layer{i}"
        if variant == "kan":
            layers.append(init_kan_layer(store, f"{p}.kan", C, C, spec, rng))
        else:
            layers.append([init_mlp_layer(store, f"{p}.mlp", C, C, rng)])
        dwk.append(store.add(f"{p}.dw.kernel", uniform_fan_in(rng, (C, 3, 3), 9)))
        gam.append(store.add(f"{p}.bn.gamma", np.ones(C)))
        bet.append(store.add(f"{p}.bn.beta", np.zeros(C)))
        stats.append(ops.RunningStats(C, dtype=store.dtype))
    block = TokenizedKanBlock(
        spec=spec,
        proj=proj,
        layers=layers,
        dw_kernel=dwk,
        bn_gamma=gam,
        bn_beta=bet,
        bn_stats=stats,
        proj_out=store.add(f"{prefix}.proj_out", uniform_fan_in(rng, (C, C), C)),
        ln_gamma=store.add(f"{prefix}.ln.gamma", np.ones(C)),
        ln_beta=store.add(f"{prefix}.ln.beta", np.zeros(C)),
        variant=variant,
    )
    block.buffers = {f"{prefix}.layer{i}.bn": s for i, s in enumerate(stats)}
    return block


def tokenized_kan_block(x, block: TokenizedKanBlock, training: bool = True) -> Tensor:
    """LN(x + detokenize(branch(tokenize(x)))) with a resolution-preserving branch.

    The branch runs each KAN (or MLP) layer on the tokens, then maps the
    tokens back to a [B, D, H, W] grid for depth-wise conv, batch norm and ReLU.
    """
    B, C, H, W = x.shape
    grid = tokenize(x, block.proj)
    t = grid.tokens
    D = t.shape[-1]
    for i, layer in enumerate(block.layers):
        flat = ops.reshape(t, (B * H * W, D))
        if block.variant == "kan":
            flat = kan_layer_forward(flat, layer, block.spec)
        else:
            flat = mlp_block(flat, layer)
        m = _to_map(ops.reshape(flat, (B, H * W, D)), (H, W))
        # no conv bias: the batch norm right after removes any per-channel constant
        m = dwconv3x3(m, block.dw_kernel[i], np.zeros(D, dtype=m.data.dtype))
        m = ops.batch_norm(m, block.bn_gamma[i], block.bn_beta[i], block.bn_stats[i], training)
        m = ops.relu(m)
        t = _to_tokens(m)
    branch = ops.matmul(t, block.proj_out)
    out = ops.layer_norm(ops.add(_to_tokens(x), branch), block.ln_gamma, block.ln_beta)
    return _to_map(out, (H, W))
