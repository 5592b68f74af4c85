"""Finite-difference checks over every layer type, every loss and a tiny full network.

Each check builds a float64 parameter store (inputs included, so input
gradients are probed too) and a scalar function of it. Coverage of the
primitive registry is read off the tapes the checks actually record.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kanblocks as kb
from .attention import attention_gate, fuse_skip, init_attention_gate
from .losses import ContrastiveBatch, LossWeights, bce, dice_loss, hybrid_loss, interleaved_pairing, jaccard_loss, lpcl
from .network import ModelConfig, build, forward
from .numerics import ops
from .numerics.gradcheck import GradCheckReport, finite_diff_check
from .numerics.params import ParamStore
from .numerics.tensor import GradTape, Tensor

TOL = 1e-4
EPS = 1e-5


@dataclass
class Check:
    name: str
    setup: Callable[[np.random.Generator], tuple[Callable, ParamStore]]
    max_elements: int | None = None


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    ops_used: set[str]
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


@dataclass
class SuiteResult:
    results: list[CheckResult] = field(default_factory=list)
    uncovered: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results) and not self.uncovered

    @property
    def failed(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def table(self) -> str:
        lines = [f"{'check':28s} {'status':6s} {'max_rel_err':>11s} {'kinks':>5s}  ops"]
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            ops_txt = ",".join(sorted(r.ops_used))
            lines.append(f"{r.name:28s} {status:6s} {r.report.max_rel_error:11.2e} {r.report.n_kinks:5d}  {ops_txt}")
        if self.uncovered:
            lines.append(f"primitives without a check: {', '.join(self.uncovered)}")
        return "\n".join(lines)


def _store(rng, **arrays) -> ParamStore:
    st = ParamStore(dtype=np.dtype(np.float64))
    for k, v in arrays.items():
        st.add(k, v)
    return st


def _sq(y):
    """Sum of squares against a fixed random weighting: exercises every output element."""
    w = np.random.default_rng(99).normal(size=y.shape)
    return ops.sum(ops.mul(ops.mul(y, y), w))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# ---------------------------------------------------------------- checks


def _elementwise(rng):
    st = _store(rng, a=_away_from_zero(rng, (2, 3)), b=rng.uniform(0.5, 2.0, size=(2, 3)), c=rng.normal(size=(3,)))

    def f(s):
        a, b, c = s["a"], s["b"], s["c"]
        y = ops.add(ops.mul(ops.sub(a, c), ops.div(a, b)), ops.neg(ops.exp(ops.mul(c, 0.5))))
        y = ops.add(y, ops.log(b))
        y = ops.add(ops.relu(y), ops.add(ops.sigmoid(a), ops.silu(ops.mul(b, c))))
        y = ops.add(y, ops.clip(ops.mul(a, 0.3), -0.2, 0.2))
        return _sq(y)

    return f, st


def _shape_ops(rng):
    st = _store(rng, a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(2, 2, 4)), m=rng.normal(size=(4, 3)))

    def f(s):
        x = ops.concat([s["a"], s["b"]], axis=1)  # [2, 5, 4]
        x = ops.transpose(x, (0, 2, 1))  # [2, 4, 5]
        x = ops.reshape(x, (8, 5))
        y = ops.matmul(ops.reshape(s["a"], (6, 4)), s["m"])
        return ops.add(_sq(x), ops.add(_sq(y), ops.sum(ops.mean(ops.mul(s["m"], s["m"]), axis=0))))

    return f, st


def _softmax_ops(rng):
    st = _store(rng, a=rng.normal(size=(3, 4, 2)))
    where = rng.uniform(size=(3, 4, 2)) < 0.7
    where[:, 0, :] = True

    def f(s):
        z = ops.l2_normalize(s["a"], axis=1)
        return ops.add(_sq(ops.logsumexp(s["a"], axis=1, where=where)), _sq(z))

    return f, st


def _conv(rng):
    st = _store(rng, x=rng.normal(size=(2, 2, 4, 4)), w=rng.normal(size=(3, 2, 3, 3)), b=rng.normal(size=3))
    w1 = rng.normal(size=(3, 2, 1, 1))

    def f(s):
        y = ops.conv2d(s["x"], s["w"], s["b"], stride=1, padding=1)
        z = ops.conv2d(s["x"], s["w"], s["b"], stride=2, padding=1)
        u = ops.conv2d(s["x"], Tensor(w1), s["b"], stride=1, padding=0)
        return ops.add(_sq(y), ops.add(_sq(z), _sq(u)))

    return f, st


def _dwconv_pointwise(rng):
    st = _store(rng, x=rng.normal(size=(2, 3, 4, 4)), k=rng.normal(size=(3, 3, 3)), b=rng.normal(size=3),
                w=rng.normal(size=(3, 2)), c=rng.normal(size=2))  # fmt: skip

    def f(s):
        return _sq(ops.pointwise(ops.dwconv3x3(s["x"], s["k"], s["b"]), s["w"], s["c"]))

    return f, st


def _pool(rng):
    # distinct values keep every window's argmax unique
    x = rng.permutation(32).reshape(2, 1, 4, 4) * 0.1 + rng.normal(size=(2, 1, 4, 4)) * 0.01
    st = _store(rng, x=x)
    return (lambda s: _sq(ops.max_pool2x2(s["x"]))), st


def _upsample(rng):
    st = _store(rng, x=rng.normal(size=(2, 2, 2, 3)))

    def f(s):
        return ops.add(_sq(ops.bilinear_upsample2x(s["x"])), _sq(ops.resize_bilinear(s["x"], (3, 4))))

    return f, st


def _batch_norm(rng):
    st = _store(rng, x=rng.normal(size=(3, 2, 3, 3)), g=rng.normal(size=2), b=rng.normal(size=2))
    stats = ops.RunningStats(2)
    stats.mean[...] = rng.normal(size=2)
    stats.var[...] = rng.uniform(0.5, 2.0, size=2)
    frozen = ops.RunningStats(2)
    frozen.mean[...], frozen.var[...] = stats.mean, stats.var

    def f(s):
        train = ops.batch_norm(s["x"], s["g"], s["b"], None, True)
        evalm = ops.batch_norm(s["x"], s["g"], s["b"], frozen, False)
        return ops.add(_sq(train), _sq(evalm))

    return f, st


def _layer_norm(rng):
    st = _store(rng, x=rng.normal(size=(2, 3, 4)), g=rng.normal(size=4), b=rng.normal(size=4))
    return (lambda s: _sq(ops.layer_norm(s["x"], s["g"], s["b"]))), st


def _kan_layer(rng):
    spec = kb.SplineSpec()
    st = ParamStore(dtype=np.dtype(np.float64))
    params = kb.init_kan_layer(st, "kan", 3, 2, spec, rng)
    st.entries["kan.coef"].value.data[...] = rng.normal(size=params.coef.shape)
    st.add("x", rng.uniform(-1.9, 1.9, size=(4, 3)))
    return (lambda s: _sq(kb.kan_layer_forward(s["x"], params, spec))), st


def _tokenized_block(variant):
    def setup(rng):
        st = ParamStore(dtype=np.dtype(np.float64))
        block = kb.init_tokenized_kan_block(st, "blk", 3, kb.SplineSpec(), rng, variant=variant)
        st.add("x", rng.normal(size=(2, 3, 4, 4)))
        return (lambda s: _sq(kb.tokenized_kan_block(s["x"], block, training=True))), st

    return setup


def _attention(rng):
    st = ParamStore(dtype=np.dtype(np.float64))
    params = init_attention_gate(st, "ag", 2, 3, rng)
    st.entries["ag.b_g"].value.data[...] = rng.normal(size=params.b_g.shape)
    st.entries["ag.b_psi"].value.data[...] = rng.normal(size=1)
    st.add("x", rng.normal(size=(2, 2, 4, 4)))
    st.add("g", rng.normal(size=(2, 3, 2, 2)))
    st.add("u", rng.normal(size=(2, 3, 4, 4)))

    def f(s):
        out = attention_gate(s["x"], s["g"], params)
        return _sq(fuse_skip(out.gated, s["u"]))

    return f, st


def _seg_losses(rng):
    st = _store(rng, p=rng.uniform(0.05, 0.95, size=(2, 1, 4, 4)))
    y = (rng.uniform(size=(2, 1, 4, 4)) < 0.4).astype(np.float64)

    def f(s):
        return ops.add(bce(s["p"], y), ops.add(ops.mul(dice_loss(s["p"], y), 0.7), ops.mul(jaccard_loss(s["p"], y), 1.3)))

    return f, st


def _lpcl(mode):
    def setup(rng):
        st = _store(rng, f=rng.normal(size=(4, 3, 2, 2)))
        lab = rng.integers(0, 2, size=(4, 2, 2))
        pairing = interleaved_pairing(4)
        return (lambda s: lpcl(ContrastiveBatch(s["f"], lab, pairing, tau=0.5), mode)), st

    return setup


def _network(rng):
    cfg = ModelConfig(channels=(2, 4, 8, 16, 32), dtype="float64", seed=int(rng.integers(1 << 30)))
    model = build(cfg)
    # two patches x two views: four samples keep the 1x1 bottleneck batch norm well conditioned
    x = rng.uniform(size=(4, 1, 16, 16))
    labels = np.repeat((rng.uniform(size=(2, 16, 16)) < 0.3).astype(np.float64), 2, axis=0)
    model.store.add("input", x)
    weights = LossWeights()

    def f(s):
        prob, feats = forward(model, s["input"], training=True)
        batch = ContrastiveBatch(feats[5], np.zeros((4, 1, 1), dtype=int), interleaved_pairing(4))
        total, _ = hybrid_loss(prob, labels[:, None], batch, weights)
        return total

    return f, model.store


CHECKS: list[Check] = [
    Check("elementwise", _elementwise),
    Check("shape_and_matmul", _shape_ops),
    Check("logsumexp_l2norm", _softmax_ops),
    Check("conv2d", _conv),
    Check("dwconv_pointwise", _dwconv_pointwise),
    Check("max_pool2x2", _pool),
    Check("bilinear_resize", _upsample),
    Check("batch_norm", _batch_norm),
    Check("layer_norm", _layer_norm),
    Check("kan_layer", _kan_layer),
    Check("tokenized_kan_block", _tokenized_block("kan")),
    Check("tokenized_mlp_block", _tokenized_block("mlp")),
    Check("attention_gate_fuse", _attention),
    Check("bce_dice_jaccard", _seg_losses),
    Check("lpcl_label_masked", _lpcl("label_masked")),
    Check("lpcl_view_only", _lpcl("view_only")),
    Check("network_16x16", _network, max_elements=4),
]


def _ops_used(f, store) -> set[str]:
    with GradTape() as tape:
        f(store)
    return {n.op for n in tape.nodes}


def run_check(check: Check, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    f, store = check.setup(rng)
    t0 = time.perf_counter()
    used = _ops_used(f, store)
    report = finite_diff_check(f, store, eps=EPS, tol=TOL, max_elements=check.max_elements, seed=seed)
    return CheckResult(check.name, report, used, time.perf_counter() - t0)


def run_suite(names: list[str] | None = None, seed: int = 0) -> SuiteResult:
    """Run the selected checks (all by default) and report registry coverage."""
    from .numerics.ops import PRIMITIVES

    chosen = [c for c in CHECKS if names is None or c.name in names]
    unknown = set(names or ()) - {c.name for c in CHECKS}
    if unknown:
        raise KeyError(f"unknown checks: {sorted(unknown)}")
    results = [run_check(c, seed) for c in chosen]
    covered = set().union(*(r.ops_used for r in results)) if results else set()
    uncovered = sorted(set(PRIMITIVES) - covered) if names is None else []
    return SuiteResult(results, uncovered)
