import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attukan import kanblocks as kb
from attukan.kanblocks import SplineSpec
from attukan.numerics import ops
from attukan.numerics.gradcheck import finite_diff_check
from attukan.numerics.params import ParamStore
from attukan.numerics.tensor import Tensor
from oracles import basis_vector, kan_layer_loop

seeds = st.integers(0, 2**31 - 1)
specs = st.builds(
    SplineSpec,
    grid_min=st.sampled_from([-2.0, -1.0, 0.0]),
    grid_max=st.sampled_from([1.0, 2.5]),
    grid_count=st.integers(1, 8),
    order=st.integers(1, 4),
)


# ---------------------------------------------------------------- basis


def test_knot_vector():
    spec = SplineSpec(-1.0, 1.0, 5, 3)
    np.testing.assert_allclose(spec.knots(), -1.0 + 0.4 * np.arange(-3, 9), atol=1e-15)
    assert spec.n_basis == 8


@given(specs, st.floats(0.0, 1.0, exclude_max=True))
def test_partition_nonnegativity_local_support(spec, u):
    x = spec.grid_min + u * (spec.grid_max - spec.grid_min)
    b = kb.bspline_basis(x, spec)
    assert b.shape == (spec.n_basis,)
    assert abs(b.sum() - 1.0) < 1e-9
    assert np.all(b >= 0)
    assert np.count_nonzero(b) <= spec.order + 1


@given(specs, st.floats(0.0, 1.0, exclude_max=True))
def test_basis_matches_cox_de_boor_oracle(spec, u):
    x = spec.grid_min + u * (spec.grid_max - spec.grid_min)
    ref = basis_vector(x, spec.grid_min, spec.grid_max, spec.grid_count, spec.order)
    np.testing.assert_allclose(kb.bspline_basis(x, spec), ref, atol=1e-12)


def test_reference_point():
    spec = SplineSpec(-1.0, 1.0, 5, 3)
    np.testing.assert_allclose(kb.bspline_basis(0.3, spec), basis_vector(0.3, -1.0, 1.0, 5, 3), atol=1e-12)


def test_linear_hat_at_node():
    spec = SplineSpec(-1.0, 1.0, 4, 1)
    b = kb.bspline_basis(0.0, spec)
    assert np.count_nonzero(b) == 1 and b.max() == 1.0


@given(specs, st.floats(0.02, 0.98))
def test_derivative_matches_central_difference(spec, u):
    x = spec.grid_min + u * (spec.grid_max - spec.grid_min)
    h = 1e-6
    num = (kb.bspline_basis(x + h, spec) - kb.bspline_basis(x - h, spec)) / (2 * h)
    ana = kb.bspline_basis_derivative(np.array([x]), spec)[0]
    # a knot within h makes the derivative one-sided for k = 1
    knots = spec.knots()
    if spec.order == 1 and np.min(np.abs(knots - x)) < 2 * h:
        return
    np.testing.assert_allclose(ana, num, atol=1e-5 * max(1.0, np.abs(num).max()))


# ---------------------------------------------------------------- KAN layer


def layer(rng, n_in, n_out, spec, scale=1.0):
    store = ParamStore()
    p = kb.init_kan_layer(store, "k", n_in, n_out, spec, rng)
    p.coef.data[...] = rng.normal(size=p.coef.shape) * scale
    p.w_spline.data[...] = rng.normal(size=p.w_spline.shape)
    return store, p


def test_kan_layer_matches_loop(rng):
    spec = SplineSpec(-2.0, 2.0, 5, 3)
    store, p = layer(rng, 3, 2, spec, 0.3)
    x = rng.uniform(-1.9, 1.9, size=(2, 3))
    y = kb.kan_layer_forward(Tensor(x), p, spec).data
    ref = kan_layer_loop(x, p.coef.data, p.w_base.data, p.w_spline.data, -2.0, 2.0, 5, 3)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_kan_layer_spline_off_is_silu(rng):
    spec = SplineSpec()
    store, p = layer(rng, 3, 3, spec)
    p.w_spline.data[...] = 0.0
    p.w_base.data[...] = np.eye(3)
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(kb.kan_layer_forward(Tensor(x), p, spec).data, x / (1 + np.exp(-x)), atol=1e-14)


def test_kan_layer_constant_coefficients(rng):
    spec = SplineSpec()
    store, p = layer(rng, 2, 3, spec)
    p.w_base.data[...] = 0.0
    kappa = rng.normal(size=(2, 3))
    p.coef.data[...] = kappa[..., None]
    x = rng.uniform(-1.9, 1.9, size=(5, 2))
    expect = np.broadcast_to((p.w_spline.data * kappa).sum(axis=0), (5, 3))
    np.testing.assert_allclose(kb.kan_layer_forward(Tensor(x), p, spec).data, expect, atol=1e-12)


@given(seeds)
def test_kan_layer_linear_in_coefficients(seed):
    r = np.random.default_rng(seed)
    spec = SplineSpec()
    store, p = layer(r, 3, 2, spec)
    x = Tensor(r.uniform(-2.5, 2.5, size=(4, 3)))
    base = x.data / (1 + np.exp(-x.data)) @ p.w_base.data
    y1 = kb.kan_layer_forward(x, p, spec).data - base
    p.coef.data[...] *= 2.0
    y2 = kb.kan_layer_forward(x, p, spec).data - base
    np.testing.assert_allclose(y2, 2.0 * y1, atol=1e-10)


@given(seeds)
def test_kan_layer_gradients(seed):
    r = np.random.default_rng(seed)
    spec = SplineSpec(-1.0, 1.0, 4, 3)
    store, p = layer(r, 3, 2, spec, 0.5)
    # keep inputs inside the grid and off the knots: the clamp is a kink at the boundary
    store.add("x", r.uniform(-0.95, 0.95, size=(4, 3)))
    w = r.normal(size=(4, 2))
    rep = finite_diff_check(lambda s: ops.sum(ops.mul(kb.kan_layer_forward(s["x"], p, spec), w)), store)
    assert rep.passed, rep.summary()


# ---------------------------------------------------------------- tokens and blocks


def test_tokenize_identity_roundtrip(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    grid = kb.tokenize(Tensor(x), Tensor(np.eye(3)))
    np.testing.assert_array_equal(grid.tokens.data, x.reshape(2, 3, 20).transpose(0, 2, 1))
    np.testing.assert_array_equal(kb.detokenize(grid, Tensor(np.eye(3))).data, x)


def test_tokenize_constant_and_hand_arithmetic(rng):
    grid = kb.tokenize(Tensor(np.full((1, 2, 3, 3), 0.4)), Tensor(rng.normal(size=(2, 4))))
    assert np.all(grid.tokens.data == grid.tokens.data[:, :1])
    x = rng.normal(size=(1, 2, 2, 2))
    proj = rng.normal(size=(2, 3))
    tok = kb.tokenize(Tensor(x), Tensor(proj)).tokens.data
    for t, (yy, xx) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        np.testing.assert_allclose(tok[0, t], x[0, :, yy, xx] @ proj, atol=1e-14)


def test_dwconv_identity_and_border_counts():
    x = np.full((1, 2, 4, 5), 1.5)
    k = np.zeros((2, 3, 3))
    k[:, 1, 1] = 1.0
    np.testing.assert_array_equal(kb.dwconv3x3(Tensor(x), Tensor(k), Tensor(np.zeros(2))).data, x)
    y = kb.dwconv3x3(Tensor(x), Tensor(np.ones((2, 3, 3))), Tensor(np.zeros(2))).data[0, 0]
    # count of in-image neighbours of each pixel
    ny = np.array([2, 3, 3, 2])[:, None]
    nx = np.array([2, 3, 3, 3, 2])[None, :]
    np.testing.assert_allclose(y, 1.5 * ny * nx)


def block(rng, C=3, variant="kan"):
    store = ParamStore()
    blk = kb.init_tokenized_kan_block(store, "b", C, SplineSpec(), rng, variant=variant)
    return store, blk


@pytest.mark.parametrize("hw", [4, 8])
def test_block_shape(rng, hw):
    store, blk = block(rng)
    assert kb.tokenized_kan_block(Tensor(rng.normal(size=(2, 3, hw, hw))), blk).shape == (2, 3, hw, hw)


def test_block_zero_branch_is_layer_norm(rng):
    store, blk = block(rng)
    blk.proj_out.data[...] = 0.0
    x = rng.normal(size=(2, 3, 4, 4))
    y = kb.tokenized_kan_block(Tensor(x), blk).data
    t = x.reshape(2, 3, 16).transpose(0, 2, 1)
    ln = (t - t.mean(-1, keepdims=True)) / np.sqrt(t.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(y, ln.transpose(0, 2, 1).reshape(2, 3, 4, 4), atol=1e-12)


@pytest.mark.parametrize("variant", ["kan", "mlp"])
def test_block_gradients(variant):
    r = np.random.default_rng(3)
    store, blk = block(r, 2, variant)
    store.add("x", r.normal(size=(2, 2, 4, 4)))
    w = r.normal(size=(2, 2, 4, 4))
    rep = finite_diff_check(lambda s: ops.sum(ops.mul(kb.tokenized_kan_block(s["x"], blk), w)), store, max_elements=12)
    assert rep.passed, rep.summary()


def test_mlp_block_cases(rng):
    store = ParamStore()
    l1 = kb.init_mlp_layer(store, "a", 3, 3, rng)
    l1.weight.data[...] = np.eye(3)
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(kb.mlp_block(Tensor(x), [l1]).data, x)
    l2 = kb.init_mlp_layer(store, "b", 3, 2, rng)
    l2.bias.data[...] = rng.normal(size=2)
    l1.weight.data[...] = rng.normal(size=(3, 3))
    expect = np.maximum(x @ l1.weight.data + l1.bias.data, 0) @ l2.weight.data + l2.bias.data
    np.testing.assert_allclose(kb.mlp_block(Tensor(x), [l1, l2]).data, expect, atol=1e-14)
    assert np.all(ops.relu(Tensor(-np.abs(x) - 0.1)).data == 0)
