import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attukan.metrics import (
    REPORT_KEYS,
    ConfusionCounts,
    UndefinedEmpty,
    aggregate,
    basic_metrics,
    cal_metrics,
    confusion,
    count_components,
    dilate_disc,
    full_report,
    hd95,
    roc_auc,
    skeletonize,
)
from oracles import (
    auc_pairs,
    cal_metrics_sets,
    components_bfs,
    dilate_loop,
    hausdorff_brute,
    hd95_brute,
    zhang_suen_loop,
)

seeds = st.integers(0, 2**31 - 1)


def random_masks(seed, size=12, p=None):
    r = np.random.default_rng(seed)
    p = r.uniform(0.1, 0.6) if p is None else p
    a = r.uniform(size=(size, size)) < p
    b = r.uniform(size=(size, size)) < p
    a[r.integers(size), r.integers(size)] = True
    b[r.integers(size), r.integers(size)] = True
    return a, b


# ---------------------------------------------------------------- counts and rates


def test_confusion_cases():
    t = np.array([1, 0, 1, 0], dtype=bool)
    assert confusion(t, t).fp == confusion(t, t).fn == 0
    assert confusion(~t, t).tp == confusion(~t, t).tn == 0
    assert confusion(np.array([1, 1, 0, 0]), t) == ConfusionCounts(1, 1, 1, 1)
    assert confusion(np.array([1, 1, 0, 0]), t, np.array([1, 1, 0, 0])) == ConfusionCounts(1, 1, 0, 0)


def test_basic_metrics_hand_case():
    m = basic_metrics(ConfusionCounts(tp=3, fp=1, tn=5, fn=1))
    assert (m.acc, m.se, m.f1, m.miou) == pytest.approx((0.8, 0.75, 0.75, 0.6))
    assert m.sp == pytest.approx(5 / 6)
    assert m.miou_paper_literal == pytest.approx(1.2)
    perfect = basic_metrics(ConfusionCounts(4, 0, 6, 0))
    assert (perfect.acc, perfect.se, perfect.sp, perfect.f1, perfect.miou) == (1, 1, 1, 1, 1)


def test_zero_denominators_listed():
    m = basic_metrics(ConfusionCounts(0, 0, 5, 0))
    assert m.se == 0 and "se" in m.undefined and "f1" in m.undefined


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_miou_f1_identity(tp, fp, tn, fn):
    if tp + fp + fn == 0:
        return
    m = basic_metrics(ConfusionCounts(tp, fp, tn, fn))
    assert abs(m.miou - m.f1 / (2 - m.f1)) <= 1e-12


# ---------------------------------------------------------------- auc


def test_auc_cases():
    assert roc_auc(np.array([0.9, 0.8, 0.1, 0.2]), np.array([1, 1, 0, 0])) == 1.0
    assert roc_auc(np.full(6, 0.3), np.array([1, 0, 1, 0, 0, 1])) == 0.5
    assert roc_auc(np.array([0.9, 0.8, 0.4, 0.3]), np.array([1, 0, 1, 0])) == pytest.approx(0.75)
    with pytest.warns(RuntimeWarning):
        assert roc_auc(np.array([0.2, 0.4]), np.array([1, 1])) == 0.5


@given(seeds)
def test_auc_matches_pair_count_and_monotone_invariance(seed):
    r = np.random.default_rng(seed)
    s = np.round(r.uniform(size=30), 1)  # ties on purpose
    t = r.uniform(size=30) < 0.4
    t[0], t[1] = True, False
    a = roc_auc(s, t)
    assert a == pytest.approx(auc_pairs(s, t), abs=1e-12)
    assert roc_auc(np.exp(3 * s) - 7, t) == pytest.approx(a, abs=1e-12)


# ---------------------------------------------------------------- distances


def test_hd95_cases():
    a = np.zeros((6, 6), dtype=bool)
    b = a.copy()
    a[0, 0] = True
    b[3, 4] = True
    assert hd95(a, b) == 5.0
    assert hd95(a, a) == 0.0
    with pytest.raises(UndefinedEmpty):
        hd95(a, np.zeros_like(a))


@given(seeds)
def test_hd95_brute_force(seed):
    a, b = random_masks(seed)
    h = hd95(a, b)
    assert h == pytest.approx(hd95_brute(a, b), abs=1e-9)
    assert hd95(b, a) == h
    assert h <= hausdorff_brute(a, b) + 1e-12


# ---------------------------------------------------------------- morphology


def test_dilate_cases():
    m = np.zeros((7, 7), dtype=bool)
    m[3, 3] = True
    np.testing.assert_array_equal(dilate_disc(m, 0), m)
    assert dilate_disc(m, 1).sum() == 5
    assert dilate_disc(m, 2).sum() == 13


@given(seeds, st.integers(0, 3))
def test_dilate_oracle_extensive_monotone(seed, r):
    a, _ = random_masks(seed, 10, 0.1)
    d = dilate_disc(a, r)
    np.testing.assert_array_equal(d, dilate_loop(a, r))
    assert np.all(d >= a)
    assert np.all(dilate_disc(a, r + 1) >= d)


@given(seeds)
def test_components_oracle(seed):
    a, _ = random_masks(seed, 14, 0.3)
    assert count_components(a) == components_bfs(a)


def test_skeleton_cases():
    assert not skeletonize(np.zeros((5, 5), dtype=bool)).any()
    diag = np.eye(8, dtype=bool)
    np.testing.assert_array_equal(skeletonize(diag), diag)
    sq = np.zeros((9, 9), dtype=bool)
    sq[2:7, 2:7] = True
    np.testing.assert_array_equal(skeletonize(sq), zhang_suen_loop(sq))


@given(seeds)
def test_skeleton_oracle_and_idempotence(seed):
    a, _ = random_masks(seed, 16, 0.55)
    sk = skeletonize(a)
    np.testing.assert_array_equal(sk, zhang_suen_loop(a))
    np.testing.assert_array_equal(skeletonize(sk), sk)
    assert np.all(sk <= a)


# ---------------------------------------------------------------- C / A / L / F


def test_cal_self_and_empty_prediction():
    g = np.zeros((8, 8), dtype=bool)
    g[2, 0:8] = True
    g[3, 5:7] = True  # one component, 10 pixels
    assert g.sum() == 10 and components_bfs(g) == 1
    same = cal_metrics(g, g)
    assert (same.c, same.a, same.l, same.f) == (1.0, 1.0, 1.0, 1.0)
    vm = cal_metrics(np.zeros_like(g), g)
    assert (vm.c, vm.a, vm.l, vm.f) == pytest.approx((0.9, 0.0, 0.0, 0.0))


@given(seeds)
def test_cal_set_algebra_oracle(seed):
    s, g = random_masks(seed, 16)
    vm = cal_metrics(s, g)
    assert (vm.c, vm.a, vm.l, vm.f) == cal_metrics_sets(s, g)
    for v in (vm.c, vm.a, vm.l, vm.f):
        assert 0.0 <= v <= 1.0
    assert vm.f <= min(vm.c, vm.a, vm.l) + 1e-15


# ---------------------------------------------------------------- reports


def test_full_report_perfect_and_inverted():
    t = np.zeros((16, 16), dtype=np.uint8)
    t[4:12, 7:9] = 1
    r = full_report(t.astype(float), t)
    for k in ("f1", "miou", "auc", "c", "a", "l", "f"):
        assert getattr(r, k) == 1.0
    assert r.hd95 == 0.0
    assert full_report(1.0 - t, t).f1 == 0.0


def test_full_report_snapshot_is_stable():
    r = np.random.default_rng(7)
    prob = r.uniform(size=(16, 16))
    t = (r.uniform(size=(16, 16)) > 0.7).astype(np.uint8)
    a, b = full_report(prob, t).to_json(), full_report(prob.copy(), t.copy()).to_json()
    assert a == b
    d = json.loads(a)
    assert list(d) == list(REPORT_KEYS)
    p, tb = prob >= 0.5, t.astype(bool)
    tp, fp, fn = np.sum(p & tb), np.sum(p & ~tb), np.sum(~p & tb)
    assert d["f1"] == 2 * tp / (2 * tp + fp + fn)


def test_aggregate_skips_undefined():
    t = np.zeros((8, 8), dtype=np.uint8)
    t[2:5, 2:5] = 1
    good = full_report(t.astype(float), t)
    empty_pred = full_report(np.zeros((8, 8)), t)
    agg = aggregate([good, empty_pred])
    assert agg["hd95"] == 0.0 and agg["n_undefined"] == {"hd95": 1}
    assert agg["f1"] == pytest.approx(0.5)
    assert agg["n_images"] == 2
