"""Acceptance criteria 1-10. The terminal summary prints one PASS/FAIL line per criterion."""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from attukan import checkpoint as ckpt
from attukan import data as D
from attukan import kanblocks as kb
from attukan.ablation import run_ablation
from attukan.attention import attention_gate, init_attention_gate
from attukan.config import RunConfig, parse_config
from attukan.gradsuite import run_suite
from attukan.losses import ContrastiveBatch, interleaved_pairing, lpcl
from attukan.metrics import ConfusionCounts, basic_metrics, cal_metrics, hd95
from attukan.network import ModelConfig, build
from attukan.numerics.params import ParamStore
from attukan.numerics.tensor import Tensor
from attukan.training import LOG_NAME, evaluate, predict_full, train
from oracles import basis_vector, cal_metrics_sets, hd95_brute

crit = pytest.mark.criterion


# ---------------------------------------------------------------- 1


@crit(1, "gradient suite matches finite differences, full network included, < 2 min")
def test_gradient_suite(report):
    t0 = time.perf_counter()
    suite = run_suite()
    dt = time.perf_counter() - t0
    worst = max(r.report.max_rel_error for r in suite.results)
    kinks = sum(r.report.n_kinks for r in suite.results)
    report(f"{len(suite.results)} checks, worst rel err {worst:.2e} ({kinks} kink probes excluded), {dt:.1f}s")
    assert suite.passed, suite.table()
    assert not suite.uncovered
    assert "network_16x16" in {r.name for r in suite.results}
    assert dt < 120


# ---------------------------------------------------------------- 2


@crit(2, "spline partition of unity (1e-9) and Cox-de Boor oracle (1e-12)")
def test_spline_correctness(report):
    spec = ModelConfig().kan
    r = np.random.default_rng(2)
    x = r.uniform(spec.grid_min, spec.grid_max, size=1000)
    B = kb.bspline_basis_array(x, spec)
    pou = np.abs(B.sum(axis=-1) - 1).max()
    ref = np.stack([basis_vector(v, spec.grid_min, spec.grid_max, spec.grid_count, spec.order) for v in x])
    err = np.abs(B - ref).max()
    report(f"max |sum B - 1| {pou:.1e}, max oracle diff {err:.1e}")
    assert pou <= 1e-9
    assert err <= 1e-12


# ---------------------------------------------------------------- 3


@crit(3, "HD95 and C/A/L/F agree with brute-force oracles on 200 random mask pairs")
def test_metric_oracles(report):
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        h, w = r.integers(1, 17, size=2)
        p = r.uniform(0.05, 0.7)
        a, b = r.uniform(size=(h, w)) < p, r.uniform(size=(h, w)) < p
        a[r.integers(h), r.integers(w)] = True
        b[r.integers(h), r.integers(w)] = True
        worst = max(worst, abs(hd95(a, b) - hd95_brute(a, b)))
        vm = cal_metrics(a, b)
        assert (vm.c, vm.a, vm.l, vm.f) == cal_metrics_sets(a, b)
    report(f"max HD95 diff {worst:.1e}, C/A/L/F exact")
    assert worst <= 1e-9


# ---------------------------------------------------------------- 4


@crit(4, "IoU = F1/(2-F1) and the published 82.50 -> 70.24 pair")
def test_paper_consistency(report):
    r = np.random.default_rng(4)
    worst = 0.0
    for _ in range(2000):
        tp, fp, tn, fn = (int(v) for v in r.integers(0, 10**6, size=4))
        m = basic_metrics(ConfusionCounts(tp + 1, fp, tn, fn))
        worst = max(worst, abs(m.miou - m.f1 / (2 - m.f1)))
    f1 = 0.8250
    iou = 100 * f1 / (2 - f1)
    report(f"identity err {worst:.1e}; F1 82.50 -> IoU {iou:.2f} vs printed 70.24")
    assert worst <= 1e-12
    assert round(iou, 2) == 70.21
    assert abs(iou - 70.24) <= 0.05


# ---------------------------------------------------------------- 5


@crit(5, "attention coefficients: open interval, exact 0.5, monotone in b_psi")
def test_attention_behavior(report):
    r = np.random.default_rng(5)
    n_probe = 0
    for trial in range(40):
        store = ParamStore(dtype=np.float64)
        p = init_attention_gate(store, "ag", 3, 4, r)
        scale = [0.1, 1.0, 10.0, 100.0][trial % 4]
        for t in (p.w_x, p.w_g, p.psi, p.b_g):
            t.data[...] = r.normal(size=t.shape) * scale
        x, g = Tensor(r.normal(size=(2, 3, 8, 8)) * scale), Tensor(r.normal(size=(2, 4, 4, 4)) * scale)
        prev = None
        for b in np.linspace(-60, 60, 13):
            p.b_psi.data[...] = b
            a = attention_gate(x, g, p).alpha.data
            assert np.all(a > 0) and np.all(a < 1)
            if prev is not None:
                assert np.all(a >= prev)
            prev = a
            n_probe += 1
        p.psi.data[...] = 0.0
        p.b_psi.data[...] = 0.0
        assert np.all(attention_gate(x, g, p).alpha.data == 0.5)
    report(f"{n_probe} probes, weight scales up to 100")


# ---------------------------------------------------------------- 6


def _class_features(labels, basis):
    """[2N, S, S] labels -> [2N, D, S, S] features: class c at every pixel gets basis row c."""
    return np.moveaxis(basis[labels], -1, 1)


@crit(6, "LPCL lower on class-consistent features than on shuffled ones, 50/50 trials")
@pytest.mark.parametrize("mode", ["label_masked", "view_only"])
def test_lpcl_ordering(mode, report):
    gaps = []
    for seed in range(50):
        r = np.random.default_rng(seed)
        n, d, s = 8, 4, 3
        pair_labels = (r.uniform(size=(n // 2, s, s)) < r.uniform(0.2, 0.8)).astype(int)
        labels = np.repeat(pair_labels, 2, axis=0)  # views 2i, 2i+1 share a source patch
        basis = special_ortho_group.rvs(d, random_state=seed)[:2] * r.uniform(0.5, 2.0)
        feats = _class_features(labels, basis)
        pairing = interleaved_pairing(n)
        # permute views independently at every location; a draw that keeps every partner pair
        # on one class is just another valid labelling, so redraw it
        while True:
            perms = np.stack([r.permutation(n) for _ in range(s * s)], axis=-1).reshape(n, s, s)
            shuffled_labels = np.take_along_axis(labels, perms, axis=0)
            if np.any(shuffled_labels != shuffled_labels[pairing]):
                break
        shuffled = _class_features(shuffled_labels, basis)
        good = float(lpcl(ContrastiveBatch(feats, labels, pairing), mode).data)
        bad = float(lpcl(ContrastiveBatch(shuffled, labels, pairing), mode).data)
        gaps.append(bad - good)
    report(f"{mode}: {sum(g > 0 for g in gaps)}/50 strictly lower, min gap {min(gaps):.3f}")
    assert all(g > 0 for g in gaps)


# ---------------------------------------------------------------- 7


SMOKE = RunConfig().with_values(
    model__channels=(8, 16, 32, 64, 128),
    synth__size=128,
    data__n_images=20,
    train__patch_size=64,
    train__epochs=30,
)


@pytest.mark.slow
@crit(7, "30-epoch synthetic run: held-out F1 >= 0.75, loss halves, < 30 min")
def test_training_smoke(report):
    t0 = time.perf_counter()
    res = train(SMOKE)
    dt = time.perf_counter() - t0
    ev = evaluate(lambda s: predict_full(res.model, s.image, SMOKE.train.patch_size), res.split.val)
    f1 = ev["aggregate"]["f1"]
    l1, l30 = res.history[0]["loss"], res.history[-1]["loss"]
    report(f"held-out F1 {f1:.4f}, loss {l1:.4f} -> {l30:.4f} ({l30 / l1:.2f}x), {dt / 60:.1f} min")
    assert len(res.history) == 30
    assert f1 >= 0.75
    assert l30 < 0.5 * l1
    assert dt < 30 * 60


# ---------------------------------------------------------------- 8

# Scaled-down grid: 64 px images, 32 px patches, half-width channels; same image count and epochs.
ABLATION = """\
model.channels = 4, 8, 16, 32, 64
synth.size = 64
data.n_images = 20
train.patch_size = 32
train.patches_per_image = 8
train.batch_size = 8
train.epochs = 30
train.val_fraction = 0.25
"""


@pytest.mark.slow
@crit(8, "ablation over 5 seeds: +AG, +LPCL, both each >= UKAN - 0.005 mean F1")
def test_ablation_direction(report):
    res = run_ablation(parse_config(ABLATION), "attention", seeds=range(5))
    summ = res["summary"]
    base = summ["UKAN"]["f1"]
    deltas = {k: summ[k]["f1"] - base for k in ("UKAN+AG", "UKAN+LPCL", "UKAN+AG+LPCL")}
    report(f"UKAN {base:.4f}; " + ", ".join(f"{k} {v:+.4f}" for k, v in deltas.items()))
    for seed in range(5):
        hashes = {tuple(r["patch_hashes"]) for r in res["rows"] if r["seed"] == seed}
        assert len(hashes) == 1
    for k, v in deltas.items():
        assert v >= -0.005, k


# ---------------------------------------------------------------- 9

DETERMINISM = """\
model.channels = 4, 8, 16, 32, 64
synth.size = 64
data.n_images = 6
train.patch_size = 32
train.patches_per_image = 4
train.batch_size = 4
train.epochs = 3
train.val_fraction = 0.34
"""


@crit(9, "identical seeded runs give byte-identical checkpoints and logs")
def test_determinism(tmp_path, report):
    cfg = parse_config(DETERMINISM)
    for name in ("a", "b"):
        train(cfg, tmp_path / name)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert {"best.ckpt", "best.ckpt.bin", "final.ckpt", "final.ckpt.bin", LOG_NAME} <= set(names)
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    report(f"{len(names)} files identical")


# ---------------------------------------------------------------- 10


@crit(10, "PGM/PPM and checkpoint round-trips exact; truncation gives structured errors")
def test_io_roundtrips(tmp_path, report):
    r = np.random.default_rng(10)
    for shape in ((7, 5), (3, 9, 3), (1, 1)):
        arr = r.integers(0, 256, size=shape).astype(np.uint8)
        D.write_image(tmp_path / "x.img", arr)
        raw = (tmp_path / "x.img").read_bytes()
        back = D.read_image(tmp_path / "x.img")
        assert np.array_equal(np.rint(back * 255).astype(np.uint8), arr) and D.encode_image(back) == raw
        for cut in (len(raw) - 1, len(raw) // 2, 3, 0):
            with pytest.raises(D.ImageFormatError) as e:
                D.decode_image(raw[:cut])
            assert 0 <= e.value.offset <= cut
    assert not list(tmp_path.glob("*.tmp"))

    m = build(ModelConfig(channels=(2, 4, 8, 16, 32)))
    for p in m.store.entries.values():
        p.m[...] = r.normal(size=p.m.shape)
        p.t = 3
    ckpt.save(tmp_path / "m.ckpt", m, None, ckpt.TrainState(epoch=2))
    first = (tmp_path / "m.ckpt.bin").read_bytes()
    back = ckpt.load(tmp_path / "m.ckpt")
    ckpt.save(tmp_path / "n.ckpt", back.model, None, back.state)
    assert (tmp_path / "n.ckpt.bin").read_bytes() == first
    assert (tmp_path / "n.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()
    for name, p in m.store.entries.items():
        assert back.model.store.entries[name].value.data.tobytes() == p.value.data.astype(np.float32).tobytes()

    # a truncated blob is rejected before any model is built or any file is written
    (tmp_path / "m.ckpt.bin").write_bytes(first[:-4])
    before = sorted(p.name for p in tmp_path.iterdir())
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(tmp_path / "m.ckpt")
    cfg = replace(parse_config(DETERMINISM), model=m.config)
    with pytest.raises(ckpt.CheckpointError):
        train(cfg, tmp_path / "resumed", resume=tmp_path / "m.ckpt")
    assert not (tmp_path / "resumed" / "final.ckpt").exists()
    assert not list((tmp_path / "resumed").glob("*.ckpt*"))
    assert sorted(p.name for p in tmp_path.iterdir() if p.name != "resumed") == before
    report(f"{len(first)} byte blob round-trips; truncated image and checkpoint rejected")
