"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary. Criterion 7
at full scale takes hours on a small machine; it runs only with
``LBV_FULL_E2E=1`` (scale overrides: ``LBV_E2E_SIZE``, ``LBV_E2E_CHANNELS``,
``LBV_E2E_AUGMENT=0``). A reduced run of the same protocol always checks the
mechanics and per-seed determinism.
"""

import contextlib
import io
import os
import time

import numpy as np
import pytest

import lbp_oracle
from acceptance_log import RESULTS as ACCEPTANCE
from gradcases import CASES
from lbvcnn import opcount
from lbvcnn.bank import (
    bank_as_dense_weights,
    bank_from_bytes,
    bank_to_bytes,
    generate_bank,
    load_bank,
    save_bank,
)
from lbvcnn.experiment import normalized_deviation, run_synthetic_benchmark
from lbvcnn.layers import LbvBlock, conv3d_reference, ternary_conv3d
from lbvcnn.lbp import (
    lbp_histogram,
    lbp_top_descriptor,
    nearest_centroid_fit,
    nearest_centroid_predict,
    vlbp_descriptor,
)
from lbvcnn.network import (
    build_fusion,
    build_subnet,
    checkpoint_bytes,
    count_params,
    enumerate_trainable,
    lbv_block_params,
    load_network,
)
from lbvcnn.tensor import Rng, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from lbvcnn.trainer import SGDMomentum, kfold_split, loso_split, subnet_config, train_subnet
from lbvcnn.video import (
    Dataset,
    VideoCuboid,
    augment,
    flip_frames,
    normalize_temporal,
    plane_views,
    rotate_frames,
    synth_dataset,
    unpermute_view,
)


@contextlib.contextmanager
def criterion(n, title, budget=None):
    t0 = time.perf_counter()
    info = {}
    try:
        yield info
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            line = ("SKIP", f"{title}: {exc}")
        else:
            line = ("FAIL", f"{title}: {type(exc).__name__}: {exc}".splitlines()[0])
        ACCEPTANCE[str(n)] = line
        print(f"criterion {n}: {line[0]} - {line[1]}")
        raise
    dt = time.perf_counter() - t0
    detail = f"{title}: {info.get('detail', '')} ({dt:.1f}s)".replace(":  (", ": (")
    if budget is not None and dt > budget:
        ACCEPTANCE[str(n)] = ("FAIL", f"{detail} exceeds the {budget}s budget")
        print(f"criterion {n}: FAIL - {ACCEPTANCE[str(n)][1]}")
        raise AssertionError(ACCEPTANCE[str(n)][1])
    ACCEPTANCE[str(n)] = ("PASS", detail)
    print(f"criterion {n}: PASS - {detail}")


# 1 -------------------------------------------------------------------------

def test_criterion_1_parameter_ratio():
    with criterion(1, "parameter ratio 27", budget=1) as info:
        bank = generate_bank(64, 0.9, seed=0)
        rep = lbv_block_params(64, 64)
        assert rep["pointwise_weights"] == 4096
        assert rep["dense_equivalent_weights"] == 110592
        assert rep["dense_equivalent_weights"] == 27 * rep["pointwise_weights"]

        # enumerate the scalars an optimizer step actually changes in one block
        block = LbvBlock(bank, 64, 64, Rng(0), dtype=np.float64)
        x = np.random.default_rng(0).standard_normal((1, 64, 3, 3, 2))
        out = block.forward(x, training=True)
        block.backward(np.random.default_rng(1).standard_normal(out.shape))
        before = {k: v.copy() for k, v in block.params.items()}
        bank_before = bank.values.copy()
        SGDMomentum(1e-2).step(block.params, block.grads)
        weight_keys = [k for k in block.params if k.endswith("pointwise.weight")]
        updated = sum(int((block.params[k] != before[k]).sum()) for k in weight_keys)
        assert updated == 4096
        assert np.array_equal(bank.values, bank_before)
        dense_w = np.zeros((64, 64, 3, 3, 3))
        assert dense_w.size == 110592 and dense_w.size / updated == 27

        # ParamReport on a full subnet agrees with the live model
        net = build_subnet("xy", 6, bank, cuboid=(16, 16, 11))
        r = count_params(net.spec)
        assert r.trainable_total == enumerate_trainable(net)
        assert r.pointwise_weights == 5 * 4096 and r.fixed_ternary_entries == 1728
        info["detail"] = f"4096 vs 110592, ratio {110592 // updated}"


# 2 -------------------------------------------------------------------------

def test_criterion_2_zero_multiplications():
    with criterion(2, "zero multiplications in the ternary stage", budget=10) as info:
        rng = np.random.default_rng(2)
        totals = {"adds": 0, "subs": 0, "muls": 0}
        for i in range(20):
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
                     *(int(v) for v in rng.integers(1, 7, 3)))
            bank = generate_bank(64, 0.9, seed=i)
            x = rng.standard_normal(shape).astype(np.float32)
            with opcount.counting() as c:
                ternary_conv3d(opcount.instrument(x), bank)
            t = c.totals()
            assert t["muls"] == 0, shape
            assert t["adds"] + t["subs"] > 0
            for k in totals:
                totals[k] += t[k]
        info["detail"] = f"20 shapes, adds={totals['adds']} subs={totals['subs']} muls=0"


# 3 -------------------------------------------------------------------------

def test_criterion_3_kernel_equivalence():
    with criterion(3, "ternary kernel equals dense reference", budget=60) as info:
        rng = np.random.default_rng(3)
        worst = {np.float32: 0.0, np.float64: 0.0}
        tol = {np.float32: 1e-5, np.float64: 1e-12}
        for i in range(200):
            dtype = np.float32 if i % 2 == 0 else np.float64
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                     *(int(v) for v in rng.integers(1, 8, 3)))
            bank = generate_bank(int(rng.integers(1, 65)), float(rng.uniform(0.05, 1.0)),
                                 seed=i)
            x = (rng.standard_normal(shape) * rng.uniform(0.1, 10)).astype(dtype)
            w = np.repeat(bank_as_dense_weights(bank, np.float64)[:, None], shape[1], axis=1)
            ref = conv3d_reference(x.astype(np.float64), w)
            for method in ("add", "gemm"):
                dev = normalized_deviation(ternary_conv3d(x, bank, method), ref)
                worst[dtype] = max(worst[dtype], dev)
                assert dev <= tol[dtype], (i, method, dev)
        info["detail"] = (f"200 cases, worst float32 {worst[np.float32]:.2e}, "
                          f"float64 {worst[np.float64]:.2e}")


# 4 -------------------------------------------------------------------------

def test_criterion_4_gradient_suite():
    with criterion(4, "finite-difference gradient suite", budget=300) as info:
        worst = {}
        for name, (case, tol) in sorted(CASES.items()):
            errs = [case(seed) for seed in range(10)]
            worst[name] = max(errs)
            assert worst[name] <= tol, (name, worst[name], tol)
        name = max(worst, key=worst.get)
        info["detail"] = f"{len(CASES)} cases x 10 seeds, worst {name} {worst[name]:.2e}"


# 5 -------------------------------------------------------------------------

def _img(rng, shape, integer):
    return rng.integers(0, 6, shape).astype(float) if integer else rng.random(shape)


def test_criterion_5_lbp_oracles():
    with criterion(5, "LBP, VLBP, LBP-TOP oracles and invariance", budget=120) as info:
        checks = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            integer = seed % 2 == 0
            for p, r in ((8, 1), (8, 2), (6, 1.5)):
                img = _img(rng, (7, 8), integer)
                assert lbp_histogram(img, p, r).bins.tolist() == lbp_oracle.histogram(
                    img.tolist(), p, r)
                checks += 1
            vol = _img(rng, (8, 8, 5), integer)
            assert vlbp_descriptor(vol).bins.tolist() == lbp_oracle.vlbp_histogram(
                vol.tolist(), 4, 1, 1)
            small = _img(rng, (6, 5, 4), integer)
            assert lbp_top_descriptor(small).bins.tolist() == lbp_oracle.lbp_top_histogram(
                small.tolist(), 8, (1, 1, 1))
            checks += 2
            # exact invariance on integer-valued data
            img = _img(rng, (8, 9), True)
            vol = _img(rng, (6, 6, 5), True)
            shift, scale = float(rng.integers(-40, 40)), float(rng.uniform(0.1, 10))
            for fn, a in ((lambda z: lbp_histogram(z, 8, 2), img), (vlbp_descriptor, vol),
                          (lbp_top_descriptor, vol)):
                base = fn(a).bins
                assert np.array_equal(fn(a + shift).bins, base)
                assert np.array_equal(fn(a * scale).bins, base)
                checks += 2
        info["detail"] = f"{checks} oracle/invariance checks over 20 seeds"


# 6 -------------------------------------------------------------------------

def test_criterion_6_pipeline_invariants():
    with criterion(6, "pipeline invariants", budget=60) as info:
        rng = np.random.default_rng(6)
        vol = rng.random((9, 10, 11))
        assert np.array_equal(normalize_temporal(vol), vol)
        one = normalize_temporal([vol[..., 0]])
        assert one.shape[-1] == 11 and all(np.array_equal(one[..., t], vol[..., 0])
                                           for t in range(11))
        ramp = normalize_temporal([np.full((2, 2), k / 20) for k in range(21)])
        assert max(np.abs(ramp[..., j] - j / 10).max() for j in range(11)) <= 1e-6
        with pytest.raises(ValueError):
            normalize_temporal([])

        c = VideoCuboid(rng.random((12, 12, 11)), 2, "s007")
        variants = augment(c)
        assert len(variants) == 14 and len({v.augmentation_tag for v in variants}) == 14
        assert all(v.subject_id == "s007" and v.label == 2 for v in variants)
        assert np.array_equal(flip_frames(flip_frames(c.data)), c.data)
        assert np.array_equal(rotate_frames(c.data, 0), c.data)

        small = rng.random((4, 5, 3))
        xy, xt, yt = plane_views(small)
        idx = np.indices(small.shape).reshape(3, -1).T
        for x, y, t in idx:
            assert xt[x, t, y] == small[x, y, t] and yt[t, y, x] == small[x, y, t]
        for v, name in zip((xy, xt, yt), ("xy", "xt", "yt")):
            assert np.array_equal(unpermute_view(v, name), small)
        shapes = [a.shape for a in plane_views(np.zeros((64, 64, 11)))]
        assert shapes == [(64, 64, 11), (64, 11, 64), (11, 64, 64)]

        ds = synth_dataset(3, 10, seed=0, size=8)
        ds = Dataset(ds.samples + [s for s in ds.augmented().samples if not s.is_original],
                     ds.class_names)
        n_splits = 0
        for splits in (kfold_split(ds, 5), kfold_split(ds, 10), loso_split(ds)):
            tested = []
            for train, test in splits:
                assert not set(train.subjects) & set(test.subjects)
                assert all(s.is_original for s in test.samples)
                tested += test.subjects
                n_splits += 1
            assert sorted(set(tested)) == sorted(set(ds.subjects)) and len(tested) == 30
        info["detail"] = f"14 variants, exhaustive views, {n_splits} leak-free splits"


# 7 -------------------------------------------------------------------------

def _benchmark(**kw):
    return run_synthetic_benchmark(generate_bank(64, 0.9, seed=kw.get("seed", 0)), **kw)


def _strip_time(report):
    return {k: v for k, v in report.items() if k != "wall_time"}


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("LBV_FULL_E2E") != "1",
                    reason="full run takes hours on this machine; set LBV_FULL_E2E=1")
def test_criterion_7_end_to_end():
    size = int(os.environ.get("LBV_E2E_SIZE", 64))
    width = int(os.environ.get("LBV_E2E_CHANNELS", 64))
    aug = os.environ.get("LBV_E2E_AUGMENT", "1") != "0"
    title = f"synthetic end-to-end ({size}x{size}x11, width {width}, augment={aug})"
    with criterion(7, title, budget=30 * 60) as info:
        rep = _benchmark(n_classes=6, per_class=40, folds=5, seed=0, size=size, epochs=50,
                         ft_epochs=100, lr=1e-3, ft_lr=1e-4, batch=16,
                         channel_plan=(width,) * 5, augment=aug)
        info["detail"] = (f"per-view {rep['per_view']}, subnet mean {rep['subnet_mean']:.3f}, "
                          f"fused {rep['fused']:.3f}")
        assert rep["subnet_mean"] >= 0.85
        assert rep["fused"] >= 0.90
        assert rep["fused"] >= rep["best_single"] - 0.02
        # raw-pixel nearest centroid on the same folds stays below the network
        ds = synth_dataset(6, 40, 0, size=size)
        correct = 0
        for train, test in kfold_split(ds, 5):
            flat = lambda d: np.stack([s.data.ravel() for s in d.samples])
            model = nearest_centroid_fit(flat(train), train.labels)
            correct += int((nearest_centroid_predict(model, flat(test)) == test.labels).sum())
        assert correct / len(ds) < rep["fused"]


def test_criterion_7_protocol_smoke():
    """Same protocol at toy scale: runs every stage and is deterministic per seed."""
    if os.environ.get("LBV_FULL_E2E") != "1":
        ACCEPTANCE["7"] = ("SKIP", "full-scale run gated by LBV_FULL_E2E=1 (hours on this "
                                 "machine); reduced protocol smoke below")
    kw = dict(n_classes=3, per_class=4, folds=2, seed=11, size=8, epochs=2, ft_epochs=2,
              batch=4, channel_plan=(4,) * 5, augment=True)
    a = _benchmark(**kw)
    b = _benchmark(**kw)
    assert _strip_time(a) == _strip_time(b)
    assert set(a["per_view"]) == {"xy", "xt", "yt"}
    assert np.array(a["confusion"]).sum() == 12
    ACCEPTANCE["7-smoke"] = ("PASS", "5-stage protocol at toy scale is deterministic per seed")
    print("criterion 7-smoke: PASS - protocol runs end to end and is deterministic per seed")


# 8 -------------------------------------------------------------------------

def test_criterion_8_overfit():
    with criterion(8, "memorize 32 random-labeled samples", budget=None) as info:
        rng = np.random.default_rng(8)
        samples = [VideoCuboid(rng.random((16, 16, 11)).astype(np.float32),
                               int(rng.integers(0, 2)), f"s{i:02d}") for i in range(32)]
        ds = Dataset(samples, ["a", "b"])
        net, run = train_subnet(ds, "xy", generate_bank(64, 0.9, seed=0),
                                subnet_config(epochs=200), channel_plan=(16,) * 5,
                                augment=False)
        accs = [r["train_acc"] for r in run.epochs]
        hit = next((i + 1 for i, a in enumerate(accs) if a == 1.0), None)
        assert hit is not None, f"best train accuracy {max(accs)}"
        info["detail"] = f"100% train accuracy first reached at epoch {hit}"


# 9 -------------------------------------------------------------------------

def test_criterion_9_serialization(tmp_path):
    with criterion(9, "serialization round-trips", budget=None) as info:
        rng = np.random.default_rng(9)
        for dtype in (np.float32, np.float64):
            t = (rng.standard_normal((3, 4, 5)) * 10).astype(dtype)
            assert tensor_from_bytes(tensor_to_bytes(t)).tobytes() == t.tobytes()
            save_tensor(t, tmp_path / "t.lbvt")
            back = load_tensor(tmp_path / "t.lbvt")
            assert back.dtype == t.dtype and back.tobytes() == t.tobytes()
        bank = generate_bank(64, 0.9, seed=4)
        assert bank_to_bytes(bank_from_bytes(bank_to_bytes(bank))) == bank_to_bytes(bank)
        save_bank(bank, tmp_path / "b.lbvb")
        assert np.array_equal(load_bank(tmp_path / "b.lbvb").values, bank.values)

        cub = (8, 8, 8)
        nets = [build_subnet(v, 4, bank, (4,) * 5, Rng(i), cub) for i, v in
                enumerate(("xy", "xt", "yt"))]
        probe = rng.random((2, 1) + cub).astype(np.float32)
        for n in nets:
            n.forward(probe, training=True)  # nontrivial BN running stats
        fused = build_fusion(*nets)
        for model, x in ((nets[1], probe), (fused, (probe, probe, probe))):
            ref = model.forward(x)
            blob = checkpoint_bytes(model)
            back = load_network(io.BytesIO(blob))
            assert np.array_equal(back.forward(x), ref)
            assert checkpoint_bytes(back) == blob
        info["detail"] = "tensor, bank, subnet and fused checkpoints bit-exact"
