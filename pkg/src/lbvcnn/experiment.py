"""Kernel benchmark and the cross-validated synthetic benchmark."""

from __future__ import annotations

import time

import numpy as np

from . import opcount
from .bank import bank_as_dense_weights
from .layers import conv3d_reference, ternary_conv3d
from .network import VIEWS, build_fusion
from .tensor import Rng
from .trainer import (
    cross_validated,
    evaluate,
    finetune_config,
    finetune_fused,
    kfold_split,
    subnet_config,
    train_subnet,
)

DEFAULT_BENCH_SHAPES = ((1, 1, 16, 16, 11), (2, 1, 32, 32, 11), (1, 64, 8, 8, 6),
                        (4, 64, 8, 8, 3), (1, 64, 16, 16, 6))


def normalized_deviation(a, ref):
    """``max|a - ref| / max|ref|`` (falls back to the absolute deviation when ref is 0)."""
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    diff = float(np.abs(a - ref).max()) if a.size else 0.0
    scale = float(np.abs(ref).max()) if ref.size else 0.0
    return diff / scale if scale > 0 else diff


def count_ternary_ops(x, bank, method="add"):
    with opcount.counting() as c:
        with opcount.scope("ternary"):
            ternary_conv3d(opcount.instrument(x), bank, method)
    return c.totals()


def count_dense_ops(x, bank):
    w = bank_as_dense_weights(bank, np.float64)
    w = np.repeat(w[:, None], x.shape[1], axis=1)
    with opcount.counting() as c:
        with opcount.scope("dense"):
            conv3d_reference(opcount.instrument(x), w)
    return c.totals()


def bench_shape(shape, bank, repeat=3, dtype=np.float32, rng=None):
    """Time and compare the add/subtract kernel against a dense float convolution.

    The dense reference applies the bank as ordinary weights ``[count, C, 3,3,3]``
    in float64. ``param_ratio`` compares that stage's weight count with the
    pointwise weights of an LBV block with ``C`` output channels.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    c = shape[1]
    x = rng.standard_normal(shape).astype(dtype)
    w = np.repeat(bank_as_dense_weights(bank, np.float64)[:, None], c, axis=1)
    t_fast = min(_timeit(lambda: ternary_conv3d(x, bank, "add")) for _ in range(repeat))
    t_dense = min(_timeit(lambda: conv3d_reference(x.astype(np.float64), w)) for _ in range(repeat))
    fast = ternary_conv3d(x, bank, "add")
    ref = conv3d_reference(x.astype(np.float64), w)
    ops = count_ternary_ops(x, bank)
    dense_weights = bank.count * c * bank.taps
    pointwise_weights = c * bank.count
    return {"shape": list(shape), "dtype": np.dtype(dtype).name,
            "ternary_seconds": t_fast, "dense_seconds": t_dense,
            "ternary_ops": {"add": ops["adds"], "sub": ops["subs"], "mul": ops["muls"]},
            "max_rel_deviation": normalized_deviation(fast, ref),
            "dense_weights": dense_weights, "pointwise_weights": pointwise_weights,
            "param_ratio": dense_weights / pointwise_weights}


def _timeit(fn):
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


def cross_validate_view(ds, view, bank, folds, cfg=None, channel_plan=(64,) * 5,
                        augment=True, log=None, method="gemm"):
    """Train one subnet per fold. Returns ``(nets, fold results, pooled accuracy)``."""
    cfg = cfg or subnet_config()
    nets, results = [], []
    for k, (train, test) in enumerate(folds):
        net, _ = train_subnet(train, view, bank, cfg, None, channel_plan, augment, log=log,
                              method=method)
        nets.append(net)
        results.append(evaluate(net, test))
        if log is not None:
            log(f'{{"stage": "subnet-{view}", "fold": {k + 1}, "test_acc": {results[-1].accuracy}}}')
    acc, _ = cross_validated(results)
    return nets, results, acc


def run_synthetic_benchmark(bank, n_classes=6, per_class=40, folds=5, seed=0, size=64,
                            epochs=50, ft_epochs=100, lr=1e-3, ft_lr=1e-4, batch=16,
                            channel_plan=(64,) * 5, augment=True, log=None, method="gemm"):
    """The end-to-end protocol: per-view CV training, then per-fold fusion fine-tuning."""
    from .video import synth_dataset

    start = time.perf_counter()
    ds = synth_dataset(n_classes, per_class, seed, size=size)
    splits = kfold_split(ds, folds)
    cfg = subnet_config(epochs=epochs, learning_rate=lr, batch_size=batch, seed=seed)
    per_view, nets = {}, {}
    for view in VIEWS:
        nets[view], _, per_view[view] = cross_validate_view(
            ds, view, bank, splits, cfg, channel_plan, augment, log, method)
    ft_cfg = finetune_config(epochs=ft_epochs, learning_rate=ft_lr, batch_size=batch, seed=seed)
    fused_results = []
    for k, (train, test) in enumerate(splits):
        fused = build_fusion(*(nets[v][k] for v in VIEWS), rng=Rng(seed).child(104729 + k))
        finetune_fused(fused, train, ft_cfg, None, augment, log)
        fused_results.append(evaluate(fused, test))
    fused_acc, cm = cross_validated(fused_results)
    best = max(per_view.values())
    return {"per_view": per_view, "fused": fused_acc, "confusion": cm.tolist(),
            "subnet_mean": float(np.mean(list(per_view.values()))), "best_single": best,
            "wall_time": time.perf_counter() - start,
            "config": {"n_classes": n_classes, "per_class": per_class, "folds": folds,
                       "seed": seed, "size": size, "epochs": epochs, "ft_epochs": ft_epochs,
                       "lr": lr, "ft_lr": ft_lr, "batch": batch,
                       "channel_plan": list(channel_plan), "augment": augment}}
