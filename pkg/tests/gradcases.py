"""Finite-difference cases shared by the gradient tests and the acceptance suite.

Every case builds a float64 problem from ``seed``, projects the layer output
onto a fixed random tensor to get a scalar loss, and returns the worst
relative error reported by :func:`grad_check`.
"""

import numpy as np

from lbvcnn.bank import generate_bank
from lbvcnn.gradcheck import grad_check
from lbvcnn.layers import (
    LbvBlock,
    avgpool3d,
    avgpool3d_backward,
    batchnorm_backward,
    batchnorm_forward,
    conv3d_reference,
    conv3d_reference_backward,
    dense,
    maxpool3d,
    maxpool3d_backward,
    pointwise_conv3d,
    pointwise_conv3d_backward,
    relu,
    relu_backward,
    softmax_cross_entropy,
    ternary_conv3d,
    ternary_conv3d_backward,
)
from lbvcnn.tensor import Rng

EPS = 1e-6


def _proj(rng, shape):
    return rng.standard_normal(shape)


def case_ternary(seed):
    rng = np.random.default_rng(seed)
    bank = generate_bank(8, 0.9, seed=seed)
    x = rng.standard_normal((2, 3, 4, 5, 3))
    R = _proj(rng, (2, bank.count, 4, 5, 3))

    def fn(p):
        out = ternary_conv3d(p["x"], bank)
        return float((out * R).sum()), {"x": ternary_conv3d_backward(R, bank, 3)}

    return grad_check(fn, {"x": x}, EPS)


def case_conv_reference(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 4, 3, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    R = _proj(rng, (2, 3, 4, 3, 5))

    def fn(p):
        out = conv3d_reference(p["x"], p["w"])
        gx, gw = conv3d_reference_backward(R, p["x"], p["w"])
        return float((out * R).sum()), {"x": gx, "w": gw}

    return grad_check(fn, {"x": x, "w": w}, EPS)


def case_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5))
    x += np.sign(x) * 0.05  # keep away from the kink
    R = _proj(rng, x.shape)

    def fn(p):
        return float((relu(p["x"]) * R).sum()), {"x": relu_backward(R, p["x"])}

    return grad_check(fn, {"x": x}, EPS)


def case_pointwise(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 3, 2, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    R = _proj(rng, (2, 4, 3, 2, 4))

    def fn(p):
        out = pointwise_conv3d(p["x"], p["w"], p["b"])
        gx, gw, gb = pointwise_conv3d_backward(R, p["x"], p["w"])
        return float((out * R).sum()), {"x": gx, "w": gw, "b": gb}

    return grad_check(fn, {"x": x, "w": w, "b": b}, EPS)


def _bn_case(seed, training):
    rng = np.random.default_rng(seed)
    c = 3
    x = rng.standard_normal((4, c, 2, 3, 2)) * 2 + 1
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c)
    rm = rng.standard_normal(c) * 0.1
    rv = rng.uniform(0.5, 2.0, c)
    R = _proj(rng, x.shape)

    def fn(p):
        out, cache = batchnorm_forward(p["x"], p["gamma"], p["beta"], rm.copy(), rv.copy(),
                                       training)
        gx, gg, gb = batchnorm_backward(R, cache)
        return float((out * R).sum()), {"x": gx, "gamma": gg, "beta": gb}

    return grad_check(fn, {"x": x, "gamma": gamma, "beta": beta}, 1e-5)


def case_bn_train(seed):
    return _bn_case(seed, True)


def case_bn_eval(seed):
    return _bn_case(seed, False)


def case_maxpool(seed):
    rng = np.random.default_rng(seed)
    # distinct values with gaps far wider than the FD step
    x = rng.permutation(2 * 2 * 5 * 4 * 3).reshape(2, 2, 5, 4, 3) * 0.01
    R = _proj(rng, (2, 2, 2, 2, 1))

    def fn(p):
        out, cache = maxpool3d(p["x"])
        return float((out * R).sum()), {"x": maxpool3d_backward(R, cache)}

    return grad_check(fn, {"x": x}, EPS)


def case_avgpool(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 5, 4, 3))
    R = _proj(rng, (2, 2, 2, 2, 1))

    def fn(p):
        out, cache = avgpool3d(p["x"])
        return float((out * R).sum()), {"x": avgpool3d_backward(R, cache)}

    return grad_check(fn, {"x": x}, EPS)


def case_dense(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((4, 6))
    b = rng.standard_normal(4)
    R = _proj(rng, (3, 4))

    def fn(p):
        out = dense(p["x"], p["w"], p["b"])
        return float((out * R).sum()), {"x": R @ p["w"], "w": R.T @ p["x"], "b": R.sum(0)}

    return grad_check(fn, {"x": x, "w": w, "b": b}, EPS)


def case_softmax_ce(seed):
    rng = np.random.default_rng(seed)
    # unit-scale logits keep every probability well above FD roundoff
    z = rng.standard_normal((5, 7))
    y = rng.integers(0, 7, 5)

    def fn(p):
        loss, g = softmax_cross_entropy(p["z"], y)
        return loss, {"z": g}

    return grad_check(fn, {"z": z}, 1e-5)


def _block(seed, frozen):
    bank = generate_bank(16, 0.9, seed=seed)
    block = LbvBlock(bank, 2, 5, Rng(seed), dtype=np.float64)
    rng = np.random.default_rng(seed)
    for bn in block.batchnorms:
        bn.frozen_stats = frozen
        bn.params["gamma"][:] = rng.uniform(0.5, 1.5, bn.params["gamma"].shape)
        bn.params["beta"][:] = rng.standard_normal(bn.params["beta"].shape) * 0.1
        bn.running_mean[:] = rng.standard_normal(bn.running_mean.shape) * 0.1
        bn.running_var[:] = rng.uniform(0.5, 2.0, bn.running_var.shape)
    block.pointwise.params["bias"][:] = rng.standard_normal(5) * 0.1
    block._sync_params()
    x = rng.standard_normal((3, 2, 4, 3, 3))
    R = _proj(rng, (3, 5, 4, 3, 3))
    return block, x, R


def case_block_fixed_stats(seed):
    """Whole block with BN in fixed-stat mode; parameters and input."""
    block, x, R = _block(seed, True)
    block.set_input_grad(True)
    state = {k: v.copy() for k, v in block.state().items()}
    params = dict(block.params)
    params["x"] = x

    def fn(p):
        block.load_state({k: v.copy() for k, v in state.items()})
        out = block.forward(p["x"], training=True)
        gx = block.backward(R)
        grads = {k: v.copy() for k, v in block.grads.items()}
        grads["x"] = gx
        return float((out * R).sum()), grads

    return grad_check(fn, params, EPS)


def case_block_batch_stats(seed):
    """Whole block with BN on batch statistics.

    The pointwise bias feeds straight into batch normalization, which removes
    any per-channel shift, so its true gradient is identically zero; it is
    checked for being ~0 separately and left out of the relative comparison.
    """
    block, x, R = _block(seed, False)
    block.set_input_grad(True)
    state = {k: v.copy() for k, v in block.state().items()}
    bias_key = [k for k in block.params if k.endswith("pointwise.bias")][0]
    params = {k: v for k, v in block.params.items() if k != bias_key}
    params["x"] = x
    last = {}

    def fn(p):
        block.load_state({k: v.copy() for k, v in state.items()})
        out = block.forward(p["x"], training=True)
        gx = block.backward(R)
        grads = {k: v.copy() for k, v in block.grads.items() if k != bias_key}
        grads["x"] = gx
        last["bias"] = block.grads[bias_key].copy()
        last["scale"] = max(float(np.abs(g).max()) for g in grads.values())
        return float((out * R).sum()), grads

    err = grad_check(fn, params, 1e-5)
    if np.abs(last["bias"]).max() > 1e-10 * max(last["scale"], 1.0):
        raise AssertionError("pre-BN bias gradient should vanish")
    return err


# name -> (case, tolerance)
CASES = {
    "ternary_conv3d": (case_ternary, 1e-4),
    "conv3d_reference": (case_conv_reference, 1e-4),
    "relu": (case_relu, 1e-4),
    "pointwise_conv3d": (case_pointwise, 1e-4),
    "batchnorm_train": (case_bn_train, 1e-3),
    "batchnorm_eval": (case_bn_eval, 1e-4),
    "maxpool3d": (case_maxpool, 1e-4),
    "avgpool3d": (case_avgpool, 1e-4),
    "dense": (case_dense, 1e-4),
    "softmax_cross_entropy": (case_softmax_ce, 1e-5),
    "lbv_block_fixed_stats": (case_block_fixed_stats, 1e-4),
    "lbv_block_batch_stats": (case_block_batch_stats, 1e-3),
}
