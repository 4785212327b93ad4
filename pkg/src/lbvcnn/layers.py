"""Differentiable layers with hand-written reverse-mode passes.

Activations are laid out ``[N, C, D, H, W]`` (batch, channel, three volume
axes). Every layer caches what its backward pass needs during ``forward`` and
fills ``self.grads`` during ``backward``.

All 3x3x3 convolutions are correlations (no kernel flip), stride 1, zero
padding 1.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import opcount
from .bank import TernaryFilterBank
from .errors import InvalidShapeError, NonFiniteError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _as_batch(x):
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise InvalidShapeError(f"expected [C,D,H,W] or [N,C,D,H,W], got shape {x.shape}")


# -- ternary convolution -----------------------------------------------------
#
# The summed input is zero padded and flattened so that every filter tap
# becomes one contiguous shifted slice; outputs at padding positions are
# computed and thrown away. Channels are summed first: each filter is applied
# to every input channel and the results added, which equals filtering the
# channel sum.

class _FlatGeometry:
    def __init__(self, n, spatial, k):
        self.r = r = k // 2
        self.spatial = tuple(spatial)
        d, h, w = spatial
        self.padded = (d + 2 * r, h + 2 * r, w + 2 * r)
        dp, hp, wp = self.padded
        self.n = n
        self.length = n * dp * hp * wp
        self.margin = r * (hp * wp + wp + 1)
        self.offsets = [(a - r) * hp * wp + (b - r) * wp + (c - r)
                        for a in range(k) for b in range(k) for c in range(k)]

    def embed(self, vol, template):
        """[N, D, H, W] -> flat zero-padded buffer with margins."""
        r = self.r
        buf = opcount.zeros_like_kind(template, self.length + 2 * self.margin, vol.dtype)
        view = buf[self.margin:self.margin + self.length].reshape((self.n,) + self.padded)
        d, h, w = self.spatial
        view[:, r:r + d, r:r + h, r:r + w] = vol
        return buf

    def crop(self, flat, lead):
        """Flat ``[lead..., L]`` rows -> interior ``[lead..., N, D, H, W]``."""
        r = self.r
        d, h, w = self.spatial
        vol = flat.reshape(tuple(lead) + (self.n,) + self.padded)
        return vol[..., r:r + d, r:r + h, r:r + w]


def _tap_signs(bank):
    flat = bank.values.reshape(bank.count, -1)
    plus = [np.flatnonzero(flat[:, t] == 1) for t in range(flat.shape[1])]
    minus = [np.flatnonzero(flat[:, t] == -1) for t in range(flat.shape[1])]
    return plus, minus


def _check_bank_input(x5, bank):
    if bank.filter_shape[0] > 1 and min(x5.shape[2:]) < 1:
        raise InvalidShapeError("spatial axes must be >= 1")


def ternary_conv3d(x, bank: TernaryFilterBank, method="add"):
    """Apply the fixed ternary bank to ``x``.

    Input ``[C, D, H, W]`` or ``[N, C, D, H, W]``; output has ``bank.count``
    channels and the same spatial size. With ``method="add"`` (default) the
    accumulation consists only of in-place additions and subtractions of input
    values, zero taps skipped. ``method="gemm"`` evaluates the same linear map
    with a BLAS product against the bank's float embedding and is faster on
    large volumes.
    """
    x5, squeeze = _as_batch(x)
    _check_bank_input(x5, bank)
    n, c = x5.shape[:2]
    geo = _FlatGeometry(n, x5.shape[2:], bank.filter_shape[0])
    with opcount.scope("ternary_conv3d"):
        s = x5[:, 0] if c == 1 else x5.sum(axis=1)
        buf = geo.embed(s, x5)
        m, L = geo.margin, geo.length
        if method == "add":
            out = opcount.zeros_like_kind(x5, (bank.count, L), x5.dtype)
            plus, minus = _tap_signs(bank)
            for t, off in enumerate(geo.offsets):
                shifted = buf[m + off:m + off + L]
                for k in plus[t]:
                    np.add(out[k], shifted, out=out[k])
                for k in minus[t]:
                    np.subtract(out[k], shifted, out=out[k])
        elif method == "gemm":
            cols = np.stack([buf[m + off:m + off + L] for off in geo.offsets])
            weights = bank.values.reshape(bank.count, -1).astype(x5.dtype)
            out = weights @ cols
        else:
            raise ValueError(f"unknown method {method!r}")
    res = np.ascontiguousarray(np.moveaxis(geo.crop(out, (bank.count,)), 0, 1))
    return res[0] if squeeze else res


def ternary_conv3d_backward(grad_out, bank: TernaryFilterBank, in_channels, method="add"):
    """Gradient of :func:`ternary_conv3d` with respect to its input."""
    g5, squeeze = _as_batch(grad_out)
    n, kc = g5.shape[:2]
    if kc != bank.count:
        raise InvalidShapeError(f"gradient has {kc} channels, bank has {bank.count}")
    geo = _FlatGeometry(n, g5.shape[2:], bank.filter_shape[0])
    m, L = geo.margin, geo.length
    r = geo.r
    d, h, w = geo.spatial
    gflat = opcount.zeros_like_kind(g5, (kc, L), g5.dtype)
    gview = gflat.reshape((kc, n) + geo.padded)
    gview[:, :, r:r + d, r:r + h, r:r + w] = np.moveaxis(g5, 1, 0)
    gbuf = opcount.zeros_like_kind(g5, L + 2 * m, g5.dtype)
    with opcount.scope("ternary_conv3d_backward"):
        if method == "add":
            plus, minus = _tap_signs(bank)
            acc = opcount.zeros_like_kind(g5, L, g5.dtype)
            for t, off in enumerate(geo.offsets):
                if len(plus[t]) == 0 and len(minus[t]) == 0:
                    continue
                acc[...] = 0
                for k in plus[t]:
                    np.add(acc, gflat[k], out=acc)
                for k in minus[t]:
                    np.subtract(acc, gflat[k], out=acc)
                seg = gbuf[m + off:m + off + L]
                np.add(seg, acc, out=seg)
        elif method == "gemm":
            weights = bank.values.reshape(bank.count, -1).astype(g5.dtype)
            accs = weights.T @ gflat
            for t, off in enumerate(geo.offsets):
                seg = gbuf[m + off:m + off + L]
                np.add(seg, accs[t], out=seg)
        else:
            raise ValueError(f"unknown method {method!r}")
    gs = geo.crop(gbuf[m:m + L], ())
    gx = np.ascontiguousarray(np.broadcast_to(gs[:, None], (n, in_channels) + geo.spatial))
    return gx[0] if squeeze else gx


# -- dense reference convolution ---------------------------------------------

def _windows(xp, k, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def conv3d_reference(x, weights, stride=1, padding=1):
    """Plain dense 3D correlation; ``weights`` is ``[out, in, k, k, k]``."""
    x5, squeeze = _as_batch(x)
    if weights.ndim != 5 or weights.shape[1] != x5.shape[1]:
        raise InvalidShapeError(
            f"weights {weights.shape} do not match input channels {x5.shape[1]}")
    k = weights.shape[2]
    p = padding
    xp = np.pad(x5, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    if min(xp.shape[2:]) < k:
        raise InvalidShapeError("kernel does not fit the padded input")
    win = _windows(xp, k, stride)
    n, c = x5.shape[:2]
    o = weights.shape[0]
    spatial_out = win.shape[2:5]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(-1, c * k ** 3)
    cols = opcount.match_kind(x, cols)
    with opcount.scope("conv3d_reference"):
        out = np.matmul(cols, weights.reshape(o, -1).T)
    out = np.ascontiguousarray(
        out.reshape((n,) + spatial_out + (o,)).transpose(0, 4, 1, 2, 3)).view(np.ndarray)
    return out[0] if squeeze else out


def conv3d_reference_backward(grad_out, x, weights, stride=1, padding=1):
    """Return ``(grad_x, grad_weights)`` for :func:`conv3d_reference`."""
    x5, squeeze = _as_batch(x)
    g5, _ = _as_batch(grad_out)
    k = weights.shape[2]
    p = padding
    xp = np.pad(x5, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = _windows(xp, k, stride)
    gw = np.einsum("nodhw,ncdhwijk->ocijk", g5, win, optimize=True)
    gxp = np.zeros_like(xp)
    do, ho, wo = g5.shape[2:]
    for i in range(k):
        for j in range(k):
            for l in range(k):
                contrib = np.einsum("nodhw,oc->ncdhw", g5, weights[:, :, i, j, l])
                gxp[:, :, i:i + stride * do:stride, j:j + stride * ho:stride,
                    l:l + stride * wo:stride] += contrib
    d, h, w = x5.shape[2:]
    gx = gxp[:, :, p:p + d, p:p + h, p:p + w]
    return (gx[0] if squeeze else gx), gw


# -- elementwise and pointwise ----------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # subgradient 0 at exactly 0; ``x`` may be the input or the output
    return grad_out * (x > 0)


def pointwise_conv3d(x, weights, bias=None):
    """Per-voxel linear map across channels; ``weights`` is ``[out, C]``."""
    x5, squeeze = _as_batch(x)
    n, c = x5.shape[:2]
    if weights.ndim != 2 or weights.shape[1] != c:
        raise InvalidShapeError(f"weights {weights.shape} do not match {c} input channels")
    flat = x5.reshape(n, c, -1)
    out = np.matmul(weights, flat)
    if bias is not None:
        out += bias[None, :, None]
    out = out.reshape((n, weights.shape[0]) + x5.shape[2:])
    return out[0] if squeeze else out


def pointwise_conv3d_backward(grad_out, x, weights, need_input_grad=True):
    """Return ``(grad_x, grad_weights, grad_bias)``."""
    x5, squeeze = _as_batch(x)
    g5, _ = _as_batch(grad_out)
    n, c = x5.shape[:2]
    o = weights.shape[0]
    xf = x5.reshape(n, c, -1)
    gf = g5.reshape(n, o, -1)
    gw = np.zeros_like(weights)
    for i in range(n):
        gw += gf[i] @ xf[i].T
    gb = gf.sum(axis=(0, 2))
    gx = None
    if need_input_grad:
        gx = np.matmul(weights.T, gf).reshape(x5.shape)
        if squeeze:
            gx = gx[0]
    return gx, gw, gb


# -- batch normalization -----------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Normalize per channel (axis 1).

    Training mode uses batch statistics over every non-channel axis and
    updates ``running_mean``/``running_var`` in place; inference mode uses the
    running statistics. Returns ``(out, cache)``.
    """
    n, c = x.shape[:2]
    if gamma.shape != (c,):
        raise InvalidShapeError(f"BN params sized {gamma.shape[0]}, input has {c} channels")
    xf = x.reshape(n, c, -1)
    count = n * xf.shape[2]
    if training:
        mean = xf.mean(axis=(0, 2))
        xhat = xf - mean[None, :, None]
        var = np.einsum("ncv,ncv->c", xhat, xhat) / count
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        xhat = xf - running_mean[None, :, None]
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat *= inv_std[None, :, None]
    out = xhat * gamma[None, :, None]
    out += beta[None, :, None]
    return out.reshape(x.shape), (xhat, inv_std, gamma, training, x.shape)


def batchnorm_backward(grad_out, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, training, shape = cache
    n, c = shape[:2]
    g = grad_out.reshape(n, c, -1)
    count = n * g.shape[2]
    gbeta = g.sum(axis=(0, 2))
    ggamma = np.einsum("ncv,ncv->c", g, xhat)
    scale = (gamma * inv_std)[None, :, None]
    if training:
        gx = xhat * (ggamma / count)[None, :, None]
        np.subtract(g, gx, out=gx)
        gx -= (gbeta / count)[None, :, None]
        gx *= scale
    else:
        gx = g * scale
    return gx.reshape(shape), ggamma, gbeta


# -- pooling -----------------------------------------------------------------

def pool_output_shape(spatial, window=2):
    """Per axis ``max(len // window, 1)``; axes of length 1 are not pooled."""
    return tuple(max(s // window, 1) for s in spatial)


@njit(cache=True)
def _maxpool_kernel(x, wd, wh, ww, out, arg):
    n_, c_ = x.shape[0], x.shape[1]
    od, oh, ow = out.shape[2], out.shape[3], out.shape[4]
    for n in range(n_):
        for c in range(c_):
            for i in range(od):
                for j in range(oh):
                    for k in range(ow):
                        best = x[n, c, i * wd, j * wh, k * ww]
                        bi = 0
                        for a in range(wd):
                            for b in range(wh):
                                for e in range(ww):
                                    v = x[n, c, i * wd + a, j * wh + b, k * ww + e]
                                    if v > best:
                                        best = v
                                        bi = (a * wh + b) * ww + e
                        out[n, c, i, j, k] = best
                        arg[n, c, i, j, k] = bi


@njit(cache=True)
def _maxunpool_kernel(g, arg, wd, wh, ww, gx):
    n_, c_ = g.shape[0], g.shape[1]
    od, oh, ow = g.shape[2], g.shape[3], g.shape[4]
    for n in range(n_):
        for c in range(c_):
            for i in range(od):
                for j in range(oh):
                    for k in range(ow):
                        t = arg[n, c, i, j, k]
                        e = t % ww
                        b = (t // ww) % wh
                        a = t // (ww * wh)
                        gx[n, c, i * wd + a, j * wh + b, k * ww + e] += g[n, c, i, j, k]


def maxpool3d(x, window=2):
    """Window ``window``, stride ``window``, floor sizing. Returns ``(out, cache)``.

    Ties go to the first maximum of the window in row-major order.
    """
    x5, squeeze = _as_batch(x)
    x5 = np.ascontiguousarray(x5)
    wins = tuple(window if s >= window else 1 for s in x5.shape[2:])
    outs = tuple(s // w for s, w in zip(x5.shape[2:], wins))
    out = np.empty(x5.shape[:2] + outs, dtype=x5.dtype)
    arg = np.empty(out.shape, dtype=np.int16)
    _maxpool_kernel(x5, wins[0], wins[1], wins[2], out, arg)
    cache = (x5.shape, arg, wins, squeeze)
    return (out[0] if squeeze else out), cache


def maxpool3d_backward(grad_out, cache):
    in_shape, arg, wins, squeeze = cache
    g = grad_out[None] if squeeze else grad_out
    gx = np.zeros(in_shape, dtype=g.dtype)
    _maxunpool_kernel(np.ascontiguousarray(g), arg, wins[0], wins[1], wins[2], gx)
    return gx[0] if squeeze else gx


def _pool_windows(x, window):
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    wins = tuple(window if s >= window else 1 for s in spatial)
    outs = tuple(s // w for s, w in zip(spatial, wins))
    crop = x[(slice(None), slice(None)) + tuple(slice(0, o * w) for o, w in zip(outs, wins))]
    shaped = crop.reshape((n, c, outs[0], wins[0], outs[1], wins[1], outs[2], wins[2]))
    shaped = shaped.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape((n, c) + outs + (-1,))
    return shaped, wins, outs


def _unpool(grad_windows, in_shape, wins, outs):
    n, c = in_shape[:2]
    g = grad_windows.reshape((n, c) + outs + wins)
    g = g.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(
        (n, c) + tuple(o * w for o, w in zip(outs, wins)))
    gx = np.zeros(in_shape, dtype=grad_windows.dtype)
    gx[(slice(None), slice(None)) + tuple(slice(0, s) for s in g.shape[2:])] = g
    return gx


def avgpool3d(x, window=2):
    x5, squeeze = _as_batch(x)
    shaped, wins, outs = _pool_windows(x5, window)
    out = shaped.mean(axis=-1)
    cache = (x5.shape, wins, outs, squeeze)
    return (out[0] if squeeze else out), cache


def avgpool3d_backward(grad_out, cache):
    in_shape, wins, outs, squeeze = cache
    g5 = grad_out[None] if squeeze else grad_out
    size = int(np.prod(wins))
    gw = np.repeat((g5 / size)[..., None], size, axis=-1)
    gx = _unpool(gw, in_shape, wins, outs)
    return gx[0] if squeeze else gx


# -- classifier head ---------------------------------------------------------

def dense(x, weights, bias):
    """``x`` is ``[N, F]``, ``weights`` is ``[out, F]``."""
    if x.shape[-1] != weights.shape[1]:
        raise InvalidShapeError(f"input width {x.shape[-1]} != weight width {weights.shape[1]}")
    return x @ weights.T + bias


def softmax(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean of ``-log p[label]`` over the batch (or the scalar for one sample)."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    k = probs.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    picked = np.take_along_axis(np.atleast_2d(probs), np.atleast_1d(labels)[:, None], axis=-1)
    return float(-np.log(np.maximum(picked, np.finfo(probs.dtype).tiny)).mean())


def log_softmax(z):
    z = np.asarray(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy from logits and its gradient ``(p - onehot) / N``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    k = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# -- layer objects -----------------------------------------------------------

def he_normal(rng, shape, fan_in, dtype=np.float32):
    return rng.normal(shape, std=np.sqrt(2.0 / fan_in), dtype=dtype)


class Layer:
    """Base layer: ``params``/``grads`` dicts keyed by parameter name."""

    name = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.propagate_grad = True

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def state(self):
        """Non-trainable tensors that belong in a checkpoint."""
        return {}

    def load_state(self, state):
        pass

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        return self


class TernaryConv3d(Layer):
    """Fixed bank stage; holds a reference to the bank, no parameters."""

    name = "ternary"

    def __init__(self, bank, method="add"):
        super().__init__()
        self.bank = bank
        self.method = method

    def forward(self, x, training=False):
        self._in_channels = x.shape[1]
        return ternary_conv3d(x, self.bank, self.method)

    def backward(self, grad):
        if not self.propagate_grad:
            return None
        return ternary_conv3d_backward(grad, self.bank, self._in_channels, self.method)


class ReLU(Layer):
    name = "relu"

    def forward(self, x, training=False):
        self._out = relu(x)
        return self._out

    def backward(self, grad):
        return relu_backward(grad, self._out)


class PointwiseConv3d(Layer):
    name = "pointwise"

    def __init__(self, in_channels, out_channels, rng, dtype=np.float32):
        super().__init__()
        self.params["weight"] = he_normal(rng, (out_channels, in_channels), in_channels, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def forward(self, x, training=False):
        self._x = x
        return pointwise_conv3d(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        gx, gw, gb = pointwise_conv3d_backward(grad, self._x, self.params["weight"],
                                               self.propagate_grad)
        self.grads["weight"] = gw
        self.grads["bias"] = gb
        return gx


class BatchNorm3d(Layer):
    name = "bn"

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        # fixed-stat mode: use running stats even while training (gradient checks)
        self.frozen_stats = False

    def forward(self, x, training=False):
        use_batch = training and not self.frozen_stats
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.running_mean, self.running_var, use_batch)
        return out

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self._cache)
        self.grads["gamma"] = gg.astype(self.params["gamma"].dtype)
        self.grads["beta"] = gb.astype(self.params["beta"].dtype)
        return gx

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, state):
        self.running_mean = np.array(state["running_mean"])
        self.running_var = np.array(state["running_var"])

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self


class MaxPool3d(Layer):
    name = "maxpool"

    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def forward(self, x, training=False):
        out, self._cache = maxpool3d(x, self.window)
        return out

    def backward(self, grad):
        return maxpool3d_backward(grad, self._cache)


class AvgPool3d(Layer):
    name = "avgpool"

    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def forward(self, x, training=False):
        out, self._cache = avgpool3d(x, self.window)
        return out

    def backward(self, grad):
        return avgpool3d_backward(grad, self._cache)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    name = "dense"

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        super().__init__()
        self.params["weight"] = he_normal(rng, (out_features, in_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x, training=False):
        self._x = x
        return dense(x, self.params["weight"], self.params["bias"])

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


DEFAULT_BLOCK_ORDER = ("ternary", "relu", "pointwise", "bn", "relu")


class LbvBlock(Layer):
    """Local binary volume block.

    Fixed ternary convolution, ReLU bit-map, trainable 1x1x1 convolution,
    batch norm and ReLU, in the order given by ``order``.
    """

    name = "lbv"

    def __init__(self, bank, in_channels, out_channels, rng, order=DEFAULT_BLOCK_ORDER,
                 method="add", dtype=np.float32):
        super().__init__()
        order = tuple(order)
        if order.count("ternary") != 1 or order.count("pointwise") != 1:
            raise ValueError("block order needs exactly one 'ternary' and one 'pointwise' stage")
        if order.index("ternary") > order.index("pointwise"):
            raise ValueError("'ternary' must precede 'pointwise'")
        unknown = set(order) - {"ternary", "relu", "pointwise", "bn"}
        if unknown:
            raise ValueError(f"unknown block stages {sorted(unknown)}")
        self.bank = bank
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.order = order
        self.stages = []
        channels = in_channels
        for stage in order:
            if stage == "ternary":
                layer = TernaryConv3d(bank, method)
                channels = bank.count
            elif stage == "relu":
                layer = ReLU()
            elif stage == "pointwise":
                layer = PointwiseConv3d(channels, out_channels, rng, dtype)
                channels = out_channels
            else:
                layer = BatchNorm3d(channels, dtype)
            self.stages.append(layer)
        self._sync_params()

    @property
    def ternary(self):
        return self.stages[self.order.index("ternary")]

    @property
    def pointwise(self):
        return self.stages[self.order.index("pointwise")]

    @property
    def batchnorms(self):
        return [s for s in self.stages if isinstance(s, BatchNorm3d)]

    def set_input_grad(self, flag: bool):
        """Skip input-gradient work when the block sits on raw data."""
        for i, s in enumerate(self.stages):
            s.propagate_grad = flag or any(t.params for t in self.stages[:i])

    def _sync_params(self):
        self.params = {}
        for i, s in enumerate(self.stages):
            for k, v in s.params.items():
                self.params[f"{i}.{s.name}.{k}"] = v

    def _sync_into(self):
        for i, s in enumerate(self.stages):
            for k in s.params:
                s.params[k] = self.params[f"{i}.{s.name}.{k}"]

    def set_method(self, method):
        self.ternary.method = method

    def forward(self, x, training=False):
        if x.shape[1] != self.in_channels:
            raise InvalidShapeError(
                f"block expects {self.in_channels} channels, got {x.shape[1]}")
        self._sync_into()
        with opcount.scope("lbv"):
            for s in self.stages:
                with opcount.scope(s.name):
                    x = s.forward(x, training)
        return x

    def backward(self, grad):
        self.grads = {}
        for i in range(len(self.stages) - 1, -1, -1):
            s = self.stages[i]
            if not s.params and not s.propagate_grad:
                return None
            grad = s.backward(grad)
            for k, v in s.grads.items():
                self.grads[f"{i}.{s.name}.{k}"] = v
            if grad is None:
                break
        return grad

    def state(self):
        out = {}
        for i, s in enumerate(self.stages):
            for k, v in s.state().items():
                out[f"{i}.{s.name}.{k}"] = v
        return out

    def load_state(self, state):
        for i, s in enumerate(self.stages):
            prefix = f"{i}.{s.name}."
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            if sub:
                s.load_state(sub)

    def astype(self, dtype):
        for s in self.stages:
            s.astype(dtype)
        self._sync_params()
        return self


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")
