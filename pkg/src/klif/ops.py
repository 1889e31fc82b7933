"""Differentiable building blocks with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects. Every forward returns its output
together with an :class:`OpContext`; the matching backward consumes that
context exactly once. Ops are dtype-generic: training runs in float32, the
gradient checker feeds float64 through the same code.
"""
from __future__ import annotations

from typing import Any

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when an operand has the wrong rank or extent."""


class NumericalError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class ContextError(RuntimeError):
    """Raised when a backward pass is replayed or run without a forward."""


class OpContext:
    """Values saved by a forward pass for its backward pass."""

    __slots__ = ("op", "saved", "consumed")

    def __init__(self, op: str, **saved: Any):
        self.op = op
        self.saved = saved
        self.consumed = False

    def consume(self, op: str) -> dict:
        if self.op != op:
            raise ContextError(f"context from {self.op!r} passed to {op!r} backward")
        if self.consumed:
            raise ContextError(f"{op} backward already ran for this context")
        self.consumed = True
        saved, self.saved = self.saved, {}
        return saved


def check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"{op}: non-finite value in result")


def _expect_rank(op: str, name: str, a: np.ndarray, rank: int) -> None:
    if a.ndim != rank:
        raise ShapeError(f"{op}: {name} must have rank {rank}, got shape {a.shape}")


def _expect_dim(op: str, what: str, got: int, want: int) -> None:
    if got != want:
        raise ShapeError(f"{op}: {what} is {got}, expected {want}")


# ---------------------------------------------------------------------------
# convolution: 3x3 kernel, stride 1, zero padding 1


def _im2col(x: np.ndarray) -> np.ndarray:
    """``[N, C, H, W] -> [N*H*W, 9*C]``, columns ordered (ky, kx, c)."""
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _col2im(gcols: np.ndarray, shape: tuple) -> np.ndarray:
    n, c, h, w = shape
    g5 = gcols.reshape(n, h, w, 9, c)
    gxp = np.zeros((n, h + 2, w + 2, c), dtype=gcols.dtype)
    for i in range(3):
        for j in range(3):
            gxp[:, i:i + h, j:j + w, :] += g5[:, :, :, 3 * i + j, :]
    return np.ascontiguousarray(gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2))


def _wmat(weight: np.ndarray) -> np.ndarray:
    o, c = weight.shape[:2]
    return weight.transpose(0, 2, 3, 1).reshape(o, 9 * c)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    _expect_rank("conv2d", "input", x, 4)
    _expect_rank("conv2d", "weight", weight, 4)
    o, c = weight.shape[:2]
    _expect_dim("conv2d", "input channels (dim 1)", x.shape[1], c)
    _expect_dim("conv2d", "kernel height (weight dim 2)", weight.shape[2], 3)
    _expect_dim("conv2d", "kernel width (weight dim 3)", weight.shape[3], 3)
    _expect_dim("conv2d", "bias length", bias.size, o)
    n, _, h, w = x.shape
    cols = _im2col(x)
    out = cols @ _wmat(weight).T
    out += bias.reshape(1, o)
    y = np.ascontiguousarray(out.reshape(n, h, w, o).transpose(0, 3, 1, 2))
    check_finite("conv2d", y)
    return y, OpContext("conv2d", cols=cols, weight=weight, in_shape=x.shape)


def conv2d_backward(ctx: OpContext, grad_out: np.ndarray, need_input_grad: bool = True):
    """Return ``(grad_input, grad_weight, grad_bias)``; ``grad_input`` is
    ``None`` when ``need_input_grad`` is false."""
    s = ctx.consume("conv2d")
    weight = s["weight"]
    o, c = weight.shape[:2]
    n, _, h, w = s["in_shape"]
    _expect_dim("conv2d backward", "grad_out shape", grad_out.shape, (n, o, h, w))
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, o)
    grad_w = np.ascontiguousarray((g.T @ s["cols"]).reshape(o, 3, 3, c).transpose(0, 3, 1, 2))
    grad_b = g.sum(axis=0)
    grad_x = None
    if need_input_grad:
        grad_x = _col2im(g @ _wmat(weight), s["in_shape"])
        check_finite("conv2d backward", grad_x)
    check_finite("conv2d backward", grad_w, grad_b)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# fully connected


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    _expect_rank("linear", "input", x, 2)
    _expect_rank("linear", "weight", weight, 2)
    _expect_dim("linear", "input features (dim 1)", x.shape[1], weight.shape[1])
    _expect_dim("linear", "bias length", bias.size, weight.shape[0])
    y = x @ weight.T
    y += bias
    check_finite("linear", y)
    return y, OpContext("linear", x=x, weight=weight)


def linear_backward(ctx: OpContext, grad_out: np.ndarray):
    s = ctx.consume("linear")
    x, weight = s["x"], s["weight"]
    _expect_dim("linear backward", "grad_out shape", grad_out.shape, (x.shape[0], weight.shape[0]))
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    check_finite("linear backward", grad_x, grad_w, grad_b)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pooling


def maxpool2d_forward(x: np.ndarray):
    """2x2 max pooling with stride 2. Ties go to the first element in
    row-major order inside the window."""
    _expect_rank("maxpool2d", "input", x, 4)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, OpContext("maxpool2d", idx=idx, in_shape=x.shape)


def maxpool2d_backward(ctx: OpContext, grad_out: np.ndarray):
    s = ctx.consume("maxpool2d")
    idx = s["idx"]
    n, c, h, w = s["in_shape"]
    _expect_dim("maxpool2d backward", "grad_out shape", grad_out.shape, idx.shape)
    gwin = np.zeros(idx.shape + (4,), dtype=grad_out.dtype)
    np.put_along_axis(gwin, idx[..., None], grad_out[..., None], axis=-1)
    gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return gx.reshape(n, c, h, w)


def avgpool1d_forward(x: np.ndarray, pool: int = 10):
    """Mean over contiguous groups of ``pool`` features: ``[N, P*C] -> [N, C]``."""
    _expect_rank("avgpool1d", "input", x, 2)
    n, f = x.shape
    if pool < 1 or f % pool:
        raise ShapeError(f"avgpool1d: feature length {f} not divisible by pool size {pool}")
    y = x.reshape(n, f // pool, pool).mean(axis=-1)
    return y, OpContext("avgpool1d", pool=pool, in_shape=x.shape)


def avgpool1d_backward(ctx: OpContext, grad_out: np.ndarray):
    s = ctx.consume("avgpool1d")
    n, f = s["in_shape"]
    pool = s["pool"]
    _expect_dim("avgpool1d backward", "grad_out shape", grad_out.shape, (n, f // pool))
    return np.repeat(grad_out / pool, pool, axis=1)


# ---------------------------------------------------------------------------
# batch normalisation over every axis except 1


class RunningStats:
    """Per-channel running mean/variance used in eval mode."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def _bn_axes(x: np.ndarray) -> tuple:
    return (0,) + tuple(range(2, x.ndim))


def _bn_bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x, gamma, beta, running: RunningStats, train: bool, eps: float = BN_EPS):
    if x.ndim < 2:
        raise ShapeError(f"batchnorm: input must have rank >= 2, got shape {x.shape}")
    _expect_dim("batchnorm", "channels (dim 1)", x.shape[1], gamma.size)
    axes = _bn_axes(x)
    if train:
        m = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        mom = running.momentum
        unbiased = var * (m / max(m - 1, 1))
        running.mean[...] = (1 - mom) * running.mean + mom * mean
        running.var[...] = (1 - mom) * running.var + mom * unbiased
    else:
        mean, var = running.mean, running.var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - _bn_bcast(mean, x.ndim)) * _bn_bcast(invstd, x.ndim)
    y = xhat * _bn_bcast(gamma, x.ndim) + _bn_bcast(beta, x.ndim)
    check_finite("batchnorm", y)
    return y, OpContext("batchnorm", xhat=xhat, invstd=invstd, gamma=gamma, train=train)


def batchnorm_backward(ctx: OpContext, grad_out: np.ndarray):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    s = ctx.consume("batchnorm")
    xhat, invstd, gamma = s["xhat"], s["invstd"], s["gamma"]
    _expect_dim("batchnorm backward", "grad_out shape", grad_out.shape, xhat.shape)
    nd = grad_out.ndim
    axes = _bn_axes(grad_out)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    scale = _bn_bcast(gamma * invstd, nd)
    if s["train"]:
        m = grad_out.size // grad_out.shape[1]
        grad_x = scale * (grad_out - _bn_bcast(grad_beta / m, nd) - xhat * _bn_bcast(grad_gamma / m, nd))
    else:
        grad_x = grad_out * scale
    check_finite("batchnorm backward", grad_x, grad_gamma, grad_beta)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# dropout


def dropout_forward(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None = None,
                    mask_shape: tuple | None = None):
    """Inverted dropout. ``mask_shape`` must broadcast against ``x``; it lets
    one mask be shared along an axis (e.g. time)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, OpContext("dropout", mask=None)
    if rng is None:
        raise ValueError("dropout: train mode needs an rng")
    shape = x.shape if mask_shape is None else mask_shape
    mask = (rng.random(shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * mask, OpContext("dropout", mask=mask)


def dropout_backward(ctx: OpContext, grad_out: np.ndarray):
    mask = ctx.consume("dropout")["mask"]
    return grad_out if mask is None else grad_out * mask
