"""Direct input encoder and population-voting output decoder."""
from __future__ import annotations

import numpy as np

from .neuron import SpikingLayer
from .ops import (
    OpContext,
    RunningStats,
    ShapeError,
    avgpool1d_backward,
    avgpool1d_forward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
)


class EncoderParams:
    """Weights of the parallel 3x3 convolution branches that read the image.

    All branches see the same input and produce the same shape; their outputs
    are summed before the (single) batch-norm and spiking layer.
    """

    def __init__(self, in_channels: int, out_channels: int, branches: int = 3,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_channels * 9)
        self.weights = [rng.uniform(-bound, bound, (out_channels, in_channels, 3, 3)).astype(dtype)
                        for _ in range(branches)]
        self.biases = [rng.uniform(-bound, bound, out_channels).astype(dtype)
                       for _ in range(branches)]

    @property
    def branches(self) -> int:
        return len(self.weights)


def encoder_current(image: np.ndarray, params: EncoderParams):
    """Sum of the branch convolutions. Returns ``(current, contexts)``."""
    out = None
    ctxs = []
    for w, b in zip(params.weights, params.biases):
        y, ctx = conv2d_forward(image, w, b)
        out = y if out is None else out + y
        ctxs.append(ctx)
    return out, ctxs


def encoder_current_backward(ctxs: list[OpContext], grad_out: np.ndarray):
    """Per-branch ``(grad_weight, grad_bias)``; the image needs no gradient."""
    grads = []
    for ctx in ctxs:
        _, gw, gb = conv2d_backward(ctx, grad_out, need_input_grad=False)
        grads.append((gw, gb))
    return grads


def merged_conv(image: np.ndarray, params: EncoderParams) -> np.ndarray:
    """One convolution with summed kernels and biases; equal to
    :func:`encoder_current` by linearity."""
    y, _ = conv2d_forward(image, sum(params.weights), sum(params.biases))
    return y


def encode(image: np.ndarray, params: EncoderParams, gamma: np.ndarray, beta: np.ndarray,
           running: RunningStats, spiking: SpikingLayer, T: int, train: bool = True) -> np.ndarray:
    """Present the static image for ``T`` steps: branch sum, batch-norm,
    spiking layer. Returns spikes ``[T, N, O, H, W]``."""
    if image.ndim != 4:
        raise ShapeError(f"encode: image must be [N, C, H, W], got shape {image.shape}")
    current, _ = encoder_current(image, params)
    normed, _ = batchnorm_forward(current, gamma, beta, running, train)
    return spiking.forward(np.broadcast_to(normed, (T,) + normed.shape))


def decode(output_spikes, pool: int = 10):
    """Average firing rate of each population over the window.

    ``output_spikes`` is a list (or stacked array) of ``[N, P*C]`` spike
    tensors, one per timestep. Returns ``(class_scores, prediction)``;
    ties in the argmax go to the lowest class index.
    """
    scores, _ = decode_with_context(output_spikes, pool)
    return scores, scores.argmax(axis=1)


def decode_with_context(output_spikes, pool: int = 10):
    seq = np.asarray(output_spikes) if not isinstance(output_spikes, np.ndarray) else output_spikes
    if seq.ndim != 3 or seq.shape[0] == 0:
        raise ShapeError(f"decode: need a non-empty window of [N, P*C] tensors, got shape {seq.shape}")
    rates = seq.mean(axis=0)
    scores, pctx = avgpool1d_forward(rates, pool)
    return scores, OpContext("decode", pool_ctx=pctx, T=seq.shape[0])


def decode_backward(ctx: OpContext, grad_scores: np.ndarray) -> np.ndarray:
    s = ctx.consume("decode")
    g_rates = avgpool1d_backward(s["pool_ctx"], grad_scores)
    T = s["T"]
    return np.broadcast_to(g_rates / g_rates.dtype.type(T), (T,) + g_rates.shape)
