"""Network assembly, the multi-step forward pass, MSE loss and full BPTT.

Layers run one at a time over the whole window: every stateless layer sees
its ``T`` input frames stacked into the batch axis, and only spiking layers
iterate over time. For a feed-forward net this computes exactly the same
values as stepping the whole network once per timestep.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .arch import FC, Conv, MaxPool, NetworkSpec, parse_arch
from .codec import EncoderParams, decode_backward, decode_with_context, encoder_current, encoder_current_backward
from .neuron import SpikingLayer, SpikingLayerConfig
from .ops import ContextError, RunningStats, ShapeError

DROPOUT_P = 0.5


@dataclass
class Run:
    """Per-forward settings shared by the layers."""

    T: int
    train: bool
    rng: np.random.Generator | None = None


class Layer:
    name = ""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, run: Run) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, shape).astype(dtype)


class EncoderLayer(Layer):
    def __init__(self, name, in_ch, out_ch, branches, rng, dtype):
        self.name = name
        self.enc = EncoderParams(in_ch, out_ch, branches, rng, dtype)
        self.grads: dict[str, np.ndarray] = {}
        self._ctxs = None

    def params(self):
        p = {}
        for i, (w, b) in enumerate(zip(self.enc.weights, self.enc.biases)):
            p[f"{self.name}.branch{i}.weight"] = w
            p[f"{self.name}.branch{i}.bias"] = b
        return p

    def forward(self, x, run):
        y, self._ctxs = encoder_current(x, self.enc)
        return y

    def backward(self, g):
        if self._ctxs is None:
            raise ContextError(f"{self.name}: backward without forward")
        for i, (gw, gb) in enumerate(encoder_current_backward(self._ctxs, g)):
            self.grads[f"{self.name}.branch{i}.weight"] = gw
            self.grads[f"{self.name}.branch{i}.bias"] = gb
        self._ctxs = None
        return None


class Conv2d(Layer):
    def __init__(self, name, in_ch, out_ch, rng, dtype):
        self.name = name
        bound = 1.0 / np.sqrt(in_ch * 9)
        self.weight = _uniform(rng, bound, (out_ch, in_ch, 3, 3), dtype)
        self.bias = _uniform(rng, bound, out_ch, dtype)
        self.grads = {}

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x, run):
        lead = x.shape[:-3]
        y, self._ctx = ops.conv2d_forward(x.reshape((-1,) + x.shape[-3:]), self.weight, self.bias)
        return y.reshape(lead + y.shape[1:])

    def backward(self, g):
        lead = g.shape[:-3]
        gx, gw, gb = ops.conv2d_backward(self._ctx, g.reshape((-1,) + g.shape[-3:]))
        self.grads = {f"{self.name}.weight": gw, f"{self.name}.bias": gb}
        return gx.reshape(lead + gx.shape[1:])


class BatchNorm(Layer):
    """Per-channel normalisation; every axis before the channel axis is batch."""

    def __init__(self, name, channels, sample_rank, dtype):
        self.name = name
        self.sample_rank = sample_rank
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running = RunningStats(channels, dtype)
        self.grads = {}

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.running.mean, f"{self.name}.running_var": self.running.var}

    def forward(self, x, run):
        shape = x.shape
        flat = x.reshape((-1,) + shape[x.ndim - self.sample_rank:])
        y, self._ctx = ops.batchnorm_forward(flat, self.gamma, self.beta, self.running, run.train)
        return y.reshape(shape)

    def backward(self, g):
        shape = g.shape
        gx, gg, gb = ops.batchnorm_backward(self._ctx, g.reshape((-1,) + shape[g.ndim - self.sample_rank:]))
        self.grads = {f"{self.name}.gamma": gg, f"{self.name}.beta": gb}
        return gx.reshape(shape)


class RepeatT(Layer):
    """Feeds one static frame to every timestep."""

    name = "repeat"

    def forward(self, x, run):
        return np.broadcast_to(x, (run.T,) + x.shape)

    def backward(self, g):
        return g.sum(axis=0)


class Spiking(Layer):
    def __init__(self, name, cfg: SpikingLayerConfig, dtype):
        self.name = name
        self.layer = SpikingLayer(cfg, name, dtype)
        self.grads = {}
        self.last_spikes: np.ndarray | None = None

    def params(self):
        return {f"{self.name}.k": self.layer.k_param} if self.layer.trainable else {}

    def buffers(self):
        return {} if self.layer.trainable else {f"{self.name}.k": self.layer.k_param}

    def forward(self, x, run):
        s = self.layer.forward(x)
        self.last_spikes = s
        return s

    def backward(self, g):
        gx = self.layer.backward(g)
        if self.layer.trainable:
            self.grads = {f"{self.name}.k": np.array(self.layer.state.k_grad, dtype=self.layer.k_param.dtype)}
        return gx


class MaxPool2d(Layer):
    name = "maxpool"

    def forward(self, x, run):
        lead = x.shape[:-3]
        y, self._ctx = ops.maxpool2d_forward(x.reshape((-1,) + x.shape[-3:]))
        return y.reshape(lead + y.shape[1:])

    def backward(self, g):
        lead = g.shape[:-3]
        gx = ops.maxpool2d_backward(self._ctx, g.reshape((-1,) + g.shape[-3:]))
        return gx.reshape(lead + gx.shape[1:])


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, run):
        self._shape = x.shape
        return x.reshape(x.shape[:2] + (-1,))

    def backward(self, g):
        return g.reshape(self._shape)


class Dropout(Layer):
    """Inverted dropout with one mask per sample shared across timesteps."""

    def __init__(self, name, p):
        self.name = name
        self.p = p

    def forward(self, x, run):
        y, self._ctx = ops.dropout_forward(x, self.p, run.train, run.rng, mask_shape=(1,) + x.shape[1:])
        return y

    def backward(self, g):
        return ops.dropout_backward(self._ctx, g)


class Linear(Layer):
    def __init__(self, name, in_f, out_f, rng, dtype):
        self.name = name
        bound = 1.0 / np.sqrt(in_f)
        self.weight = _uniform(rng, bound, (out_f, in_f), dtype)
        self.bias = _uniform(rng, bound, out_f, dtype)
        self.grads = {}

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x, run):
        lead = x.shape[:-1]
        y, self._ctx = ops.linear_forward(x.reshape(-1, x.shape[-1]), self.weight, self.bias)
        return y.reshape(lead + (y.shape[-1],))

    def backward(self, g):
        lead = g.shape[:-1]
        gx, gw, gb = ops.linear_backward(self._ctx, g.reshape(-1, g.shape[-1]))
        self.grads = {f"{self.name}.weight": gw, f"{self.name}.bias": gb}
        return gx.reshape(lead + (gx.shape[-1],))


@dataclass
class Diagnostics:
    """Per spiking layer: mean firing rate, per-neuron rates and current k."""

    rates: list[float] = field(default_factory=list)
    neuron_rates: list[np.ndarray] = field(default_factory=list)
    k: list[float] = field(default_factory=list)


class Network:
    """A spiking network built from an architecture string.

    ``input_shape`` is ``(C, H, W)`` of one image.
    """

    def __init__(self, arch: str | NetworkSpec, input_shape, neuron: SpikingLayerConfig | None = None,
                 seed: int = 0, dtype=np.float32, dropout: float = DROPOUT_P):
        self.spec = parse_arch(arch) if isinstance(arch, str) else arch
        self.input_shape = tuple(input_shape)
        self.neuron = neuron or SpikingLayerConfig()
        self.dtype = np.dtype(dtype)
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        self.spiking: list[Spiking] = []
        self._build(rng)
        self._pending = None

    # -- construction -----------------------------------------------------

    def _spk(self):
        s = Spiking(f"spk{len(self.spiking)}", self.neuron, self.dtype)
        self.spiking.append(s)
        self.layers.append(s)

    def _build(self, rng):
        c, h, w = self.input_shape
        enc = self.spec.encoder
        dt = self.dtype
        self.layers.append(EncoderLayer("enc", c, enc.channels, enc.branches, rng, dt))
        self.layers.append(BatchNorm("enc.bn", enc.channels, 3, dt))
        self.layers.append(RepeatT())
        self._spk()
        c = enc.channels
        flat = None
        nconv = nfc = 0
        for it in self.spec.expanded_body():
            if isinstance(it, Conv):
                if flat is not None:
                    raise ShapeError("convolution after a fully connected layer")
                self.layers.append(Conv2d(f"conv{nconv}", c, it.channels, rng, dt))
                self.layers.append(BatchNorm(f"conv{nconv}.bn", it.channels, 3, dt))
                self._spk()
                c = it.channels
                nconv += 1
            elif isinstance(it, MaxPool):
                if flat is not None:
                    raise ShapeError("max-pooling after a fully connected layer")
                if h % 2 or w % 2:
                    raise ShapeError(f"max-pooling needs even spatial dims, got {h}x{w}")
                self.layers.append(MaxPool2d())
                h, w = h // 2, w // 2
            elif isinstance(it, FC):
                if flat is None:
                    self.layers.append(Flatten())
                    flat = c * h * w
                self.layers.append(Dropout(f"fc{nfc}.dropout", self.dropout))
                self.layers.append(Linear(f"fc{nfc}", flat, it.features, rng, dt))
                self._spk()
                flat = it.features
                nfc += 1
        if flat is None:
            self.layers.append(Flatten())
            flat = c * h * w
        dec = self.spec.decoder
        self.layers.append(Dropout("dec.dropout", self.dropout))
        self.layers.append(Linear("dec", flat, dec.width, rng, dt))
        self._spk()

    @property
    def num_classes(self) -> int:
        return self.spec.decoder.classes

    # -- parameters -------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Every tensor a checkpoint must hold, in a fixed order."""
        return {**self.params(), **self.buffers()}

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(getattr(layer, "grads", {}))
        return out

    def k_values(self) -> list[float]:
        return [s.layer.k for s in self.spiking]

    def clamp_k(self) -> None:
        for s in self.spiking:
            if s.layer.cfg.has_k:
                s.layer.clamp()

    def set_relaxed(self, relaxed: bool) -> None:
        for s in self.spiking:
            s.layer.relaxed = relaxed

    # -- running ----------------------------------------------------------

    def reset_states(self) -> None:
        for s in self.spiking:
            s.layer.reset()
            s.last_spikes = None
        self._pending = None

    def forward_T(self, images: np.ndarray, T: int, train: bool = True,
                  rng: np.random.Generator | None = None):
        """Run ``T`` timesteps on a batch of static images.

        Returns ``(class_scores, diagnostics)``.
        """
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        if images.ndim != 4 or tuple(images.shape[1:]) != self.input_shape:
            raise ShapeError(f"images must be [N, {', '.join(map(str, self.input_shape))}], got {images.shape}")
        self.reset_states()
        run = Run(T, train, rng)
        x = images.astype(self.dtype, copy=False)
        for layer in self.layers:
            x = layer.forward(x, run)
        scores, dctx = decode_with_context(x, self.spec.decoder.pool)
        self._pending = dctx
        diag = Diagnostics()
        for s in self.spiking:
            spikes = s.last_spikes
            per_neuron = spikes.mean(axis=(0, 1))
            diag.rates.append(float(spikes.mean(dtype=np.float64)))
            diag.neuron_rates.append(per_neuron)
            diag.k.append(s.layer.k)
        return scores, diag

    def loss_and_backward(self, scores: np.ndarray, labels: np.ndarray) -> float:
        """MSE against one-hot targets, then BPTT through every layer.

        Gradients are left in :meth:`grads`.
        """
        if self._pending is None:
            raise ContextError("loss_and_backward needs a fresh forward_T")
        loss, g = mse_loss(scores, labels, self.num_classes)
        g = decode_backward(self._pending, g)
        self._pending = None
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return loss


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((labels.shape[0], classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def mse_loss(scores: np.ndarray, labels: np.ndarray, classes: int):
    """Mean over batch and classes of ``(score - onehot)^2`` and its gradient."""
    diff = scores - one_hot(labels, classes, scores.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = diff * scores.dtype.type(2.0 / diff.size)
    return loss, grad


def reset_states(net: Network) -> None:
    net.reset_states()
