"""LIF, KLIF and KLIF* spiking neurons with an arctangent surrogate gradient.

Per-timestep dynamics (all elementwise)::

    charge   H_t = V_{t-1} + (V_reset - V_{t-1}) / tau + X_t / tau
    LIF      S_t = [H_t > V_th]                 V_t = H_t (1 - S_t) + V_reset S_t
    KLIF     F_t = act(k H_t), S_t = [F_t > V_th], V_t = F_t (1 - S_t) + V_reset S_t
    KLIF*    as KLIF but the retained potential is F_t / k

``k`` is one scalar per layer. In the backward pass the step function is
replaced by the derivative of ``arctan``; in *relaxed* mode the forward pass
uses the matching primitive so that finite differences see the same function
the analytic backward differentiates.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .ops import ContextError, ShapeError, check_finite

CELU_ALPHA = 1.0
LEAKY_SLOPE = 0.01


class NeuronKind(str, enum.Enum):
    LIF = "lif"
    KLIF = "klif"
    KLIF_STAR = "klif-star"


class Activation(str, enum.Enum):
    RELU = "relu"
    CELU = "celu"
    LEAKY_RELU = "leaky-relu"
    IDENTITY = "identity"


def activation_forward(kind: Activation, x: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(x, 0)
    if kind is Activation.IDENTITY:
        return x
    if kind is Activation.LEAKY_RELU:
        return np.where(x > 0, x, x * x.dtype.type(LEAKY_SLOPE))
    if kind is Activation.CELU:
        a = x.dtype.type(CELU_ALPHA)
        return np.where(x > 0, x, a * np.expm1(np.minimum(x, 0) / a))
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: Activation, x: np.ndarray) -> np.ndarray:
    one = x.dtype.type(1)
    if kind is Activation.RELU:
        return (x > 0).astype(x.dtype)
    if kind is Activation.IDENTITY:
        return np.ones_like(x)
    if kind is Activation.LEAKY_RELU:
        return np.where(x > 0, one, x.dtype.type(LEAKY_SLOPE))
    if kind is Activation.CELU:
        return np.where(x > 0, one, np.exp(np.minimum(x, 0) / x.dtype.type(CELU_ALPHA)))
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class SpikingLayerConfig:
    kind: NeuronKind = NeuronKind.KLIF
    activation: Activation = Activation.RELU
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    alpha: float = 2.0
    k_init: float = 1.0
    k_min: float = 0.5
    k_max: float = 5.0
    k_learnable: bool = True
    detach_reset: bool = False

    def __post_init__(self):
        self.kind = NeuronKind(self.kind)
        self.activation = Activation(self.activation)
        if not self.tau > 1:
            raise ValueError(f"tau must be > 1, got {self.tau}")
        if not self.v_th > self.v_reset:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")
        if not self.k_min <= self.k_init <= self.k_max:
            raise ValueError(f"need k_min <= k_init <= k_max, got {self.k_min}, {self.k_init}, {self.k_max}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    @property
    def has_k(self) -> bool:
        return self.kind is not NeuronKind.LIF


# ---------------------------------------------------------------------------
# surrogate


def surrogate_grad(x: np.ndarray, alpha: float = 2.0) -> np.ndarray:
    """Derivative of the arctangent surrogate, ``alpha / (2 (1 + (pi/2 alpha x)^2))``."""
    x = np.asarray(x)
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    z = (math.pi / 2 * alpha) * x
    return (alpha / 2 / (1 + z * z)).astype(dt, copy=False)


def surrogate_primitive(x: np.ndarray, alpha: float = 2.0) -> np.ndarray:
    """Soft spike ``arctan(pi/2 alpha x) / pi + 1/2``; its derivative is
    :func:`surrogate_grad`."""
    x = np.asarray(x)
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return (np.arctan((math.pi / 2 * alpha) * x) / math.pi + 0.5).astype(dt, copy=False)


def heaviside(x: np.ndarray) -> np.ndarray:
    """Strict step: a potential exactly at threshold does not spike."""
    return (x > 0).astype(x.dtype)


# ---------------------------------------------------------------------------
# single-timestep primitives


def charge(v_prev: np.ndarray, x: np.ndarray, cfg: SpikingLayerConfig) -> np.ndarray:
    if v_prev.shape != x.shape:
        raise ShapeError(f"charge: input shape {x.shape} does not match membrane shape {v_prev.shape}")
    inv_tau = x.dtype.type(1.0 / cfg.tau)
    return v_prev + (x.dtype.type(cfg.v_reset) - v_prev) * inv_tau + x * inv_tau


def _reset(u: np.ndarray, s: np.ndarray, cfg: SpikingLayerConfig) -> np.ndarray:
    return u * (1 - s) + u.dtype.type(cfg.v_reset) * s


def fire_reset_lif(h: np.ndarray, cfg: SpikingLayerConfig):
    s = heaviside(h - h.dtype.type(cfg.v_th))
    return s, _reset(h, s, cfg)


def fire_reset_klif(h: np.ndarray, k, cfg: SpikingLayerConfig):
    f = activation_forward(cfg.activation, h.dtype.type(k) * h)
    s = heaviside(f - h.dtype.type(cfg.v_th))
    return f, s, _reset(f, s, cfg)


def fire_reset_klif_star(h: np.ndarray, k, cfg: SpikingLayerConfig):
    kk = h.dtype.type(k)
    f = activation_forward(cfg.activation, kk * h)
    s = heaviside(f - h.dtype.type(cfg.v_th))
    return f, s, _reset(f / kk, s, cfg)


def clamp_k(k: float, cfg: SpikingLayerConfig) -> float:
    return min(cfg.k_max, max(cfg.k_min, k))


# ---------------------------------------------------------------------------
# state and per-step forward / backward


@dataclass
class StepCache:
    h: np.ndarray
    f: np.ndarray  # equals h for LIF
    s: np.ndarray  # emitted spike (soft in relaxed mode)
    gate: np.ndarray  # value multiplying the reset; hard spike when detached
    v: np.ndarray


@dataclass
class NeuronState:
    v: np.ndarray | None = None
    k: float = 1.0
    k_grad: float = 0.0
    caches: list[StepCache] = field(default_factory=list)


def forward_step(state: NeuronState, x: np.ndarray, cfg: SpikingLayerConfig,
                 relaxed: bool = False) -> np.ndarray:
    """Advance one timestep, append the step cache, return the spike tensor."""
    if state.v is None:
        state.v = np.full_like(x, cfg.v_reset)
    h = charge(state.v, x, cfg)
    dt = h.dtype.type
    if cfg.kind is NeuronKind.LIF:
        f = h
    else:
        f = activation_forward(cfg.activation, dt(state.k) * h)
    hard = heaviside(f - dt(cfg.v_th))
    s = surrogate_primitive(f - dt(cfg.v_th), cfg.alpha) if relaxed else hard
    gate = hard if cfg.detach_reset else s
    u = f / dt(state.k) if cfg.kind is NeuronKind.KLIF_STAR else f
    v = _reset(u, gate, cfg)
    check_finite("spiking forward", v)
    state.v = v
    state.caches.append(StepCache(h, f, s, gate, v))
    return s


def backward_step(cache: StepCache, k: float, cfg: SpikingLayerConfig,
                  grad_s: np.ndarray, grad_v: np.ndarray | None, surrogate_gain: float = 1.0):
    """Chain rule through one timestep.

    ``grad_s`` is dL/dS_t from the layer above, ``grad_v`` is dL/dV_t from
    timestep t+1 (``None`` at the last step). Returns
    ``(grad_x, grad_v_prev, k_contribution)``.
    """
    h, f, gate = cache.h, cache.f, cache.gate
    dt = h.dtype.type
    kk = dt(k)
    star = cfg.kind is NeuronKind.KLIF_STAR
    u = f / kk if star else f
    g_s = grad_s
    g_u = None
    if grad_v is not None:
        g_u = grad_v * (1 - gate)
        if not cfg.detach_reset:
            g_s = g_s + grad_v * (dt(cfg.v_reset) - u)
    g_f = g_s * (surrogate_grad(f - dt(cfg.v_th), cfg.alpha) * dt(surrogate_gain))
    k_contrib = 0.0
    if g_u is not None:
        if star:
            g_f = g_f + g_u / kk
            k_contrib -= float(np.sum(g_u * f, dtype=np.float64)) / (k * k)
        else:
            g_f = g_f + g_u
    if cfg.kind is NeuronKind.LIF:
        g_h = g_f
    else:
        g_pre = g_f * activation_grad(cfg.activation, kk * h)
        k_contrib += float(np.sum(g_pre * h, dtype=np.float64))
        g_h = g_pre * kk
    inv_tau = dt(1.0 / cfg.tau)
    return g_h * inv_tau, g_h * (1 - inv_tau), k_contrib


class SpikingLayer:
    """A layer of spiking neurons sharing one ``k``; runs a whole time window.

    ``k`` lives in a 0-d array of the network dtype so the optimizer can
    update it in place like any weight and checkpoints restore it bitwise.
    """

    def __init__(self, cfg: SpikingLayerConfig, name: str = "spk", dtype=np.float32):
        self.cfg = cfg
        self.name = name
        self.k_param = np.array(cfg.k_init, dtype=dtype)
        self.state = NeuronState(k=float(self.k_param))
        self.relaxed = False
        self.surrogate_gain = 1.0
        self.k_step_grads: list[float] = []

    @property
    def k(self) -> float:
        return float(self.k_param)

    @k.setter
    def k(self, value: float) -> None:
        self.k_param[...] = value

    @property
    def trainable(self) -> bool:
        return self.cfg.has_k and self.cfg.k_learnable

    def reset(self) -> None:
        self.state.v = None
        self.state.caches = []
        self.state.k = self.k

    def clamp(self) -> None:
        self.k_param[...] = clamp_k(self.k, self.cfg)

    def forward(self, x_seq: np.ndarray) -> np.ndarray:
        """``x_seq`` is ``[T, ...]``; returns spikes of the same shape."""
        self.reset()
        out = np.empty_like(x_seq)
        for t in range(x_seq.shape[0]):
            out[t] = forward_step(self.state, x_seq[t], self.cfg, relaxed=self.relaxed)
        return out

    def backward(self, grad_s_seq: np.ndarray) -> np.ndarray:
        caches = self.state.caches
        if not caches or len(caches) != grad_s_seq.shape[0]:
            raise ContextError(f"{self.name}: no forward cache for {grad_s_seq.shape[0]} timesteps")
        grad_x = np.empty_like(grad_s_seq)
        grad_v = None
        contribs = [0.0] * len(caches)
        for t in range(len(caches) - 1, -1, -1):
            grad_x[t], grad_v, contribs[t] = backward_step(
                caches[t], self.state.k, self.cfg, grad_s_seq[t], grad_v, self.surrogate_gain)
        self.state.caches = []
        self.k_step_grads = contribs
        self.state.k_grad = math.fsum(contribs) if self.cfg.has_k else 0.0
        check_finite("spiking backward", grad_x)
        return grad_x
