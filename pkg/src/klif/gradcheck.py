"""End-to-end finite-difference check of the hand-written BPTT.

The network runs in float64 and in relaxed mode, where every spike is the
smooth arctangent primitive whose derivative is exactly the surrogate used in
the backward pass. Central differences of the MSE loss are then compared with
the analytic gradient of every parameter tensor, including each ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .arch import GRADCHECK_ARCH
from .model import Network
from .neuron import SpikingLayerConfig

TOLERANCE = 1e-4
MIN_STEP = 1e-7
# Denominator floor: gradients smaller than this are compared in absolute terms.
# Conv biases in front of batch-norm have an exactly-zero true gradient.
GRAD_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    size: int
    rel_error: float
    max_abs_error: float
    grad_norm: float
    reduced_steps: int = 0


@dataclass
class GradcheckReport:
    checks: list[ParamCheck]
    tolerance: float = TOLERANCE

    @property
    def worst(self) -> ParamCheck:
        return max(self.checks, key=lambda c: c.rel_error)

    @property
    def passed(self) -> bool:
        return all(c.rel_error < self.tolerance for c in self.checks)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over one parameter tensor."""
    diff = float(np.linalg.norm(np.ravel(analytic - numeric)))
    scale = max(float(np.linalg.norm(np.ravel(analytic))), float(np.linalg.norm(np.ravel(numeric))), floor)
    return diff / scale


def decision_signature(net: Network) -> np.ndarray:
    """Every discrete branch taken by the last forward pass: activation masks,
    hard reset gates and max-pool winners. Finite differences are only valid
    while this stays fixed."""
    from .model import MaxPool2d

    parts = []
    for s in net.spiking:
        cfg = s.layer.cfg
        for c in s.layer.state.caches:
            if cfg.has_k:
                parts.append(s.layer.k * c.h > 0)
            if cfg.detach_reset:
                parts.append(c.gate > 0.5)
    for layer in net.layers:
        if isinstance(layer, MaxPool2d):
            parts.append(layer._ctx.saved["idx"])
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.ravel(p).astype(np.int64) for p in parts])


def build_check_network(neuron: SpikingLayerConfig, arch: str = GRADCHECK_ARCH, input_shape=(1, 6, 6),
                        seed: int = 0) -> Network:
    """Float64 relaxed-mode network with non-trivial k, gamma and beta."""
    net = Network(arch, input_shape, replace(neuron, k_learnable=True), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, p in net.params().items():
        if name.endswith(".gamma"):
            p[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(".beta"):
            p[...] = rng.uniform(-0.5, 0.5, p.shape)
    if neuron.kind.value != "lif":
        for s in net.spiking:
            s.layer.k = rng.uniform(0.7, 1.6)
    net.set_relaxed(True)
    return net


def run_gradcheck(neuron: SpikingLayerConfig | None = None, arch: str = GRADCHECK_ARCH, input_shape=(1, 6, 6),
                  T: int = 3, batch: int = 2, eps: float = 1e-3, seed: int = 0,
                  break_surrogate: bool = False) -> GradcheckReport:
    neuron = neuron or SpikingLayerConfig()
    net = build_check_network(neuron, arch, input_shape, seed)
    if break_surrogate:
        for s in net.spiking:
            s.layer.surrogate_gain = 1.25
    rng = np.random.default_rng(seed + 2)
    images = rng.random((batch,) + tuple(input_shape))
    labels = rng.integers(0, net.num_classes, batch)
    drop_seed = seed + 3

    def forward():
        return net.forward_T(images, T, train=True, rng=np.random.default_rng(drop_seed))[0]

    scores = forward()
    net.loss_and_backward(scores, labels)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in net.grads().items()}

    def probe():
        from .model import mse_loss
        loss = mse_loss(forward(), labels, net.num_classes)[0]
        return loss, decision_signature(net)

    _, base = probe()
    checks = []
    for name, p in net.params().items():
        numeric = np.zeros(p.shape)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        reduced = 0
        for i in range(flat.size):
            orig = flat[i]
            h = eps
            while True:
                flat[i] = orig + h
                lp, sp = probe()
                flat[i] = orig - h
                lm, sm = probe()
                flat[i] = orig
                # the +-h interval straddles a kink: shrink the step
                if h / 10 >= MIN_STEP and not (np.array_equal(sp, base) and np.array_equal(sm, base)):
                    h /= 10
                    continue
                break
            reduced += h < eps
            nflat[i] = (lp - lm) / (2 * h)
        a = analytic[name]
        checks.append(ParamCheck(name, p.size, relative_error(a, numeric),
                                 float(np.max(np.abs(a - numeric))), float(np.linalg.norm(a)), reduced))
    net.reset_states()
    return GradcheckReport(checks)


def format_report(report: GradcheckReport) -> str:
    lines = [f"{'parameter':<22}{'size':>6}{'|grad|':>12}{'rel err':>12}{'max abs':>12}{'kinks':>7}"]
    for c in report.checks:
        lines.append(f"{c.name:<22}{c.size:>6}{c.grad_norm:>12.3e}{c.rel_error:>12.3e}"
                     f"{c.max_abs_error:>12.3e}{c.reduced_steps:>7}")
    w = report.worst
    verdict = "PASS" if report.passed else "FAIL"
    lines.append(f"worst: {w.name} rel err {w.rel_error:.3e} (tolerance {report.tolerance:g}) -> {verdict}")
    return "\n".join(lines)
