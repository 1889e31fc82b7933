"""Adam, cosine annealing, the epoch loop, evaluation and metrics logging."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, batches
from .model import Network
from .ops import NumericalError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    T: int = 8
    lr: float = 1e-4
    t_max: int = 100
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


def lr_at(epoch: int, lr: float = 1e-4, t_max: int = 100, lr_min: float = 0.0) -> float:
    """Cosine-annealed learning rate for a 0-based epoch index."""
    if epoch >= t_max:
        return lr_min
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * epoch / t_max))


class Adam:
    """Bias-corrected Adam over a dict of named arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if name in self.params and not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def adam_step(net: Network, opt: Adam, lr: float) -> None:
    """One optimizer step on the network's gradients, then project every k
    back into its bounds."""
    opt.step(net.grads(), lr)
    net.clamp_k()


@dataclass
class EvalResult:
    accuracy: float
    rates: list[float]
    neuron_rates: list[np.ndarray]
    predictions: np.ndarray = field(repr=False, default=None)
    scores: np.ndarray = field(repr=False, default=None)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    k: list[float]
    rates: list[float]


def train_epoch(net: Network, data: Dataset, cfg: TrainConfig, opt: Adam, epoch: int,
                on_batch: Callable[[Network], None] | None = None,
                on_step: Callable[[Network], None] | None = None):
    """One pass over ``data``. Returns ``(mean_loss, accuracy, lr)``.

    ``on_batch`` is called after each forward/backward (caches still hold the
    window's membrane potentials); ``on_step`` after each optimizer step.
    """
    lr = lr_at(epoch, cfg.lr, cfg.t_max, cfg.lr_min)
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    total_loss = 0.0
    correct = 0
    seen = 0
    for images, labels in batches(data, cfg.batch_size, seed=cfg.seed * 100003 + epoch):
        net.reset_states()
        scores, _ = net.forward_T(images, cfg.T, train=True, rng=rng)
        if on_batch is not None:
            on_batch(net)
        loss = net.loss_and_backward(scores, labels)
        adam_step(net, opt, lr)
        if on_step is not None:
            on_step(net)
        total_loss += loss * len(labels)
        correct += int((scores.argmax(axis=1) == labels).sum())
        seen += len(labels)
    return total_loss / seen, correct / seen, lr


def evaluate(net: Network, data: Dataset, T: int, batch_size: int = 256) -> EvalResult:
    """Eval-mode accuracy plus per-layer firing rates averaged over ``data``."""
    correct = 0
    preds, all_scores = [], []
    rate_sums = [0.0] * len(net.spiking)
    neuron_sums = None
    for images, labels in batches(data, batch_size, shuffle=False):
        net.reset_states()
        scores, diag = net.forward_T(images, T, train=False)
        pred = scores.argmax(axis=1)
        preds.append(pred)
        all_scores.append(scores)
        correct += int((pred == labels).sum())
        n = len(labels)
        for i, r in enumerate(diag.rates):
            rate_sums[i] += r * n
        batch_neuron = [nr.astype(np.float64) * n for nr in diag.neuron_rates]
        neuron_sums = batch_neuron if neuron_sums is None else [a + b for a, b in zip(neuron_sums, batch_neuron)]
    net.reset_states()
    total = len(data)
    return EvalResult(
        accuracy=correct / total,
        rates=[r / total for r in rate_sums],
        neuron_rates=[a / total for a in neuron_sums],
        predictions=np.concatenate(preds),
        scores=np.concatenate(all_scores),
    )


def metrics_header(num_spiking: int) -> list[str]:
    return (["epoch", "train_loss", "train_acc", "test_acc", "lr"]
            + [f"k_layer{i}" for i in range(num_spiking)]
            + [f"rate_layer{i}" for i in range(num_spiking)])


def metrics_row(m: EpochMetrics) -> list[str]:
    vals = [m.train_loss, m.train_acc, m.test_acc, m.lr, *m.k, *m.rates]
    return [str(m.epoch)] + [repr(float(v)) for v in vals]


def metrics_csv(rows: list[EpochMetrics], num_spiking: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(num_spiking))
    for r in rows:
        w.writerow(metrics_row(r))
    return buf.getvalue()


def rate_histogram(neuron_rates: np.ndarray, bins: int = 20) -> np.ndarray:
    """Counts of per-neuron firing rates in ``bins`` equal bins over [0, 1]."""
    counts, _ = np.histogram(np.ravel(neuron_rates), bins=bins, range=(0.0, 1.0))
    return counts


@dataclass
class FitResult:
    history: list[EpochMetrics]
    k_steps: list[list[float]]  # k of every spiking layer after each optimizer step
    final_eval: EvalResult | None = None


def fit(net: Network, train_data: Dataset, test_data: Dataset, cfg: TrainConfig,
        on_epoch: Callable[[EpochMetrics], None] | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, evaluating after each one."""
    opt = Adam(net.params(), cfg.beta1, cfg.beta2, cfg.eps)
    history: list[EpochMetrics] = []
    k_steps: list[list[float]] = []
    ev = None
    for epoch in range(cfg.epochs):
        loss, acc, lr = train_epoch(net, train_data, cfg, opt, epoch,
                                    on_step=lambda n: k_steps.append(n.k_values()))
        ev = evaluate(net, test_data, cfg.T)
        m = EpochMetrics(epoch + 1, loss, acc, ev.accuracy, lr, net.k_values(), ev.rates)
        log.info("epoch %d loss %.5f train_acc %.4f test_acc %.4f k %s", m.epoch, loss, acc,
                 ev.accuracy, ["%.4f" % k for k in m.k])
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return FitResult(history, k_steps, ev)
