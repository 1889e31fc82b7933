"""Command-line entry point: ``klif train|eval|gradcheck|trace``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .arch import DESK_MNIST_ARCH, ArchParseError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, input_shape, load_dataset
from .gradcheck import format_report, run_gradcheck
from .model import Network
from .neuron import SpikingLayer, SpikingLayerConfig, surrogate_grad
from .ops import ContextError, NumericalError, ShapeError
from .train import TrainConfig, evaluate, fit, metrics_csv, rate_histogram

log = logging.getLogger("klif")

_NEURON_FIELDS = {f.name for f in dataclasses.fields(SpikingLayerConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}

# every addressable key with its parser and default
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    try:
        return _BOOL[str(s).strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {s!r}") from None


KEYS: dict[str, tuple] = {
    "dataset": (str, "mnist"),
    "data_dir": (str, "data"),
    "arch": (str, DESK_MNIST_ARCH),
    "ablation": (str, "none"),
    "out": (str, "runs"),
    "checkpoint": (str, None),
    "train_subset": (int, None),
    "test_subset": (int, None),
    "dropout": (float, 0.5),
    # neuron
    "kind": (str, "klif"),
    "activation": (str, "relu"),
    "tau": (float, 2.0),
    "v_th": (float, 1.0),
    "v_reset": (float, 0.0),
    "alpha": (float, 2.0),
    "k_init": (float, 1.0),
    "k_min": (float, 0.5),
    "k_max": (float, 5.0),
    "k_learnable": (_bool, True),
    "detach_reset": (_bool, False),
    # training
    "epochs": (int, 100),
    "batch_size": (int, 64),
    "T": (int, 8),
    "lr": (float, 1e-4),
    "t_max": (int, 100),
    "lr_min": (float, 0.0),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "seed": (int, 0),
    "deterministic": (_bool, False),
}
ALIASES = {"neuron": "kind", "timesteps": "T"}


class CliError(Exception):
    pass


def _canonical(key: str) -> str:
    key = key.strip().replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in KEYS:
        raise CliError(f"unknown config key {key!r}")
    return key


def parse_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = _canonical(key)
        try:
            out[key] = KEYS[key][0](value.strip())
        except ValueError as e:
            raise CliError(f"{path}:{n}: bad value for {key}: {e}") from None
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {k: d for k, (_, d) in KEYS.items()}
    if args.config:
        cfg.update(parse_config_file(args.config))
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    ablation = cfg["ablation"]
    if ablation == "only-k":
        cfg.update(kind="klif", activation="identity", k_learnable=True)
    elif ablation == "only-relu":
        cfg.update(kind="klif", activation="relu", k_learnable=False, k_init=1.0)
    elif ablation != "none":
        raise CliError(f"unknown ablation {ablation!r}")
    return cfg


def neuron_config(cfg: dict) -> SpikingLayerConfig:
    return SpikingLayerConfig(**{k: cfg[k] for k in _NEURON_FIELDS})


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in _TRAIN_FIELDS})


def build_network(cfg: dict) -> Network:
    return Network(cfg["arch"], input_shape(cfg["dataset"]), neuron_config(cfg), seed=cfg["seed"],
                   dropout=cfg["dropout"])


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _config_text(cfg: dict) -> str:
    return "".join(f"{k}={'' if v is None else v}\n" for k, v in cfg.items() if v is not None)


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve(args)
    tcfg = train_config(cfg)
    net = build_network(cfg)
    train = load_dataset(cfg["data_dir"], cfg["dataset"], "train").subset(cfg["train_subset"])
    test = load_dataset(cfg["data_dir"], cfg["dataset"], "test").subset(cfg["test_subset"])

    run_dir = Path(cfg["out"]) / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg['seed']}"
    suffix = 1
    while run_dir.exists():
        run_dir = run_dir.with_name(f"{run_dir.name.split('.')[0]}.{suffix}")
        suffix += 1
    run_dir.mkdir(parents=True)
    (run_dir / "config.txt").write_text(_config_text(cfg))
    log.info("run directory %s", run_dir)

    metrics_path = run_dir / "metrics.csv"
    history = []

    def on_epoch(m):
        history.append(m)
        metrics_path.write_text(metrics_csv(history, len(net.spiking)))
        print(f"epoch {m.epoch}: loss={m.train_loss:.5f} train_acc={m.train_acc:.4f} "
              f"test_acc={m.test_acc:.4f} k={[round(k, 4) for k in m.k]}", flush=True)

    result = fit(net, train, test, tcfg, on_epoch=on_epoch)

    ckpt = Path(cfg["checkpoint"]) if cfg["checkpoint"] else run_dir / "model.ckpt"
    save_checkpoint(net, ckpt)
    n = len(net.spiking)
    _write_csv(run_dir / "k_trajectory.csv", ["step"] + [f"k_layer{i}" for i in range(n)],
               [[i + 1] + [repr(k) for k in ks] for i, ks in enumerate(result.k_steps)])
    last = result.history[-1]
    summary = {
        "final_train_acc": last.train_acc,
        "final_test_acc": last.test_acc,
        "final_train_loss": last.train_loss,
        "final_k": last.k,
        "final_rates": last.rates,
        "epochs": tcfg.epochs,
        "checkpoint": str(ckpt),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {run_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve(args)
    if not cfg["checkpoint"]:
        raise CliError("eval needs --checkpoint")
    net = build_network(cfg)
    load_checkpoint(cfg["checkpoint"], net)
    test = load_dataset(cfg["data_dir"], cfg["dataset"], "test").subset(cfg["test_subset"])
    ev = evaluate(net, test, cfg["T"])
    print(f"test accuracy: {ev.accuracy:.4f}")
    for i, r in enumerate(ev.rates):
        print(f"layer {i}: firing rate {r:.4f}  k={net.spiking[i].layer.k:.4f}")
    if args.out is not None:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        edges = np.linspace(0.0, 1.0, 21)
        rows = []
        for i, nr in enumerate(ev.neuron_rates):
            for b, c in enumerate(rate_histogram(nr)):
                rows.append([i, repr(float(edges[b])), repr(float(edges[b + 1])), int(c)])
        _write_csv(out / "rate_histogram.csv", ["layer", "bin_lo", "bin_hi", "count"], rows)
        (out / "eval.json").write_text(json.dumps({"test_acc": ev.accuracy, "rates": ev.rates}, indent=2) + "\n")
        print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve(args)
    neuron = neuron_config(cfg)
    report = run_gradcheck(neuron, seed=cfg["seed"], break_surrogate=args.break_surrogate)
    print(format_report(report))
    w = report.worst
    print(f"worst: {w.name} rel_error={w.rel_error:.3e}")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def simulate_trace(neuron: SpikingLayerConfig, currents: np.ndarray, k: float | None = None):
    """Rows ``(t, X, H, F, S, V)`` of a single neuron driven by ``currents``."""
    layer = SpikingLayer(neuron, dtype=np.float64)
    if k is not None:
        layer.k = k
    layer.forward(np.asarray(currents, dtype=np.float64).reshape(-1, 1))
    return [(t, float(x), float(c.h[0]), float(c.f[0]), float(c.s[0]), float(c.v[0]))
            for t, (x, c) in enumerate(zip(currents, layer.state.caches))]


def surrogate_curve(alpha: float, k: float, v_th: float = 1.0, lo: float = -3.0, hi: float = 3.0,
                    points: int = 601):
    """Surrogate slope of the spike w.r.t. the charged potential: ``k g'(k x - v_th)``."""
    x = np.linspace(lo, hi, points)
    return x, k * surrogate_grad(k * x - v_th, alpha)


def cmd_trace(args) -> int:
    cfg = resolve(args)
    neuron = neuron_config(cfg)
    if args.input:
        try:
            currents = np.loadtxt(args.input, delimiter=",", ndmin=1, dtype=np.float64)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read current trace {args.input}: {e}") from None
        currents = currents.reshape(-1)
    else:
        currents = np.full(args.steps, args.current, dtype=np.float64)
    k = args.k if args.k is not None else cfg["k_init"]
    rows = simulate_trace(neuron, currents, k)
    out = Path(args.trace_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["t", "X", "H", "F", "S", "V"], [[r[0]] + [repr(v) for v in r[1:]] for r in rows])
    print(f"wrote {out} ({len(rows)} steps, {int(sum(r[4] for r in rows))} spikes)")
    if args.surrogate_out:
        x, g = surrogate_curve(neuron.alpha, k, neuron.v_th)
        sp = Path(args.surrogate_out)
        sp.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(sp, ["x", "g'(x)"], [[repr(float(a)), repr(float(b))] for a, b in zip(x, g)])
        print(f"wrote {sp}")
    return 0


# -- parser -------------------------------------------------------------------

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--dataset", choices=["mnist", "fashion", "cifar10"])
    p.add_argument("--arch")
    p.add_argument("--neuron", dest="kind", choices=["lif", "klif", "klif-star"])
    p.add_argument("--activation", choices=["relu", "celu", "leaky-relu", "identity"])
    p.add_argument("--ablation", choices=["none", "only-k", "only-relu"])
    p.add_argument("--timesteps", dest="T", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_const", const=True)
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.add_argument("--test-subset", dest="test_subset", type=int)
    p.add_argument("--detach-reset", dest="detach_reset", action="store_const", const=True)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="klif", description="Spiking network training with KLIF neurons.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write a run directory")
    _shared(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _shared(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _shared(p)
    p.add_argument("--break-surrogate", action="store_true", help="perturb the surrogate (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("trace", help="simulate one neuron and write its trace")
    _shared(p)
    p.add_argument("--input", help="CSV/text file with one input current per line")
    p.add_argument("--current", type=float, default=3.0, help="constant current when no --input")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--k", type=float)
    p.add_argument("--trace-out", default="trace.csv")
    p.add_argument("--surrogate-out")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ArchParseError, CheckpointError, DataFormatError, ShapeError, NumericalError,
            ContextError, ValueError, OSError) as e:
        print(f"klif {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
