"""Spiking neural networks with KLIF neurons, trained by surrogate-gradient BPTT."""

__version__ = "0.1.0"
