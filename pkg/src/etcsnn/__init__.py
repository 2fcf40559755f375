"""Spiking-network training with temporal-consistency regularization.

A small, self-contained research stack: a reverse-mode autodiff tape over
float64 numpy arrays, leaky integrate-and-fire layers with a triangular
surrogate gradient, the temporal-consistency distillation loss and its
diagnostics, AdamW with cosine annealing, synthetic/IDX/event datasets,
and a deterministic trainer with binary checkpoints behind a CLI.
"""

__version__ = "0.1.0"
