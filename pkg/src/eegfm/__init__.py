"""Hybrid-attention EEG foundation model: data, features, attention, masking,
model, losses, training, metrics and a command-line driver."""

__version__ = "0.1.0"
