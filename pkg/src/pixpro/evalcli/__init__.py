"""Synthetic data, evaluation probes, ablations and the command-line interface."""
