"""Adversarial causal/bias feature decomposition for incremental detection,
with synthetic spurious-correlation benchmarks and a reproducible harness."""

__version__ = "0.1.0"
