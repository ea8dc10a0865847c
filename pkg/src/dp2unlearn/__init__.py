"""Desk-scale unlearning framework: DP-protected base training, deployment
fine-tuning, retain-only unlearning, approximate-unlearning baselines and the
full evaluation suite."""

__version__ = "0.1.0"
