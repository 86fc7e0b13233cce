"""Supervision-level benchmark: box detector vs. image classifier + CAM vs. VAE anomaly detector."""

__version__ = "0.1.0"
