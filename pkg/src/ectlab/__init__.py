"""Two-stage EDM pretraining and easy consistency tuning on a gated U-Net."""

__version__ = "0.1.0"
