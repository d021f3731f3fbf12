"""Gate-level approximate multipliers and a small CNN engine for studying their effect on adversarial robustness."""

__version__ = "0.1.0"
