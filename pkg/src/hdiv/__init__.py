"""Post-selection inference for a scalar endogenous effect with many controls and instruments."""

__version__ = "0.1.0"
