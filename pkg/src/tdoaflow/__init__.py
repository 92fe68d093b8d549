"""Multi-source TDOA localization with belief propagation and particle flows."""

__version__ = "0.1.0"
