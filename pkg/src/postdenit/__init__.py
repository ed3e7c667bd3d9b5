"""Post-denitrification biofilter simulator with feedforward and model-free methanol dosing."""

__version__ = "0.1.0"
