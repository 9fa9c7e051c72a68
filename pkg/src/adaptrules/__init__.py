"""Design and optimize adaptation rules for a simulated elastic web tier."""

__version__ = "0.1.0"
