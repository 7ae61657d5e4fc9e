"""Neural-operator PDE surrogates with state-space and attention mixers."""

__version__ = "0.1.0"
