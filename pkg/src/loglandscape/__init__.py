"""Loss-proportional SGD noise, log-landscape Langevin dynamics and power-law escape."""

__version__ = "0.1.0"
