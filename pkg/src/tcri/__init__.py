"""Target-conditioned representation independence for domain generalization."""

__version__ = "0.1.0"
