"""ReLU-based preference optimization on tiny exactly-differentiable policies."""

__version__ = "0.1.0"
