"""Action-conditioned digital twin for cellular networks."""

__version__ = "0.1.0"
