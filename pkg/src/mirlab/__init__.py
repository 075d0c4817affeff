"""mirlab: multi-agent gridworld exploration laboratory."""

__version__ = "0.1.0"
