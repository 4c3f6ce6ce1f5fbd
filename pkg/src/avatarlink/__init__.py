"""Parameter-streamed Gaussian avatar telepresence."""

__version__ = "0.1.0"
