"""Flow matching as autoregressive next-state prediction with a small causal transformer."""

__version__ = "0.1.0"
