"""latentloop: latent feedback recurrence for structured-data transformers."""

__version__ = "0.1.0"
