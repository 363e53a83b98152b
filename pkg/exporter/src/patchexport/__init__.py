"""One-shot exporter turning images into frozen patch-token embedding
containers and class-name prompts into classifier-weight containers."""

__version__ = "0.1.0"
