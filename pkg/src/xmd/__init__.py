"""Map brain-signal vectors into a frozen image-text embedding space and decode from it."""

__version__ = "0.1.0"
