"""Semi-supervised temporal action proposal generation on snippet features."""

__version__ = "0.1.0"
