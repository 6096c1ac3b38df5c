"""Multi-person age estimation: detection and age/gender heads in one model."""

__version__ = "0.1.0"
