"""Learning visual representations by temporal straightening, at desk scale."""

__version__ = "0.1.0"
