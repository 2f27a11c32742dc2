"""Black-box speaker-embedding adaptation by gradient-estimated input reprogramming."""

__version__ = "0.1.0"
