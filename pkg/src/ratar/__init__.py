"""Retrieval-augmented annual yield prediction on daily driver sequences."""

__version__ = "0.1.0"
