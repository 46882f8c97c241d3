"""Cross-dataset audio embeddings for sound-effects libraries."""

__version__ = "0.1.0"
