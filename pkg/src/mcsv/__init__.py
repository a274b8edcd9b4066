"""Self-supervised speaker embeddings with symmetric, margin-augmented contrastive losses."""

__version__ = "0.1.0"
