"""es2emb: user embeddings from event sequences via a small text language model."""

__version__ = "0.1.0"
