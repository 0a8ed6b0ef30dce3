"""Knowledge-graph prompt construction and Gumbel-Softmax prompt
selection over cached embeddings."""

__version__ = "0.1.0"
