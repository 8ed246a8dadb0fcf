"""Dense-tokenizer generative recommendation: tokenizer, clusterer, recommender, evaluation."""

__version__ = "0.1.0"
