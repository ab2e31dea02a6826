"""Parameter-efficient contrastive fine-tuning and text-to-code retrieval."""

__version__ = "0.1.0"
