"""Chain-of-thought enriched sequential recommendation: extraction, retrieval, ranking, evaluation."""

__version__ = "0.1.0"
