"""relace-sidecar: listwise fine-tuning and serving for a cross-encoder reranker."""

__version__ = "0.1.0"
