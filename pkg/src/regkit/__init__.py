"""regkit: retrieval pipeline toolkit.

Incremental document ingestion, semantic chunking, in-process vector search,
listwise re-ranking, nine-metric evaluation, and the ablation harness that
ties them together.
"""

__version__ = "0.1.0"
