"""Two-stage sequential recommender with personalized knowledge-graph path context.

The pipeline: ingest raw interaction data, build a heterogeneous knowledge
graph, train a sequential retriever for top-K candidates, learn per-user
relation-type preferences, extract preference-scored shortest relation paths
between history and candidate items, assemble ranking prompts, score the
candidates with a pluggable single-pass backend, and evaluate leave-one-out
with MRR/NDCG/Recall.
"""

__version__ = "0.1.0"
