"""Memory-disk hybrid approximate nearest neighbor search.

Representatives of balanced posting lists live in memory; the lists
themselves live in a page-aligned file and are fetched per query.
"""

from .clustering import BalancedClusteringConfig, ClusterAssignment, build_partition
from .errors import CorruptionError, FormatError, InternalError, InvalidArgumentError, SpannError
from .evaluation import GroundTruth, brute_force_topk, recall_at_r, vq_capacity
from .navigator import Strategy
from .searcher import SearchParams, SearchResult, SpannIndex, batch_search, build_index, search
from .vectors import Dataset, Metric, distance, distances, read_vector_file, write_vector_file

__all__ = [
    "BalancedClusteringConfig",
    "ClusterAssignment",
    "CorruptionError",
    "Dataset",
    "FormatError",
    "GroundTruth",
    "InternalError",
    "InvalidArgumentError",
    "Metric",
    "SearchParams",
    "SearchResult",
    "SpannError",
    "SpannIndex",
    "Strategy",
    "batch_search",
    "brute_force_topk",
    "build_index",
    "build_partition",
    "distance",
    "distances",
    "read_vector_file",
    "recall_at_r",
    "search",
    "vq_capacity",
    "write_vector_file",
]
