"""Learned candidate ordering for backtracking subgraph matching."""

from .graph import LabeledGraph, parse_graph, read_graph, serialize_graph, write_graph
from .search import SearchBudget, SearchProblem, backtracking_search, brute_force_oracle, verify_match

__all__ = [
    "LabeledGraph",
    "parse_graph",
    "read_graph",
    "serialize_graph",
    "write_graph",
    "SearchBudget",
    "SearchProblem",
    "backtracking_search",
    "brute_force_oracle",
    "verify_match",
]
__version__ = "0.1.0"
