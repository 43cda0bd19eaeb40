"""Detect DNS manipulation by fetching content from resolved IPs and checking
certificates and blockpages, with a deterministic censor simulator and a
consistency-heuristic baseline for comparison."""

__version__ = "0.1.0"
