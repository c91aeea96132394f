"""Exact-enumeration toolkit relating GFlowNets to other generative models."""

from .dag import DagEnv, PolicySet, sample_backward, sample_forward
from .oracle import exact_flows, terminal_distribution

__version__ = "0.1.0"

__all__ = ["DagEnv", "PolicySet", "sample_forward", "sample_backward", "exact_flows", "terminal_distribution"]
