"""Deterministic simulator for hierarchical federated learning.

Split shallow/deep models, mediator-based distribution reconstruction,
rank-truncated feature compression with gradient bias correction, and
differentially private shallow updates, plus a FedAVG baseline under
identical accounting.
"""

__version__ = "0.1.0"
