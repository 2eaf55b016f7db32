"""Preference-loss training, retrieval-aware expert routing and quorum-halted
federated reasoning over toy policies and synthetic domain corpora."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
