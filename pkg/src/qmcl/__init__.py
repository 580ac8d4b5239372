"""Quantum-mechanical closure of coarse-grained shallow water dynamics."""

__version__ = "0.1.0"

from .estimator import QMClosure  # noqa: E402
from .pipeline import RunConfig  # noqa: E402

__all__ = ["QMClosure", "RunConfig", "__version__"]
