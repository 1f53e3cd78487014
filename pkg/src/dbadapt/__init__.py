"""Double-blind federated adaptation of a frozen transformer under simulated homomorphic encryption."""

from .config import ExperimentConfig

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "__version__"]
