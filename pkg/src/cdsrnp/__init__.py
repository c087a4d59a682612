"""Cross-domain sequential recommendation via neural processes."""
from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
