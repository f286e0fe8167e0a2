"""Numpy transformer for facial expression recognition with multi-scale patch tokens and text supervision."""
from .config import FERPLUS_CLASSES, RAFDB_CLASSES, Config, load_config
from .model import FERFormer
from .tensor import Tensor, backward, no_grad, precision

__all__ = ["Config", "FERFormer", "FERPLUS_CLASSES", "RAFDB_CLASSES", "Tensor", "backward", "load_config",
           "no_grad", "precision"]
__version__ = "0.1.0"
