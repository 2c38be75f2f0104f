"""Tiny-object detection mechanisms on a numpy autodiff core."""
from .errors import ConfigError, NumericError, OracleError, ShapeError

__version__ = "0.1.0"
__all__ = ["ConfigError", "NumericError", "OracleError", "ShapeError", "__version__"]
