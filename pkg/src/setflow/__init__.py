"""Generative modelling of unordered point sets through function-valued flow matching.

Point sets are encoded as Gaussian mixtures, rasterised to grids, modelled
with a flow-matching field on those grids, and decoded back to sets with a
particle search.
"""

from .errors import ConfigError, NumericError, ParseError, SetflowError

__version__ = "0.1.0"

__all__ = ["ConfigError", "NumericError", "ParseError", "SetflowError", "__version__"]
