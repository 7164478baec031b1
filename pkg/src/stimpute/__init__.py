"""Sparse-to-dense imputation of spatial transcriptomics gene grids."""

from .errors import (ConfigError, DegenerateInput, EmptyCorpus, EmptyInput, EmptyRegion,
                     GeneNotFound, InvalidCount, InvalidFactor, NumericalError, ShapeError,
                     StImputeError, VersionError)

__version__ = "0.1.0"
