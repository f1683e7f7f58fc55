"""Large-scale generalized least-squares solvers for genome-wide
association studies: a structure-exploiting in-core kernel, an
out-of-core double-buffered streaming engine, and a distributed-memory
engine over a rank/transport abstraction."""

from . import datagen, distgrid, fileio, kernel, pipeline, transport
from .errors import GwasGlsError

__all__ = ["datagen", "distgrid", "fileio", "kernel", "pipeline",
           "transport", "GwasGlsError"]
__version__ = "0.1.0"
