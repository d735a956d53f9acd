"""Compton scatter tomography on double circular arcs, with an unrolled wavelet network."""

from . import geometry, operator, simulate, solvers, transforms, unwavenet

__version__ = "0.1.0"

__all__ = ["geometry", "operator", "simulate", "solvers", "transforms", "unwavenet", "__version__"]
