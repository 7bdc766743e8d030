"""Pseudospectral stochastic vorticity dynamics on the 2pi-torus and small-noise large deviations."""

from .torus import RealField, SpectralField, TorusGrid, to_real, to_spectral

__version__ = "0.1.0"

__all__ = ["RealField", "SpectralField", "TorusGrid", "to_real", "to_spectral", "__version__"]
