"""haccmini: desk-scale hybrid particle-mesh / tree cosmological N-body code.

A spectrally filtered particle-mesh long-range solver composed with an
RCB-tree (or cell-binned P3M) short-range solver, particle-overloading
domain decomposition, and sub-cycled symplectic time stepping. Every
approximation layer ships with a brute-force oracle.
"""

from .core import (
    Background,
    CosmologyParams,
    UnitSystem,
    drift_factor,
    growth_factor,
    growth_rate,
    hubble_rate,
    kick_factor,
    particle_mass,
)
from .particles import ParticleStore

__version__ = "0.1.0"

__all__ = [
    "Background",
    "CosmologyParams",
    "ParticleStore",
    "UnitSystem",
    "drift_factor",
    "growth_factor",
    "growth_rate",
    "hubble_rate",
    "kick_factor",
    "particle_mass",
    "__version__",
]
