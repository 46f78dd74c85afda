"""Probabilistic neural circuits: layered tractable density models whose sum
weights are produced by masked convolutions over earlier partitions.

Submodules are imported on use so that ``pnc --threads`` can configure BLAS
before numpy loads.
"""

__version__ = "0.1.0"
