"""manifold-forge: C1 reference metrics on multicube 3-manifolds."""

__version__ = "0.1.0"
