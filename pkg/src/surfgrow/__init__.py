"""surfgrow: longitudinal surface growth prediction with mesh GCNNs."""

__version__ = "0.1.0"

from .mesh import (  # noqa: F401
    TriangleMesh,
    SurfacePair,
    LongitudinalSample,
    load_mesh,
    save_mesh,
    icosphere,
)
