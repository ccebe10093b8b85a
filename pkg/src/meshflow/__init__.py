"""Diffeomorphic template-mesh deformation toolkit.

Deforms labeled template surface meshes toward target geometry in two
stages: a global 9-parameter linear transform, then integration of the
mesh vertices along an optimized stationary flow field whose magnitude is
clipped to roughly one voxel per step. A kinematic volume regularizer
(the ratio of advected infinitesimal volumes, computed from the
divergence integral along each vertex trajectory) prevents thin walls
from collapsing onto each other. Results are audited with
self-intersection detection and segmentation-overlap metrics.
"""

from .mesh import TriangleMesh, LinearTransform
from .fields import VectorField, ScalarField
from .integrate import IntegrationConfig, DeformationTrace
from .losses import LossWeights, LossReport
from .fit import FitConfig, FitResult
from .quality import SifReport, SegmentationMetrics

__version__ = "0.1.0"

__all__ = [
    "TriangleMesh",
    "LinearTransform",
    "VectorField",
    "ScalarField",
    "IntegrationConfig",
    "DeformationTrace",
    "LossWeights",
    "LossReport",
    "FitConfig",
    "FitResult",
    "SifReport",
    "SegmentationMetrics",
    "__version__",
]
