"""Object-placement leakage from visual localization services, simulated.

An attacker holding local 3D models of everyday objects queries a
localization server with pose surrogates of object photos, aligns the
returned scene-frame poses with the local ones, and decides from the inlier
ratio whether each object is in the scene and where.
"""

from .alignment import (
    AlignmentParams,
    AlignmentResult,
    PoseSet,
    best_single_camera_alignment,
    exhaustive_oracle_alignment,
    ransac_sim3_alignment,
)
from .geometry import NoiseSpec, Pose, SimTransform, apply_transform, compose, perturb

__version__ = "0.1.0"

__all__ = [
    "AlignmentParams",
    "AlignmentResult",
    "PoseSet",
    "best_single_camera_alignment",
    "exhaustive_oracle_alignment",
    "ransac_sim3_alignment",
    "NoiseSpec",
    "Pose",
    "SimTransform",
    "apply_transform",
    "compose",
    "perturb",
    "__version__",
]
