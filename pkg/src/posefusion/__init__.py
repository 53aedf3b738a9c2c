"""Multi-modal in-hand 6D object pose estimation.

Three candidate estimators (tactile graph network, RGB-D crop backbone,
feature-level fusion) arbitrated per frame by a recurrent selection
network, with a synthetic data engine and a corruption-robustness
evaluation harness.
"""

from .geometry import (
    ModelPointCloud,
    Pose,
    Quaternion,
    add_distance,
    angular_error,
    positional_error,
    quat_to_rotation,
)

__version__ = "0.1.0"

__all__ = [
    "ModelPointCloud",
    "Pose",
    "Quaternion",
    "add_distance",
    "angular_error",
    "positional_error",
    "quat_to_rotation",
    "__version__",
]
