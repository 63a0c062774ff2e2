"""Volumetric part segmentation with spatially dense dilated 3D CNNs.

Numpy throughout; the convolution, pooling and voting kernels also have numba
versions, chosen with ``VOXSEG_NUMBA`` (default on) or
:func:`voxsegnet._accel.set_backend`.
"""

from ._accel import backend, set_backend
from .dilation import receptive_field, support_coverage, validate_schedule
from .metrics import aggregate, precision_recall, shape_iou
from .models import ArchitectureSpec, build_model, export_activations, forward_segment
from .tensor import Tensor, finite_difference_check, no_grad
from .trainer import TrainConfig, adam_step, load_checkpoint, save_checkpoint, train
from .voxel import LabeledPointCloud, VoxelGrid, normalize_cloud, voxelize

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "LabeledPointCloud", "Tensor", "TrainConfig", "VoxelGrid",
    "adam_step", "aggregate", "backend", "build_model", "export_activations",
    "finite_difference_check", "forward_segment", "load_checkpoint", "no_grad",
    "normalize_cloud", "precision_recall", "receptive_field", "save_checkpoint",
    "set_backend", "shape_iou", "support_coverage", "train", "validate_schedule", "voxelize",
]
