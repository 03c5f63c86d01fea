"""pf3d: desk-scale progressive LiDAR-camera fusion for 3D detection.

A numpy/float64 library implementing the full stack: a minimal autodiff
tensor core, calibrated-sensor geometry (BEV<->PV mappings), tokenizers and
tiny encoders, windowed inter/intra-modality fusion, a DETR-style two-view
decoder with Hungarian matching, a three-objective masked-modeling
pre-training pipeline, a procedural scene generator, distance-threshold mAP
evaluation, and a training/ablation harness with a small CLI (``pf3d``).
"""

from .tensor import (
    Tensor,
    Parameter,
    ShapeError,
    ContractError,
    backward,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "ContractError",
    "backward",
    "__version__",
]
