"""View/modality-tagged feature grids passed between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor

VIEW_BEV = "bev"
VIEW_PV = "pv"

MODALITY_LIDAR = "lidar"
MODALITY_CAMERA = "camera"
MODALITY_FUSED = "fused"


@dataclass
class FeatureMap:
    """A 2-D feature grid: ``data`` is a [C, H, W] Tensor.

    ``view`` is "bev" or "pv"; ``modality`` records which sensor(s) produced
    it; ``stride`` is input units per cell (image pixels for PV maps, grid
    cells -- i.e. 1 -- for BEV maps).
    """

    data: Tensor
    view: str
    modality: str
    stride: int = 1

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]
