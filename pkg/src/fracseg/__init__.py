"""3D rib-fracture segmentation from CT volumes.

A CAM-gated 3D encoder-decoder with an auxiliary patch-level fracture
classifier, plus the full pipeline around it: patch sampling with HU
normalization, composite focal+dice+classification training objective with
epoch-decaying classification weight, sliding-window whole-volume inference,
connected-component postprocessing, and FROC/DSC evaluation.

Axis convention everywhere: arrays are indexed (W, H, D), W fastest on disk.
"""

from .volume_io import CtVolume, FractureMask, normalize_hu
from .network import CamUNet, CamUNetConfig
from .losses import LossConfig
from .training import TrainConfig, train
from .estimator import RibFractureSegmenter

__version__ = "0.1.0"

__all__ = [
    "CtVolume",
    "FractureMask",
    "normalize_hu",
    "CamUNet",
    "CamUNetConfig",
    "LossConfig",
    "TrainConfig",
    "train",
    "RibFractureSegmenter",
]
