"""Semi-supervised teacher-student vessel segmentation for angiography-like video."""

from .core import (BinaryMask, FlowDirection, FlowField, ImageFrame, LossWeights, PredictionMap, Source,
                   VideoClip, default_loss_weights, seeded_rng)

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "FlowDirection", "FlowField", "ImageFrame", "LossWeights", "PredictionMap", "Source",
    "VideoClip", "default_loss_weights", "seeded_rng",
]
