"""Two-stage organ segmentation in 3D CT: holistically-nested networks, multi-view
pooling, candidate-region localization and superpixel random-forest refinement."""

from .errors import (DegenerateTest, FormatError, InvalidArgument, InvalidTrainingSet, NoCandidate,
                     NumericFailure, SegError, UndefinedMetric)
from .volume import PLANES, BBox3, ViewPlane, Volume

__version__ = "0.1.0"

__all__ = [
    "BBox3", "DegenerateTest", "FormatError", "InvalidArgument", "InvalidTrainingSet", "NoCandidate",
    "NumericFailure", "PLANES", "SegError", "UndefinedMetric", "ViewPlane", "Volume",
]
