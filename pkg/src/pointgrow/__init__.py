"""pointgrow: sparse point annotations to dense superpixel pseudo-masks.

Pipeline: superpixel hierarchy -> point propagation -> weighted masked loss
-> toy segmentation training, plus a CLI and an interactive annotation
service.
"""

from .estimators import (
    HierarchicalSuperpixels,
    PointPropagator,
    SlicSuperpixels,
    ToySegmenter,
)
from .losses import ClassWeights, class_weights, masked_loss_backward, masked_loss_forward
from .metrics import confusion_matrix, miou_micro
from .raster import ClassMask, EdgeMap, RasterImage, read_image, read_mask, sobel_edges, write_image, write_mask
from .superpixels import (
    MergeHierarchy,
    SuperpixelConfig,
    SuperpixelMap,
    agglomerate,
    build_grid_graph,
    compute_hierarchy,
    extract_k,
)
from .synthetic import SyntheticSceneSpec, gen_synthetic_scene
from .weaklabel import PointAnnotation, PointSet, PropagationConfig, PseudoMask, coverage, propagate, sample_points_balanced, sample_points_random

__version__ = "0.1.0"

__all__ = [
    "ClassMask",
    "ClassWeights",
    "EdgeMap",
    "HierarchicalSuperpixels",
    "MergeHierarchy",
    "PointAnnotation",
    "PointPropagator",
    "PointSet",
    "PropagationConfig",
    "PseudoMask",
    "RasterImage",
    "SlicSuperpixels",
    "SuperpixelConfig",
    "SuperpixelMap",
    "SyntheticSceneSpec",
    "ToySegmenter",
    "agglomerate",
    "build_grid_graph",
    "class_weights",
    "compute_hierarchy",
    "confusion_matrix",
    "coverage",
    "extract_k",
    "gen_synthetic_scene",
    "masked_loss_backward",
    "masked_loss_forward",
    "miou_micro",
    "propagate",
    "read_image",
    "read_mask",
    "sample_points_balanced",
    "sample_points_random",
    "sobel_edges",
    "write_image",
    "write_mask",
]
