"""Annotation-free detection and segmentation labeling.

Test-time-augmentation fusion, confidence filtering, COCO-style evaluation
and teacher-student relabeling over serialized predictions.
"""

from .augment import (
    DEFAULT_AUGMENTATIONS,
    HFLIP,
    IDENTITY,
    VFLIP,
    AugmentationSet,
    AugmentationSpec,
    forward_box,
    forward_mask,
    inverse_box,
    inverse_mask,
    parse_spec,
    serialize_spec,
)
from .dataio import (
    DatasetManifest,
    ImageRecord,
    RleMask,
    load_coco,
    load_results,
    rle_decode,
    rle_encode,
    save_coco,
    save_results,
    split_dataset,
)
from .evaluation import EvalResult, average_precision, evaluate, match_greedy
from .fusion import FusedCluster, FusionConfig, confidence_filter, fuse, fuse_masks, nms, select_top1, soft_nms, wbf
from .geometry import BBox, BinaryMask, Instance, PredictionSet, box_iou, mask_iou, mask_to_bbox
from .pipeline import Pipeline, PipelineConfig, load_config

__version__ = "0.1.0"
