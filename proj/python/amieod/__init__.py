"""Low-light object detection with routed enhancement experts.

The compiled core links the libtorch shipped with the ``torch`` package, so
torch is imported first to load those shared libraries.
"""

import torch  # noqa: F401

from ._core import (
    Annotation,
    BBox,
    ClassCounts,
    Config,
    CorruptCheckpoint,
    Detection,
    EvalResult,
    InvalidArgument,
    NumericalError,
    ParseError,
    average_precision,
    ciou,
    darken,
    dgrl_loss,
    evaluate,
    iou,
    match_detections,
    parse_yolo_labels,
    run_cli,
    select_best,
    shape_class_names,
    stage1_loss,
    synth_generate,
)

__all__ = [
    "Annotation",
    "BBox",
    "ClassCounts",
    "Config",
    "CorruptCheckpoint",
    "Detection",
    "EvalResult",
    "InvalidArgument",
    "NumericalError",
    "ParseError",
    "average_precision",
    "ciou",
    "darken",
    "dgrl_loss",
    "evaluate",
    "iou",
    "match_detections",
    "parse_yolo_labels",
    "run_cli",
    "select_best",
    "shape_class_names",
    "stage1_loss",
    "synth_generate",
]
