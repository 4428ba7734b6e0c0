"""hatbench: zero-shot hardhat compliance detection benchmark.

Dataset-construction protocol over PASCAL-VOC sources, three text-prompted
detection strategies (direct, nested, cascaded) behind a pluggable detector
backend, and a precision/recall/AP evaluation harness with a threshold sweep.
"""

from .geometry import BBox, ImageDims, clamp, crop_to_original, iou, original_to_crop
from .dataset import (
    AnnotatedImage,
    ClassLabel,
    DatasetManifest,
    ObjectInstance,
    RemapMode,
    Source,
    SourceClass,
    build_manifest,
    parse_voc_xml,
    read_manifest,
    write_manifest,
)
from .backends import (
    Detection,
    DetectionQuery,
    FixtureBackend,
    OracleBackend,
    OracleConfig,
    RemoteBackend,
    ScoreModel,
)
from .pipelines import (
    AssociationRecord,
    PipelineConfig,
    Prediction,
    StageThresholds,
    Strategy,
    run_cascaded,
    run_direct,
    run_nested,
    run_strategy,
)
from .metrics import EvalReport, PRPoint, average_precision, ground_truth_view, match, sweep

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage",
    "AssociationRecord",
    "BBox",
    "ClassLabel",
    "DatasetManifest",
    "Detection",
    "DetectionQuery",
    "EvalReport",
    "FixtureBackend",
    "ImageDims",
    "ObjectInstance",
    "OracleBackend",
    "OracleConfig",
    "PipelineConfig",
    "PRPoint",
    "Prediction",
    "RemapMode",
    "RemoteBackend",
    "ScoreModel",
    "Source",
    "SourceClass",
    "StageThresholds",
    "Strategy",
    "average_precision",
    "build_manifest",
    "clamp",
    "crop_to_original",
    "ground_truth_view",
    "iou",
    "match",
    "original_to_crop",
    "parse_voc_xml",
    "read_manifest",
    "run_cascaded",
    "run_direct",
    "run_nested",
    "run_strategy",
    "sweep",
    "write_manifest",
]
