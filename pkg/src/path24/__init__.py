"""Histopathology patch-to-scan classification with frozen pretrained backbones."""

__version__ = "0.1.0"

from .dataset import (
    DatasetManifest,
    PatchDataset,
    PatchRecord,
    PreprocessConfig,
    build_manifest,
    load_patch,
    read_manifest,
    replicate_channels,
    stratified_split,
    tile_wsi,
    to_grayscale,
    write_manifest,
)
from .evaluation import (
    EvalResult,
    PredictionSet,
    classification_report,
    confusion_matrix,
    evaluate_predictions,
    evaluate_test_set,
    patch_to_scan_accuracy,
    total_accuracy,
    whole_scan_accuracy,
)
from .model import (
    BackboneSpec,
    ClassifierModel,
    HeadConfig,
    build_classifier,
    forward,
    freeze_base,
    load_checkpoint,
    predict,
    register_backbone,
    save_checkpoint,
    trainable_parameter_count,
)
from .training import TrainConfig, TrainReport, cross_entropy, evaluate_split, train
