"""Prompt-conditioned change detection on bi-temporal image pairs,
built on a self-contained numpy autodiff engine."""

from .adapters import Adapter, AdapterStack
from .data import (
    BiTemporalPair,
    Dataset,
    ObjectEvent,
    SceneSpec,
    augment,
    generate_dataset,
    generate_scene,
    read_dataset,
    sample_scene_spec,
    write_dataset,
)
from .encoders import (
    FeaturePyramid,
    ImagePyramidEncoder,
    TextEmbedding,
    TextEncoder,
    Vocabulary,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DecoderError,
    GenerationError,
    NumericsError,
    PromptCDError,
    ShapeError,
    TemporalPairError,
    UsageError,
    VocabularyError,
)
from .losses import LossConfig, bce, dice_loss, iou_loss, total_loss
from .metrics import ConfusionCounts, confusion, metrics, write_metrics_csv
from .model import ChangeDetector, predict, predict_sliding
from .optim import Adam
from .tensor import Tensor, backward, no_grad, use_dtype
from .tfam import TextFusion
from .training import RunConfig, TrainLog, evaluate, run_train
from .vsfd import PredictionSet, VisionSemanticDecoder

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Adam", "Adapter", "AdapterStack", "BiTemporalPair", "ChangeDetector",
    "CheckpointError", "ConfigError", "ConfusionCounts", "Dataset",
    "DatasetError", "DecoderError", "FeaturePyramid", "GenerationError",
    "ImagePyramidEncoder", "LossConfig", "NumericsError", "ObjectEvent",
    "PredictionSet", "PromptCDError", "RunConfig", "SceneSpec", "ShapeError",
    "TemporalPairError", "Tensor", "TextEmbedding", "TextEncoder",
    "TextFusion", "TrainLog", "UsageError", "VisionSemanticDecoder",
    "Vocabulary", "VocabularyError", "augment", "backward", "bce",
    "confusion", "dice_loss", "evaluate", "generate_dataset",
    "generate_scene", "iou_loss", "load_checkpoint", "metrics", "no_grad",
    "predict", "predict_sliding", "read_checkpoint", "read_dataset",
    "run_train", "sample_scene_spec", "save_checkpoint", "total_loss",
    "use_dtype", "write_dataset", "write_metrics_csv",
]
