"""Explainable seizure detection from EEG connectivity features.

Pipeline: multichannel EEG -> rhythm-band decomposition -> per-sub-window
MVAR and phase connectivity measures -> (7, T, C, C, B) window tensors ->
fusion classifier -> per-feature relevance percentages.
"""

from .connectivity import (
    FEATURE_ORDER,
    NormStats,
    PipelineConfig,
    WindowTensor,
    build_feature_tensor,
    normalize_features,
)
from .dataset import read_dataset, write_dataset
from .dsp import BROADBAND, DEFAULT_BANDS, BandSpec
from .model import (
    Metrics,
    ModelConfig,
    TrainConfig,
    build_fusion_model,
    evaluate,
    load_model,
    save_model,
    train,
)
from .mvar import MvarModel, fit_mvar, select_order, spectral_decomposition
from .relevance import RelevanceReport, relevance_report
from .signal_io import (
    AnnotationSet,
    LabeledWindow,
    Recording,
    SynthSpec,
    extract_labeled_windows,
    generate_synthetic,
    load_annotations,
    load_recording,
    train_test_split,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "FEATURE_ORDER",
    "BandSpec",
    "DEFAULT_BANDS",
    "BROADBAND",
    "MvarModel",
    "fit_mvar",
    "select_order",
    "spectral_decomposition",
    "PipelineConfig",
    "WindowTensor",
    "NormStats",
    "build_feature_tensor",
    "normalize_features",
    "Recording",
    "AnnotationSet",
    "LabeledWindow",
    "SynthSpec",
    "load_recording",
    "load_annotations",
    "extract_labeled_windows",
    "generate_synthetic",
    "train_test_split",
    "ModelConfig",
    "TrainConfig",
    "Metrics",
    "build_fusion_model",
    "train",
    "evaluate",
    "save_model",
    "load_model",
    "RelevanceReport",
    "relevance_report",
    "read_dataset",
    "write_dataset",
]
