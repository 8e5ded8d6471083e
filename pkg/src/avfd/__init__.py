"""Text-guided audio-visual forgery detection on numpy/scipy.

Real-only training of prompt tokens and audio-visual projections, per-frame
anomaly scoring with adaptive modality weights, ranking metrics, domain-shift
diagnostics and frame corruptions. Backbones are pluggable; seeded toy
encoders ship for experiments at desk scale.
"""
from .data import AudioRef, DatasetManifest, SampleRecord, load_manifest, save_manifest
from .encoders import FeatureBundle, Projections, RawFeatures, compute_mel_spectrogram, extract_features
from .errors import AVFDError, ConfigError, NonFinite, ParseError, ValidationError
from .evaluation import (
    aggregate_video_score, average_precision, diagnose, evaluate, mmd2, roc_auc, score_overlap,
)
from .fapl import PromptHierarchy, encode_polarity, facial_anomaly, ftca_loss
from .mmdwl import alignment_matrix, av_alignment_loss, frame_scores, generate_weights, modulate
from .perturbations import CorruptionSpec, apply_corruption, corrupt_dataset, parse_spec
from .training import Checkpoint, DetectorParams, Encoders, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AudioRef", "DatasetManifest", "SampleRecord", "load_manifest", "save_manifest",
    "FeatureBundle", "Projections", "RawFeatures", "compute_mel_spectrogram", "extract_features",
    "AVFDError", "ConfigError", "NonFinite", "ParseError", "ValidationError",
    "aggregate_video_score", "average_precision", "diagnose", "evaluate", "mmd2", "roc_auc", "score_overlap",
    "PromptHierarchy", "encode_polarity", "facial_anomaly", "ftca_loss",
    "alignment_matrix", "av_alignment_loss", "frame_scores", "generate_weights", "modulate",
    "CorruptionSpec", "apply_corruption", "corrupt_dataset", "parse_spec",
    "Checkpoint", "DetectorParams", "Encoders", "TrainConfig", "train",
]
