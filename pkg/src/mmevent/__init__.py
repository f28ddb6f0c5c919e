"""Multimodal disaster-event classification: fusion heads, training, prompting and robustness tools."""
from .core import LABELS, DatasetManifest, EventLabel, Instance, load_manifest
from .encoders import Embedding, EncoderSpec, encode_image, encode_text
from .evaluation import MetricsReport, emit_report, score
from .fusion import HEADS, FusionConfig, FusionParams, init_params, load_checkpoint, save_checkpoint
from .perturb import PerturbationSpec, denoise_reference, perturb
from .training import TrainConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "LABELS", "DatasetManifest", "EventLabel", "Instance", "load_manifest",
    "Embedding", "EncoderSpec", "encode_image", "encode_text",
    "MetricsReport", "emit_report", "score",
    "HEADS", "FusionConfig", "FusionParams", "init_params", "load_checkpoint", "save_checkpoint",
    "PerturbationSpec", "denoise_reference", "perturb",
    "TrainConfig", "TrainReport", "train", "__version__",
]
