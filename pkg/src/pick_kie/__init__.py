"""Key information extraction for visually rich documents.

Segments of a document (text, bounding box, image crop) are encoded with a
character-level transformer and a small convolutional stack, related to each
other through a learned soft adjacency matrix and edge-conditioned graph
convolution, and tagged character by character with a BiLSTM-CRF decoder.
"""

from .autodiff import ParamStore, Value, backward, zero_grads
from .config import ConfigError, ModelConfig
from .data import (
    BBox,
    DataError,
    Document,
    EntitySpan,
    MetricsReport,
    Segment,
    SynthConfig,
    compute_metrics,
    decode_iob,
    generate_synthetic,
    load_document,
    save_document,
    to_iob,
)
from .model import (
    Checkpoint,
    NumericsError,
    evaluate,
    forward,
    gradcheck,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    total_loss,
    train,
)

__all__ = [
    "BBox",
    "Checkpoint",
    "ConfigError",
    "DataError",
    "Document",
    "EntitySpan",
    "MetricsReport",
    "ModelConfig",
    "NumericsError",
    "ParamStore",
    "Segment",
    "SynthConfig",
    "Value",
    "backward",
    "compute_metrics",
    "decode_iob",
    "evaluate",
    "forward",
    "generate_synthetic",
    "gradcheck",
    "init_params",
    "load_checkpoint",
    "load_document",
    "predict",
    "save_checkpoint",
    "save_document",
    "to_iob",
    "total_loss",
    "train",
    "zero_grads",
]

__version__ = "0.1.0"
