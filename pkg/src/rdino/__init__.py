"""Self-distilled speaker embeddings with diversity and redundancy regularizers."""

from .features import FeatureMatrix, Waveform, fbank, instance_normalize
from .model import EncoderConfig, HeadConfig, NetworkPair
from .objective import total_loss
from .trainer import TrainConfig, load_checkpoint, train

__all__ = [
    "EncoderConfig",
    "FeatureMatrix",
    "HeadConfig",
    "NetworkPair",
    "TrainConfig",
    "Waveform",
    "fbank",
    "instance_normalize",
    "load_checkpoint",
    "total_loss",
    "train",
]
__version__ = "0.1.0"
