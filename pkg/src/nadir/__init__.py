"""Non-autoregressive character transliteration with differential attention and MoE."""

from .model import ModelConfig, Nadir, build_model, nar_generate, ar_generate, paper_preset, tiny_preset
from .tokenizer import ConfigError, LengthExceeded, Vocab
from .objective import DataError
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "LengthExceeded", "ModelConfig", "Nadir", "TrainConfig", "Vocab",
    "ar_generate", "build_model", "nar_generate", "paper_preset", "tiny_preset", "train",
]
