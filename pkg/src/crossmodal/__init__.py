"""Cross-modal transformer: masked multimodal pre-training and emotion fine-tuning."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainParams

__all__ = ["ModelConfig", "TrainParams", "__version__"]
