"""CAMO image captioning: a numpy autograd Transformer with multi-level encoder fusion."""

from .encoder import EncoderBundle, EncoderConfig, camo_forward
from .model import CaptionModel, ModelConfig
from .tensor import Tensor

__all__ = ["CaptionModel", "EncoderBundle", "EncoderConfig", "ModelConfig", "Tensor", "camo_forward"]
__version__ = "0.1.0"
