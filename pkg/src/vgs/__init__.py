"""Visually grounded speech: speech/image embedding, attention forensics and pivot retrieval."""

from .model import ModelConfig, batch_loss, distance, encode_image, encode_utterance
from .numcore import Parameter, ParamSet, grad_check

__all__ = ["ModelConfig", "Parameter", "ParamSet", "batch_loss", "distance", "encode_image",
           "encode_utterance", "grad_check"]
__version__ = "0.1.0"
