"""Streaming online action detection: chunk tokens, a stream buffer, causal
short-term attention with an incremental cache, and compressed long-term memory."""

from .inference import Engine, StepOutput, make_engine
from .model import Model, ModelConfig, micro_config

__all__ = ["Engine", "Model", "ModelConfig", "StepOutput", "make_engine", "micro_config"]
__version__ = "0.1.0"
