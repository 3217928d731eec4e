"""Layered generative scene model with depth-ordered alpha compositing."""
from .model import LayeredSceneModel, ModelConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["LayeredSceneModel", "ModelConfig", "TrainConfig", "__version__"]
