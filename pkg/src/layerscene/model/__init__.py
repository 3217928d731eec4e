"""The layered scene model: networks, objectives, training and inference."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, TrainConfig, polygons_config, tiny_config, two_squares_config
from .core import (Decomposition, ElboBreakdown, Generation, INTERPOLATION_MODES, Noise,
                   NumericalError, Rendering, SceneLatents, Stage2Breakdown, decompose, elbo,
                   generate, interpolate, posterior_modes, render_latents, sample_latents,
                   stage2_loss)
from .estimator import LayeredSceneModel
from .networks import (MissingParameterError, decode_background, decode_object, encode_background,
                       encode_object, encode_positions, encode_scene, init_params, object_prior,
                       position_prior)
from .training import train_stage1, train_stage2

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "Decomposition", "ElboBreakdown", "Generation",
    "INTERPOLATION_MODES", "LayeredSceneModel", "MissingParameterError", "ModelConfig", "Noise",
    "NumericalError", "Rendering", "SceneLatents", "Stage2Breakdown", "TrainConfig",
    "decode_background", "decode_object", "decompose", "elbo", "encode_background",
    "encode_object", "encode_positions", "encode_scene", "generate", "init_params",
    "interpolate", "load_checkpoint", "object_prior", "polygons_config", "position_prior",
    "posterior_modes", "render_latents", "sample_latents", "save_checkpoint", "stage2_loss",
    "tiny_config", "train_stage1", "train_stage2", "two_squares_config",
]
