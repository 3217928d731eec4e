"""Model and training configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    pass


def _from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**kwargs)


@dataclass(frozen=True)
class ModelConfig:
    """Sizes, architecture widths and objective weights.

    ``N`` is the image side, ``M`` the object canvas side and ``J`` the number
    of object slots. ``pos_dims`` leading entries of the scene latent feed the
    position prior; the rest feed the object prior.
    """

    N: int = 32
    M: int = 16
    J: int = 2
    D_scene: int = 16
    D_obj: int = 8
    D_bg: int = 4
    pos_dims: int = 8
    unet_channels: tuple = (8, 16, 16)
    obj_enc_channels: tuple = (16, 32)
    obj_dec_channels: tuple = (32, 16)
    bg_channels: tuple = (8, 8)
    prior_pos_channels: tuple = (16, 8)
    hidden: int = 64
    attention_crop: bool = True
    hyperprior: bool = True
    tau_depth: float = 0.1
    beta_obj: float = 1.0
    beta_bg: float = 1.0
    kl_y_weight: float = 0.01
    lambda_pos: float = 1.0
    lambda_alpha: float = 0.0

    def __post_init__(self):
        if self.J < 1:
            raise ConfigError("J must be >= 1")
        if not 1 <= self.M <= self.N:
            raise ConfigError("need 1 <= M <= N")
        if self.N % 4 or self.M % 4:
            raise ConfigError("N and M must be multiples of 4")
        if min(self.D_scene, self.D_obj, self.D_bg) < 1:
            raise ConfigError("latent sizes must be >= 1")
        if not 1 <= self.pos_dims < self.D_scene:
            raise ConfigError("pos_dims must lie in [1, D_scene - 1]")
        if len(self.unet_channels) != 3:
            raise ConfigError("unet_channels needs three widths")
        for name in ("obj_enc_channels", "obj_dec_channels", "bg_channels", "prior_pos_channels"):
            if len(getattr(self, name)) != 2:
                raise ConfigError(f"{name} needs two widths")
        if not self.tau_depth > 0:
            raise ConfigError("tau_depth must be positive")

    @property
    def obj_latent(self) -> int:
        """Appearance dims plus one depth logit."""
        return self.D_obj + 1

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 200
    batch_size: int = 100
    lr: float = 5e-4
    seed: int = 0
    checkpoint_every: int = 500
    val_every: int = 100
    val_size: int = 32

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.batch_size < 1 or self.val_size < 1:
            raise ConfigError("batch_size and val_size must be >= 1")
        if self.checkpoint_every < 1 or self.val_every < 1:
            raise ConfigError("checkpoint_every and val_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _from_dict(cls, data)


def polygons_config(**overrides) -> ModelConfig:
    return ModelConfig(**{"N": 64, "M": 32, "J": 2, **overrides})


def two_squares_config(**overrides) -> ModelConfig:
    return ModelConfig(**{"N": 32, "M": 16, "J": 2, **overrides})


def tiny_config(**overrides) -> ModelConfig:
    """Smallest useful setting, for gradient checks."""
    base = dict(N=16, M=8, J=2, D_scene=4, D_obj=3, D_bg=2, pos_dims=2, unet_channels=(2, 3, 3),
                obj_enc_channels=(2, 3), obj_dec_channels=(3, 2), bg_channels=(2, 2),
                prior_pos_channels=(2, 2), hidden=6)
    return ModelConfig(**{**base, **overrides})
