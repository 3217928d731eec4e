"""Parameter initialisation and the forward passes of every network.

Parameters live in one flat ``name -> Tensor`` dict. Each network owns a
name prefix; the first five are fitted in stage 1, the last three in stage 2.
"""
from __future__ import annotations

import numpy as np

from ..autodiff import (Tensor, concat, conv2d, conv_transpose2d, elu, matmul, sigmoid,
                        upsample2d)
from .config import ModelConfig

STAGE1_PREFIXES = ("enc_pos", "enc_obj", "enc_bg", "dec_obj", "dec_bg")
STAGE2_PREFIXES = ("enc_scene", "prior_pos", "prior_obj")

Params = dict[str, Tensor]


class MissingParameterError(KeyError):
    pass


def stage_of(name: str) -> int:
    prefix = name.split(".", 1)[0]
    if prefix in STAGE1_PREFIXES:
        return 1
    if prefix in STAGE2_PREFIXES:
        return 2
    raise ValueError(f"unknown parameter prefix in {name!r}")


def _get(params: Params, name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise MissingParameterError(name) from None


# ------------------------------------------------------------------ layers
class _Init:
    """Glorot-uniform weights and zero biases drawn from one generator."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng, self.dtype, self.params = rng, dtype, {}

    def _uniform(self, shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.rng.uniform(-limit, limit, size=shape).astype(self.dtype)

    def dense(self, name, n_in, n_out):
        self.params[name + ".w"] = self._uniform((n_in, n_out), n_in, n_out)
        self.params[name + ".b"] = np.zeros(n_out, dtype=self.dtype)

    def conv(self, name, c_in, c_out, k):
        self.params[name + ".w"] = self._uniform((c_out, c_in, k, k), c_in * k * k, c_out * k * k)
        self.params[name + ".b"] = np.zeros(c_out, dtype=self.dtype)

    def conv_t(self, name, c_in, c_out, k):
        self.params[name + ".w"] = self._uniform((c_in, c_out, k, k), c_in * k * k, c_out * k * k)
        self.params[name + ".b"] = np.zeros(c_out, dtype=self.dtype)


def dense(params: Params, name: str, x: Tensor) -> Tensor:
    return matmul(x, _get(params, name + ".w")) + _get(params, name + ".b")


def conv(params: Params, name: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    return conv2d(x, _get(params, name + ".w"), _get(params, name + ".b"), stride, padding)


def conv_t(params: Params, name: str, x: Tensor) -> Tensor:
    # kernel 4, stride 2, padding 1 doubles the spatial size
    return conv_transpose2d(x, _get(params, name + ".w"), _get(params, name + ".b"), 2, 1)


def _flatten(x: Tensor) -> Tensor:
    return x.reshape((x.shape[0], -1))


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Fresh parameters for all eight networks, deterministic in ``seed``."""
    c = config
    init = _Init(np.random.default_rng([seed, 7]), dtype)
    u1, u2, u3 = c.unet_channels
    init.conv("enc_pos.down1", 3, u1, 3)
    init.conv("enc_pos.down2", u1, u2, 3)
    init.conv("enc_pos.down3", u2, u3, 3)
    init.conv("enc_pos.up2", u3 + u2, u2, 3)
    init.conv("enc_pos.up1", u2 + u1, u1, 3)
    init.conv("enc_pos.head", u1, c.J, 1)

    e1, e2 = c.obj_enc_channels
    side = c.M if c.attention_crop else c.N
    init.conv("enc_obj.conv1", 3 if c.attention_crop else 4, e1, 3)
    init.conv("enc_obj.conv2", e1, e2, 3)
    init.dense("enc_obj.fc", e2 * (side // 4) ** 2, c.hidden)
    init.dense("enc_obj.out", c.hidden, 2 * c.obj_latent)

    b1, b2 = c.bg_channels
    init.conv("enc_bg.conv1", 3, b1, 3)
    init.conv("enc_bg.conv2", b1, b2, 3)
    init.dense("enc_bg.fc", b2 * (c.N // 4) ** 2, c.hidden)
    init.dense("enc_bg.out", c.hidden, 2 * c.D_bg)

    d1, d2 = c.obj_dec_channels
    init.dense("dec_obj.fc", c.D_obj, c.hidden)
    init.dense("dec_obj.grid", c.hidden, d1 * (c.M // 4) ** 2)
    init.conv_t("dec_obj.up1", d1, d2, 4)
    init.conv_t("dec_obj.up2", d2, 4, 4)

    init.dense("dec_bg.fc", c.D_bg, c.hidden)
    init.dense("dec_bg.grid", c.hidden, b2 * (c.N // 4) ** 2)
    init.conv_t("dec_bg.up1", b2, b1, 4)
    init.conv_t("dec_bg.up2", b1, 3, 4)

    init.dense("enc_scene.fc", c.J * (c.obj_latent + 2), c.hidden)
    init.dense("enc_scene.out", c.hidden, 2 * c.D_scene)

    p1, p2 = c.prior_pos_channels
    init.dense("prior_pos.fc", c.pos_dims, c.hidden)
    init.dense("prior_pos.grid", c.hidden, p1 * (c.N // 4) ** 2)
    init.conv_t("prior_pos.up1", p1, p2, 4)
    init.conv_t("prior_pos.up2", p2, c.J, 4)

    init.dense("prior_obj.fc", c.D_scene - c.pos_dims + 4, c.hidden)
    init.dense("prior_obj.out", c.hidden, 2 * c.obj_latent)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in init.params.items()}


# ---------------------------------------------------------------- networks
def encode_positions(params: Params, x: Tensor, config: ModelConfig) -> Tensor:
    """Small U-Net: images ``[B,3,N,N]`` to per-slot position logits ``[B,J,N,N]``."""
    e1 = elu(conv(params, "enc_pos.down1", x))
    e2 = elu(conv(params, "enc_pos.down2", e1, stride=2))
    e3 = elu(conv(params, "enc_pos.down3", e2, stride=2))
    u2 = elu(conv(params, "enc_pos.up2", concat([upsample2d(e3), e2], axis=1)))
    u1 = elu(conv(params, "enc_pos.up1", concat([upsample2d(u2), e1], axis=1)))
    return conv(params, "enc_pos.head", u1, padding=0)


def encode_object(params: Params, inputs: Tensor, config: ModelConfig) -> Tensor:
    """Per-object posterior parameters ``[K, 2 (D_obj + 1)]``.

    ``inputs`` is ``[K, 3, M, M]`` attention crops, or ``[K, 4, N, N]`` image
    plus position-map channel when attention is off.
    """
    h = elu(conv(params, "enc_obj.conv1", inputs, stride=2))
    h = elu(conv(params, "enc_obj.conv2", h, stride=2))
    h = elu(dense(params, "enc_obj.fc", _flatten(h)))
    return dense(params, "enc_obj.out", h)


def encode_background(params: Params, x: Tensor, config: ModelConfig) -> Tensor:
    h = elu(conv(params, "enc_bg.conv1", x, stride=2))
    h = elu(conv(params, "enc_bg.conv2", h, stride=2))
    h = elu(dense(params, "enc_bg.fc", _flatten(h)))
    return dense(params, "enc_bg.out", h)


def _grid_decoder(params: Params, prefix: str, z: Tensor, side: int) -> Tensor:
    h = elu(dense(params, prefix + ".fc", z))
    h = elu(dense(params, prefix + ".grid", h))
    q = side // 4
    h = h.reshape((z.shape[0], -1, q, q))
    h = elu(conv_t(params, prefix + ".up1", h))
    return conv_t(params, prefix + ".up2", h)


def decode_object(params: Params, z: Tensor, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Shared object decoder: ``z [K, D_obj]`` to pixels ``[K,3,M,M]`` and alpha ``[K,M,M]``."""
    out = sigmoid(_grid_decoder(params, "dec_obj", z, config.M))
    return out[:, :3], out[:, 3]


def decode_background(params: Params, z_bg: Tensor, config: ModelConfig) -> Tensor:
    return sigmoid(_grid_decoder(params, "dec_bg", z_bg, config.N))


def encode_scene(params: Params, summary: Tensor, config: ModelConfig) -> Tensor:
    """Scene posterior parameters ``[B, 2 D_scene]`` from per-object summaries ``[B, J, D_obj + 3]``."""
    h = elu(dense(params, "enc_scene.fc", _flatten(summary)))
    return dense(params, "enc_scene.out", h)


def position_prior(params: Params, y: Tensor, config: ModelConfig) -> Tensor:
    """Position logits ``[B, J, N, N]``; reads only ``y[:, :pos_dims]``."""
    return _grid_decoder(params, "prior_pos", y[:, :config.pos_dims], config.N)


def object_prior(params: Params, y: Tensor, coords: Tensor, config: ModelConfig) -> Tensor:
    """Prior parameters ``[B, J, 2 (D_obj + 1)]`` over each slot's appearance and depth logit.

    Reads ``y[:, pos_dims:]`` and slot coordinates ``[B, J, 2]``. The same
    network serves every slot, fed its own coordinates and the slot mean, so
    permuting slots permutes the outputs.
    """
    B, J = coords.shape[:2]
    rest = y[:, config.pos_dims:]
    centre = coords.mean(axis=1, keepdims=True)
    rest_b = rest.reshape((B, 1, -1)) + Tensor(np.zeros((1, J, 1), dtype=rest.dtype))
    centre_b = centre + Tensor(np.zeros((1, J, 1), dtype=rest.dtype))
    inp = concat([rest_b, coords, centre_b], axis=2).reshape((B * J, -1))
    h = elu(dense(params, "prior_obj.fc", inp))
    return dense(params, "prior_obj.out", h).reshape((B, J, -1))


__all__ = [
    "MissingParameterError", "Params", "STAGE1_PREFIXES", "STAGE2_PREFIXES", "decode_background",
    "decode_object", "encode_background", "encode_object", "encode_positions", "encode_scene",
    "init_params", "object_prior", "position_prior", "stage_of",
]
