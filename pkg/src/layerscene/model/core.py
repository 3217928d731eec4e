"""Objectives and inference: the ELBO, the hyperprior fitting loss, ancestral
generation, decomposition into layers, and latent interpolation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor, concat, no_grad, sigmoid
from ..compositor import (ObjectCanvas, attention_crop, composite_hard, composite_soft,
                          modal_segmentation, place)
from ..stochastic import (DiagGaussian, PositionDistribution, aggregated_position_l1,
                          alpha_entropy_regularizer, categorical_cross_entropy,
                          gaussian_log_likelihood, gaussian_nll, gumbel_noise, gumbel_temperature,
                          hard_position, kl_gaussian, kl_gaussian_std, sample_gaussian,
                          sample_position, sigma_schedule, spatial_softmax)
from .config import ModelConfig
from .networks import (Params, decode_background, decode_object, encode_background,
                       encode_object, encode_positions, encode_scene, object_prior,
                       position_prior)

INTERPOLATION_MODES = ("positions", "appearance", "joint")


class NumericalError(FloatingPointError):
    """A non-finite objective term; ``diagnostics`` names the offending parts."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


# ------------------------------------------------------------------- types
@dataclass
class SceneLatents:
    """Latents of a batch of scenes (leading axis ``B``).

    ``theta`` holds position maps ``[B, J, N, N]``; ``depth_logit`` is
    ``[B, J]`` and the depth itself is its sigmoid.
    """

    z: np.ndarray
    theta: np.ndarray
    depth_logit: np.ndarray
    z_bg: np.ndarray
    y: np.ndarray | None = None

    @property
    def depths(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.depth_logit))

    @property
    def positions(self) -> np.ndarray:
        """Integer ``(row, col)`` of each map's argmax, ``[B, J, 2]``."""
        N = self.theta.shape[-1]
        flat = self.theta.reshape(self.theta.shape[:-2] + (-1,)).argmax(axis=-1)
        return np.stack([flat // N, flat % N], axis=-1)

    def __getitem__(self, idx) -> "SceneLatents":
        return SceneLatents(self.z[idx], self.theta[idx], self.depth_logit[idx], self.z_bg[idx],
                            None if self.y is None else self.y[idx])


@dataclass
class ElboBreakdown:
    """Batch-mean ELBO terms.

    ``total = recon_loglik - beta_obj kl_obj - beta_bg kl_z_bg - w_y kl_y
    - lambda_pos l1_position - lambda_alpha alpha_reg``.
    """

    recon_loglik: float
    kl_y: float
    kl_z_bg: float
    kl_obj: float
    l1_position: float
    alpha_reg: float
    total: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    FIELDS = ("recon_loglik", "kl_y", "kl_z_bg", "kl_obj", "l1_position", "alpha_reg", "total")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class Stage2Breakdown:
    """Hyperprior fitting loss: ``total = position_ce + object_nll + w_y kl_y`` (batch means)."""

    position_ce: float
    object_nll: float
    kl_y: float
    total: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    FIELDS = ("position_ce", "object_nll", "kl_y", "total")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class Noise:
    """Injected randomness for one batch."""

    pos: np.ndarray  # Gumbel [B, J, N, N]
    obj: np.ndarray  # standard normal [B, J, D_obj + 1]
    bg: np.ndarray  # [B, D_bg]
    scene: np.ndarray  # [B, D_scene]

    @classmethod
    def draw(cls, rng: np.random.Generator, config: ModelConfig, batch: int,
             dtype=np.float32) -> "Noise":
        c = config
        return cls(gumbel_noise(rng, (batch, c.J, c.N, c.N), dtype),
                   rng.standard_normal((batch, c.J, c.obj_latent)).astype(dtype),
                   rng.standard_normal((batch, c.D_bg)).astype(dtype),
                   rng.standard_normal((batch, c.D_scene)).astype(dtype))

    @classmethod
    def zeros(cls, config: ModelConfig, batch: int, dtype=np.float32) -> "Noise":
        c = config
        return cls(np.zeros((batch, c.J, c.N, c.N), dtype), np.zeros((batch, c.J, c.obj_latent), dtype),
                   np.zeros((batch, c.D_bg), dtype), np.zeros((batch, c.D_scene), dtype))


# ----------------------------------------------------------------- helpers
def _param_dtype(params: Params):
    return next(iter(params.values())).dtype


def _as_batch(x, dtype) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    return x


def coordinate_grid(N: int, dtype=np.float64) -> np.ndarray:
    """``[N*N, 2]`` pixel-centre (row, col) coordinates scaled to ``[-1, 1]``."""
    c = (np.arange(N) + 0.5) / N * 2 - 1
    rows, cols = np.meshgrid(c, c, indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(dtype)


def expected_coords(weights: Tensor) -> Tensor:
    """Mean (row, col) of position maps ``[B, J, N, N]`` as ``[B, J, 2]`` in ``[-1, 1]``."""
    B, J, N, _ = weights.shape
    grid = Tensor(coordinate_grid(N, weights.dtype))
    return (weights.reshape((B * J, N * N)) @ grid).reshape((B, J, 2))


def one_hot_maps(positions: np.ndarray, N: int, dtype=np.float32) -> np.ndarray:
    """Position maps ``[..., N, N]`` with a single 1 at each integer ``(row, col)``."""
    positions = np.asarray(positions, dtype=np.int64)
    if np.any(positions < 0) or np.any(positions >= N):
        raise ValueError(f"positions must lie in [0, {N})")
    out = np.zeros(positions.shape[:-1] + (N * N,), dtype=dtype)
    np.put_along_axis(out, (positions[..., 0] * N + positions[..., 1])[..., None], 1, axis=-1)
    return out.reshape(positions.shape[:-1] + (N, N))


def _object_inputs(x: Tensor, theta: Tensor, config: ModelConfig) -> Tensor:
    B, J = theta.shape[:2]
    if config.attention_crop:
        crops = attention_crop(x.reshape((B, 1) + x.shape[1:]), theta, config.M)
        return crops.reshape((B * J, 3, config.M, config.M))
    xs = x.reshape((B, 1) + x.shape[1:]) + Tensor(np.zeros((1, J, 1, 1, 1), dtype=x.dtype))
    stacked = concat([xs, theta.reshape((B, J, 1, config.N, config.N))], axis=2)
    return stacked.reshape((B * J, 4, config.N, config.N))


def object_posterior(params: Params, x: Tensor, theta: Tensor, config: ModelConfig) -> DiagGaussian:
    """Posterior over each slot's appearance and depth logit, ``[B, J, D_obj + 1]``."""
    B, J = theta.shape[:2]
    out = encode_object(params, _object_inputs(x, theta, config), config)
    return DiagGaussian.from_params(out.reshape((B, J, -1)))


def place_layers(params: Params, z: Tensor, theta: Tensor, config: ModelConfig):
    """Decode ``z [B,J,D_obj]`` and place at ``theta``; returns canvases and placed layers."""
    B, J = theta.shape[:2]
    pix, alpha = decode_object(params, z.reshape((B * J, config.D_obj)), config)
    M = config.M
    pix = pix.reshape((B, J, 3, M, M))
    alpha = alpha.reshape((B, J, 1, M, M))
    placed = place(concat([pix, alpha], axis=2), theta)
    return pix, alpha.reshape((B, J, M, M)), placed[:, :, :3], placed[:, :, 3]


def _check_finite(terms: dict, where: str) -> None:
    bad = {k: v for k, v in terms.items() if not math.isfinite(v)}
    if bad:
        raise NumericalError(f"non-finite {where}", bad)


# -------------------------------------------------------------------- ELBO
def elbo(params: Params, config: ModelConfig, x, noise: Noise, epoch: int = 0,
         use_hyperprior: bool = False, sigma: float | None = None) -> ElboBreakdown:
    """Reparameterised single-sample ELBO of a batch ``x [B,3,N,N]``.

    With ``use_hyperprior`` false (stage 1) the object latents are scored
    against standard normals and ``kl_y`` is 0. Otherwise the scene latent is
    inferred from the object posteriors and the object prior comes from it.
    Positions are always regularised by the L1 distance between each slot's
    aggregated posterior and the uniform map.
    """
    c = config
    dtype = _param_dtype(params)
    x = _as_batch(x, dtype)
    B = x.shape[0]
    temperature = gumbel_temperature(epoch)
    sigma = sigma_schedule(epoch) if sigma is None else sigma

    logits = encode_positions(params, x, c)
    theta = sample_position(PositionDistribution(logits, temperature), noise.pos)
    q_obj = object_posterior(params, x, theta, c)
    zd = sample_gaussian(q_obj, noise.obj)
    depth = sigmoid(zd[:, :, c.D_obj])
    _, alpha_canvas, pix, alpha = place_layers(params, zd[:, :, :c.D_obj], theta, c)

    q_bg = DiagGaussian.from_params(encode_background(params, x, c))
    bg = decode_background(params, sample_gaussian(q_bg, noise.bg), c)
    recon = composite_soft(bg, pix, alpha, depth, c.tau_depth)

    inv_b = 1.0 / B
    recon_ll = gaussian_log_likelihood(x, recon, sigma) * inv_b
    kl_bg = kl_gaussian_std(q_bg).sum() * inv_b
    if use_hyperprior:
        summary = concat([q_obj.mean[:, :, :c.D_obj], expected_coords(theta),
                          q_obj.mean[:, :, c.D_obj:]], axis=2)
        q_y = DiagGaussian.from_params(encode_scene(params, summary, c))
        y = sample_gaussian(q_y, noise.scene)
        prior = DiagGaussian.from_params(object_prior(params, y, expected_coords(theta), c))
        kl_obj = kl_gaussian(q_obj, prior).sum() * inv_b
        kl_y = kl_gaussian_std(q_y).sum() * inv_b
    else:
        kl_obj = kl_gaussian_std(q_obj).sum() * inv_b
        kl_y = None
    probs = spatial_softmax(logits)
    l1 = aggregated_position_l1(probs[:, 0])
    for j in range(1, c.J):
        l1 = l1 + aggregated_position_l1(probs[:, j])
    alpha_reg = alpha_entropy_regularizer(alpha_canvas) * inv_b

    objective = (recon_ll - kl_obj * c.beta_obj - kl_bg * c.beta_bg - l1 * c.lambda_pos
                 - alpha_reg * c.lambda_alpha)
    if kl_y is not None:
        objective = objective - kl_y * c.kl_y_weight
    parts = {"recon_loglik": recon_ll.item(), "kl_y": 0.0 if kl_y is None else kl_y.item(),
             "kl_z_bg": kl_bg.item(), "kl_obj": kl_obj.item(), "l1_position": l1.item(),
             "alpha_reg": alpha_reg.item()}
    _check_finite(parts, "ELBO term")
    total = (parts["recon_loglik"] - c.beta_obj * parts["kl_obj"] - c.beta_bg * parts["kl_z_bg"]
             - c.kl_y_weight * parts["kl_y"] - c.lambda_pos * parts["l1_position"]
             - c.lambda_alpha * parts["alpha_reg"])
    return ElboBreakdown(**parts, total=total, objective=objective)


def posterior_modes(params: Params, config: ModelConfig, x) -> SceneLatents:
    """Noise-free posterior summary: argmax positions, means of all Gaussians."""
    c = config
    dtype = _param_dtype(params)
    with no_grad():
        x = _as_batch(x, dtype)
        logits = encode_positions(params, x, c)
        theta = Tensor(hard_position(logits.data).astype(dtype))
        q_obj = object_posterior(params, x, theta, c)
        q_bg = DiagGaussian.from_params(encode_background(params, x, c))
        y = None
        if c.hyperprior and "enc_scene.fc.w" in params:
            summary = concat([q_obj.mean[:, :, :c.D_obj], expected_coords(theta),
                              q_obj.mean[:, :, c.D_obj:]], axis=2)
            y = DiagGaussian.from_params(encode_scene(params, summary, c)).mean.data
    m = q_obj.mean.data
    return SceneLatents(m[:, :, :c.D_obj].copy(), theta.data, m[:, :, c.D_obj].copy(),
                        q_bg.mean.data.copy(), y)


def stage2_loss(params: Params, config: ModelConfig, x, noise: Noise) -> Stage2Breakdown:
    """Fit the hyperprior networks to the frozen encoders' posterior modes.

    Cross-entropy of the position prior against each slot's argmax position,
    Gaussian NLL of the appearance/depth-logit means under the object prior,
    and the weighted KL of the scene posterior.
    """
    c = config
    dtype = _param_dtype(params)
    modes = posterior_modes(params, config, x)
    B = modes.z.shape[0]
    theta = Tensor(modes.theta)
    with no_grad():
        coords = expected_coords(theta)
    target = Tensor(np.concatenate([modes.z, modes.depth_logit[..., None]], axis=2).astype(dtype))
    summary = Tensor(np.concatenate([modes.z, coords.data, modes.depth_logit[..., None]],
                                    axis=2).astype(dtype))
    q_y = DiagGaussian.from_params(encode_scene(params, summary, c))
    y = sample_gaussian(q_y, noise.scene)
    flat = modes.theta.reshape(B, c.J, -1).argmax(axis=-1)
    ce = categorical_cross_entropy(position_prior(params, y, c), flat) * (1.0 / B)
    prior = DiagGaussian.from_params(object_prior(params, y, coords, c))
    nll = gaussian_nll(target, prior).sum() * (1.0 / B)
    kl_y = kl_gaussian_std(q_y).sum() * (1.0 / B)
    objective = ce + nll + kl_y * c.kl_y_weight
    parts = {"position_ce": ce.item(), "object_nll": nll.item(), "kl_y": kl_y.item()}
    _check_finite(parts, "stage-2 term")
    total = parts["position_ce"] + parts["object_nll"] + c.kl_y_weight * parts["kl_y"]
    return Stage2Breakdown(**parts, total=total, objective=objective)


# -------------------------------------------------------------- rendering
@dataclass
class Rendering:
    """Hard-composited scenes and every intermediate layer (leading axis ``B``)."""

    image: np.ndarray  # [B, 3, N, N]
    background: np.ndarray  # [B, 3, N, N]
    canvas_pixels: np.ndarray  # [B, J, 3, M, M]
    canvas_alpha: np.ndarray  # [B, J, M, M]
    placed_pixels: np.ndarray  # [B, J, 3, N, N]
    placed_alpha: np.ndarray  # [B, J, N, N]
    depths: np.ndarray  # [B, J]

    def canvases(self, b: int = 0) -> list[ObjectCanvas]:
        return [ObjectCanvas(Tensor(self.canvas_pixels[b, j]), Tensor(self.canvas_alpha[b, j]))
                for j in range(self.canvas_alpha.shape[1])]

    def segmentation(self) -> np.ndarray:
        return modal_segmentation(self.placed_alpha, self.depths)


def render_latents(params: Params, config: ModelConfig, latents: SceneLatents,
                   alpha_override=None) -> Rendering:
    """Decode latents and composite with strict depth ordering."""
    c = config
    dtype = _param_dtype(params)
    with no_grad():
        theta = Tensor(np.asarray(latents.theta, dtype=dtype))
        z = Tensor(np.asarray(latents.z, dtype=dtype))
        B, J = theta.shape[:2]
        pix, alpha = decode_object(params, z.reshape((B * J, c.D_obj)), c)
        pix = pix.data.reshape(B, J, 3, c.M, c.M)
        alpha = alpha.data.reshape(B, J, c.M, c.M)
        if alpha_override is not None:
            alpha = np.broadcast_to(np.asarray(alpha_override, dtype=dtype), alpha.shape).copy()
        placed = place(Tensor(np.concatenate([pix, alpha[:, :, None]], axis=2)), theta).data
        bg = decode_background(params, Tensor(np.asarray(latents.z_bg, dtype=dtype)), c).data
        depths = latents.depths.astype(dtype)
        image = composite_hard(bg, placed[:, :, :3], placed[:, :, 3], depths).data
    return Rendering(image, bg, pix, alpha, placed[:, :, :3], placed[:, :, 3], depths)


# -------------------------------------------------------------- generation
def sample_latents(params: Params, config: ModelConfig, rng: np.random.Generator, count: int = 1,
                   hyperprior: bool | None = None, overrides: dict | None = None) -> SceneLatents:
    """Ancestral sampling of ``count`` scenes' latents.

    With the hyperprior, positions come from the position prior (hard argmax
    of a relaxed sample) and appearance/depth from the object prior given
    those positions. Without it, positions are uniform over pixels and
    appearance/depth standard normal.
    """
    c = config
    dtype = _param_dtype(params)
    ov = dict(overrides or {})
    unknown = set(ov) - {"y", "theta", "positions", "z", "depth", "depth_logit", "z_bg", "alpha"}
    if unknown:
        raise ValueError(f"unknown overrides {sorted(unknown)}")
    use_prior = c.hyperprior if hyperprior is None else hyperprior
    if use_prior and "prior_pos.fc.w" not in params:
        from .networks import MissingParameterError
        raise MissingParameterError("prior_pos.fc.w")
    shape_pos = (count, c.J, c.N, c.N)

    def fixed(key, shape):
        return np.broadcast_to(np.asarray(ov[key], dtype=dtype), shape).copy()

    y = fixed("y", (count, c.D_scene)) if "y" in ov else rng.standard_normal((count, c.D_scene)).astype(dtype)
    g = gumbel_noise(rng, shape_pos, dtype)
    eps = rng.standard_normal((count, c.J, c.obj_latent)).astype(dtype)
    z_bg = rng.standard_normal((count, c.D_bg)).astype(dtype)
    with no_grad():
        if use_prior:
            logits = position_prior(params, Tensor(y), c)
        else:
            logits = Tensor(np.zeros(shape_pos, dtype=dtype))
        relaxed = sample_position(PositionDistribution(logits, gumbel_temperature(0)), g)
        theta = hard_position(relaxed.data).astype(dtype)
        if "positions" in ov:
            theta = one_hot_maps(np.broadcast_to(ov["positions"], (count, c.J, 2)), c.N, dtype)
        if "theta" in ov:
            theta = fixed("theta", shape_pos)
        if use_prior:
            prior = DiagGaussian.from_params(
                object_prior(params, Tensor(y), expected_coords(Tensor(theta)), c))
            zd = sample_gaussian(prior, eps).data
        else:
            zd = eps
    z = fixed("z", (count, c.J, c.D_obj)) if "z" in ov else zd[:, :, :c.D_obj].copy()
    d_logit = zd[:, :, c.D_obj].copy()
    if "depth_logit" in ov:
        d_logit = fixed("depth_logit", (count, c.J))
    if "depth" in ov:
        d = np.broadcast_to(np.asarray(ov["depth"], dtype=np.float64), (count, c.J))
        if np.any((d <= 0) | (d >= 1)):
            raise ValueError("depth overrides must lie in (0, 1)")
        d_logit = np.log(d / (1 - d)).astype(dtype)
    if "z_bg" in ov:
        z_bg = fixed("z_bg", (count, c.D_bg))
    return SceneLatents(z, theta, d_logit, z_bg, y if use_prior else None)


@dataclass
class Generation:
    image: np.ndarray  # [3, N, N]
    latents: SceneLatents  # batch of one
    canvases: list[ObjectCanvas]
    rendering: Rendering


def generate(params: Params, config: ModelConfig, seed=0, overrides: dict | None = None,
             hyperprior: bool | None = None) -> Generation:
    """Sample one scene; the image is ``composite_hard`` of the returned layers.

    ``seed`` is an int or a sequence of ints.
    """
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 11])
    latents = sample_latents(params, config, rng, 1, hyperprior, overrides)
    r = render_latents(params, config, latents, (overrides or {}).get("alpha"))
    return Generation(r.image[0], latents, r.canvases(0), r)


# ----------------------------------------------------------- decomposition
@dataclass
class Decomposition:
    latents: SceneLatents
    rendering: Rendering
    segmentation: np.ndarray  # [B, N, N]; 0 background, j + 1 for slot j

    @property
    def reconstruction(self) -> np.ndarray:
        return self.rendering.image


def decompose(params: Params, config: ModelConfig, x) -> Decomposition:
    """Posterior modes, hard-composited reconstruction and modal segmentation."""
    latents = posterior_modes(params, config, x)
    r = render_latents(params, config, latents)
    return Decomposition(latents, r, r.segmentation())


def interpolate(params: Params, config: ModelConfig, x_a, x_b, steps: int,
                mode: str = "joint") -> list[Rendering]:
    """Render ``steps`` scenes between the posterior modes of two images.

    ``positions`` moves each slot's position linearly (rounded to a pixel)
    and keeps everything else from ``x_a``; ``appearance`` blends appearance,
    depth and background latents at ``x_a``'s positions; ``joint`` blends all.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if mode not in INTERPOLATION_MODES:
        raise ValueError(f"mode must be one of {INTERPOLATION_MODES}")
    a = posterior_modes(params, config, _as_batch(x_a, _param_dtype(params))[:1])
    b = posterior_modes(params, config, _as_batch(x_b, _param_dtype(params))[:1])
    pa, pb = a.positions.astype(np.float64), b.positions.astype(np.float64)
    frames = []
    for t in np.linspace(0.0, 1.0, steps):
        lat = SceneLatents(a.z, a.theta, a.depth_logit, a.z_bg)
        if mode in ("positions", "joint") and t > 0:
            pos = np.rint(pa + t * (pb - pa)).astype(np.int64)
            lat.theta = one_hot_maps(pos, config.N, a.theta.dtype)
        if mode in ("appearance", "joint") and t > 0:
            lat.z = (a.z + t * (b.z - a.z)).astype(a.z.dtype)
            lat.depth_logit = (a.depth_logit + t * (b.depth_logit - a.depth_logit)).astype(a.z.dtype)
            lat.z_bg = (a.z_bg + t * (b.z_bg - a.z_bg)).astype(a.z.dtype)
        frames.append(render_latents(params, config, lat))
    return frames


__all__ = [
    "Decomposition", "ElboBreakdown", "Generation", "INTERPOLATION_MODES", "Noise",
    "NumericalError", "Rendering", "SceneLatents", "Stage2Breakdown", "coordinate_grid",
    "decompose", "elbo", "expected_coords", "generate", "interpolate", "object_posterior",
    "one_hot_maps", "place_layers", "posterior_modes", "render_latents", "sample_latents",
    "stage2_loss",
]
