"""Scikit-learn style wrapper around the layered scene model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..autodiff import no_grad
from ..validation import check_images, check_positive_int
from .config import ModelConfig, TrainConfig
from .core import Noise, coordinate_grid, decompose, elbo, generate, interpolate
from .networks import init_params
from .training import train_stage1, train_stage2


class LayeredSceneModel(TransformerMixin, BaseEstimator):
    """Unsupervised layered decomposition of images into depth-ordered objects.

    ``fit`` runs both training stages on ``[n, 3, N, N]`` images in ``[0, 1]``.
    ``transform`` returns per-image latent features (per slot: appearance
    mean, position in ``[-1, 1]``, depth; then the background latent),
    ``predict`` the modal segmentation (0 background, ``j + 1`` slot ``j``)
    and ``score`` the mean ELBO.
    """

    def __init__(self, image_size: int = 32, canvas_size: int = 16, n_slots: int = 2,
                 d_scene: int = 16, d_obj: int = 8, d_bg: int = 4, attention_crop: bool = True,
                 hyperprior: bool = True, tau_depth: float = 0.1, stage1_steps: int = 2000,
                 stage2_steps: int = 200, batch_size: int = 100, learning_rate: float = 5e-4,
                 random_state: int = 0):
        self.image_size = image_size
        self.canvas_size = canvas_size
        self.n_slots = n_slots
        self.d_scene = d_scene
        self.d_obj = d_obj
        self.d_bg = d_bg
        self.attention_crop = attention_crop
        self.hyperprior = hyperprior
        self.tau_depth = tau_depth
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _configs(self) -> tuple[ModelConfig, TrainConfig]:
        mc = ModelConfig(N=self.image_size, M=self.canvas_size, J=self.n_slots, D_scene=self.d_scene,
                         D_obj=self.d_obj, D_bg=self.d_bg, pos_dims=max(1, self.d_scene // 2),
                         attention_crop=self.attention_crop, hyperprior=self.hyperprior,
                         tau_depth=self.tau_depth)
        tc = TrainConfig(stage1_steps=self.stage1_steps,
                         stage2_steps=self.stage2_steps if self.hyperprior else 0,
                         batch_size=check_positive_int(self.batch_size, "batch_size"),
                         lr=self.learning_rate, seed=self.random_state)
        return mc, tc

    def fit(self, X, y=None, X_val=None):
        mc, tc = self._configs()
        X = check_images(X, mc.N)
        params = init_params(mc, tc.seed)
        val = None if X_val is None else check_images(X_val, mc.N)
        r1 = train_stage1(X, mc, tc, params, val_images=val)
        self.history_ = {"stage1": r1.rows, "validation": r1.val_rows, "stage2": []}
        if tc.stage2_steps:
            self.history_["stage2"] = train_stage2(X, mc, tc, params).rows
        self.params_, self.config_, self.train_config_ = params, mc, tc
        self.n_features_in_ = 3 * mc.N * mc.N
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return check_images(X, self.config_.N, allow_single=True)

    def decompose(self, X):
        X = self._check(X)
        return decompose(self.params_, self.config_, X)

    def transform(self, X) -> np.ndarray:
        d = self.decompose(X)
        lat, N = d.latents, self.config_.N
        grid = coordinate_grid(N)
        coords = grid[(lat.positions[..., 0] * N + lat.positions[..., 1])]
        per_slot = np.concatenate([lat.z, coords.astype(lat.z.dtype), lat.depths[..., None]], axis=2)
        return np.concatenate([per_slot.reshape(len(per_slot), -1), lat.z_bg], axis=1)

    def predict(self, X) -> np.ndarray:
        return self.decompose(X).segmentation

    def score(self, X, y=None) -> float:
        """Mean per-image ELBO with fixed noise drawn from ``random_state``."""
        X = self._check(X)
        noise = Noise.draw(np.random.default_rng([self.random_state, 5]), self.config_, len(X))
        with no_grad():
            return float(elbo(self.params_, self.config_, X, noise).total)

    def sample(self, n: int = 1, seed: int = 0, hyperprior: bool | None = None) -> np.ndarray:
        check_is_fitted(self, "params_")
        n = check_positive_int(n, "n")
        return np.stack([generate(self.params_, self.config_, seed + i, hyperprior=hyperprior).image
                         for i in range(n)])

    def interpolate(self, x_a, x_b, steps: int = 8, mode: str = "joint") -> np.ndarray:
        x_a, x_b = self._check(x_a), self._check(x_b)
        frames = interpolate(self.params_, self.config_, x_a, x_b, steps, mode)
        return np.stack([f.image[0] for f in frames])


__all__ = ["LayeredSceneModel"]
