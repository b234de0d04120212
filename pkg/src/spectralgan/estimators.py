"""scikit-learn style wrappers around the functional core."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import gan
from .specnorm import DIVISOR_EPS, IterMode, NormMode, norm_divisor, sigma_report

__all__ = ["SpectralNormalizer", "GANTrainer"]


class SpectralNormalizer(TransformerMixin, BaseEstimator):
    """Measure one weight tensor's spectral divisor, then rescale by it.

    ``X`` is a dense ``(m, n)`` weight or a ``(c_out, c_in, kh, kw)`` kernel,
    not a sample matrix. ``fit`` records the divisor for ``mode``;
    ``transform`` returns ``scale * X / divisor``.
    """

    def __init__(self, mode="sn_w", scale=1.0, input_shape=None, stride=1, pad=0,
                 tol=1e-10, max_iter=1000, random_state=0):
        self.mode = mode
        self.scale = scale
        self.input_shape = input_shape
        self.stride = stride
        self.pad = pad
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def _validate(self, X):
        X = check_array(X, allow_nd=True, ensure_min_features=1, dtype=np.float64)
        if X.ndim not in (2, 4):
            raise ValueError(f"expected a 2-D or 4-D weight, got {X.ndim}-D")
        return X

    def fit(self, X, y=None):
        X = self._validate(X)
        self.norm_mode_ = NormMode(self.mode, self.scale)
        it = IterMode("converge", tol=self.tol, max_iters=self.max_iter)
        shape = None if self.input_shape is None else tuple(self.input_shape)
        self.divisor_, _ = norm_divisor(X, self.norm_mode_, shape, self.stride, self.pad,
                                        iter_mode=it, rng=self.random_state)
        self.report_ = sigma_report(X, shape if X.ndim == 4 else None, self.stride, self.pad,
                                    it, rng=self.random_state)
        self.weight_shape_ = X.shape
        return self

    def transform(self, X):
        check_is_fitted(self, "divisor_")
        X = self._validate(X)
        if X.shape != self.weight_shape_:
            raise ValueError(f"fitted on shape {self.weight_shape_}, got {X.shape}")
        if self.norm_mode_.kind == "none":
            return self.scale * X
        return self.scale * X / (self.divisor_ + DIVISOR_EPS)

    def inverse_transform(self, X):
        check_is_fitted(self, "divisor_")
        X = np.asarray(X, dtype=np.float64)
        if self.norm_mode_.kind == "none":
            return X / self.scale
        return X * (self.divisor_ + DIVISOR_EPS) / self.scale


class GANTrainer(BaseEstimator):
    """Fit a small GAN to a ``(n, d)`` point cloud and sample from it.

    The discriminator is a bias-free leaky-ReLU MLP normalized per ``norm``;
    training metrics are kept in ``metrics_``.
    """

    def __init__(self, norm="sn_w", scale=1.0, iters=20000, batch_size=64, n_dis=5,
                 alpha=1e-4, beta1=0.5, beta2=0.999, loss="hinge", log_every=500,
                 disc_width=64, gen_hidden=(64, 64), z_dim=16, random_state=0):
        self.norm = norm
        self.scale = scale
        self.iters = iters
        self.batch_size = batch_size
        self.n_dis = n_dis
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.loss = loss
        self.log_every = log_every
        self.disc_width = disc_width
        self.gen_hidden = gen_hidden
        self.z_dim = z_dim
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        cfg = gan.TrainConfig(alpha_g=self.alpha, alpha_d=self.alpha, beta1=self.beta1,
                              beta2=self.beta2, n_dis=self.n_dis, batch_size=self.batch_size,
                              iters=self.iters, loss=self.loss,
                              norm_mode=NormMode(self.norm, self.scale),
                              log_every=self.log_every, seed=int(self.random_state),
                              z_dim=self.z_dim)
        dataset = gan.PointDataset(X)
        arch = gan.default_ring_arch(self.disc_width)
        arch["input_shape"] = [X.shape[1] + 1]
        gen, disc = gan.make_models(cfg, dataset, arch, self.gen_hidden)
        result = gan.train(gen, disc, dataset, cfg)
        self.generator_ = result.generator
        self.discriminator_ = result.discriminator
        self.metrics_ = result.metrics
        return self

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "generator_")
        return self.generator_.sample(n_samples, random_state)
