"""Estimator-style wrappers around the VAE and the latent diffusion model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import diffusion as dm
from . import vae as vm
from ._validation import check_rasters, check_vectors
from .autodiff.tensor import no_grad


def _batched(fn, X, batch_size=64):
    with no_grad():
        return np.concatenate([fn(X[s:s + batch_size]) for s in range(0, len(X), batch_size)])


class TopologyVAE(TransformerMixin, BaseEstimator):
    """Topology VAE with a condition autoencoder.

    ``fit`` takes (N, 6, H, W) sample rasters. ``transform`` maps topologies
    to posterior means, ``inverse_transform`` decodes latents to rasters and
    ``encode_conditions`` gives the deterministic condition latents.
    """

    def __init__(self, latent_dim=64, width=32, cond_width=None, beta1=0.075, beta2=0.3, lr=1e-4,
                 weight_decay=0.05, batch_size=32, steps=1000, seed=0, recon_mode="topology",
                 kl_reduction="mean"):
        self.latent_dim = latent_dim
        self.width = width
        self.cond_width = cond_width
        self.beta1 = beta1
        self.beta2 = beta2
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.recon_mode = recon_mode
        self.kl_reduction = kl_reduction

    def _config(self, resolution):
        return vm.VAEConfig(latent_dim=self.latent_dim, resolution=resolution, width=self.width,
                            cond_width=self.cond_width, beta1=self.beta1, beta2=self.beta2, lr=self.lr,
                            weight_decay=self.weight_decay, batch_size=self.batch_size, steps=self.steps,
                            seed=self.seed, recon_mode=self.recon_mode, kl_reduction=self.kl_reduction)

    def fit(self, X, y=None, callback=None):
        X = check_rasters(X, channels=6)
        self.model_ = vm.DualVAE(self._config(X.shape[2]))
        self.store_, self.log_ = vm.train_vae(self.model_, X, callback=callback)
        self.resolution_ = X.shape[2]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_model(cls, model: vm.DualVAE):
        cfg = model.config
        est = cls(latent_dim=cfg.latent_dim, width=cfg.width, cond_width=cfg.cond_width, beta1=cfg.beta1,
                  beta2=cfg.beta2, lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                  steps=cfg.steps, seed=cfg.seed, recon_mode=cfg.recon_mode, kl_reduction=cfg.kl_reduction)
        est.model_ = model
        est.resolution_ = cfg.resolution
        return est

    def _topology(self, X):
        X = check_rasters(X, channels=(1, 6), resolution=self.resolution_)
        return X[:, :1].astype(self.model_.dtype)

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = self._topology(X)
        return _batched(lambda xb: vm.encode_topology(self.model_, xb).mu.data, X).astype(np.float64)

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = check_vectors(Z, self.latent_dim).astype(self.model_.dtype)
        return _batched(lambda zb: vm.decode(self.model_, zb).data[:, 0], Z).astype(np.float64)

    def encode_conditions(self, X):
        check_is_fitted(self, "model_")
        X = check_rasters(X, channels=(5, 6), resolution=self.resolution_)
        cond = X[:, -5:].astype(self.model_.dtype)
        return _batched(lambda cb: vm.encode_condition(self.model_, cb).data, cond).astype(np.float64)

    def reconstruction_mse(self, X):
        check_is_fitted(self, "model_")
        return vm.reconstruction_mse(self.model_, self._topology(X))


class LatentDiffusion(BaseEstimator):
    """Conditional epsilon-prediction DDPM on fixed latents.

    ``fit(Z, C)`` learns p(z | c); ``predict(C)`` draws latents from the reverse chain.
    """

    def __init__(self, T=200, beta_start=None, beta_end=None, hidden=256, depth=2, time_dim=64, lr=1e-4,
                 weight_decay=0.05, batch_size=32, steps=1000, seed=0):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.hidden = hidden
        self.depth = depth
        self.time_dim = time_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed

    def _config(self):
        return dm.LDMConfig(T=self.T, beta_start=self.beta_start, beta_end=self.beta_end, hidden=self.hidden,
                            depth=self.depth, time_dim=self.time_dim, lr=self.lr, weight_decay=self.weight_decay,
                            batch_size=self.batch_size, steps=self.steps, seed=self.seed)

    def fit(self, Z, C, callback=None):
        Z = check_vectors(Z, name="Z")
        C = check_vectors(C, name="C")
        if len(Z) != len(C):
            raise ValueError(f"{len(Z)} latents but {len(C)} conditions")
        self.model_ = dm.ConditionalLDM(Z.shape[1], self._config(), C.shape[1])
        self.model_.fit_scaling(Z, C)
        self.store_, self.losses_ = dm.train_ldm(self.model_, Z, C, callback=callback)
        self.n_features_in_ = C.shape[1]
        return self

    @classmethod
    def from_model(cls, model: dm.ConditionalLDM):
        cfg = model.config
        est = cls(T=cfg.T, beta_start=cfg.beta_start, beta_end=cfg.beta_end, hidden=cfg.hidden, depth=cfg.depth,
                  time_dim=cfg.time_dim, lr=cfg.lr, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                  steps=cfg.steps, seed=cfg.seed)
        est.model_ = model
        return est

    def predict(self, C, seed=0):
        check_is_fitted(self, "model_")
        C = check_vectors(C, self.model_.c_mean.shape[0], name="C")
        return dm.sample(C, self.model_, seed)


def generate(vae: TopologyVAE, ldm: LatentDiffusion, conditions, seed=0) -> np.ndarray:
    """Topology rasters (N, H, W) for condition rasters (N, 5 or 6, H, W)."""
    c = vae.encode_conditions(conditions)
    return vae.inverse_transform(ldm.predict(c, seed))
