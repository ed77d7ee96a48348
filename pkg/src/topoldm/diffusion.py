"""Conditional DDPM over VAE latents.

Step indices run 1..T; index 0 is the clean latent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ops as T
from .autodiff.nn import Linear, Module
from .autodiff.optim import ParamStore, adamw_step
from .autodiff.tensor import Tensor, as_tensor, no_grad
from .errors import SamplingError, ShapeError, TrainingDivergedError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t):
        """Cumulative product at step ``t`` with the t=0 convention of 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.clip(t, 1, self.T) - 1])

    def check_t(self, t, low=0):
        t = np.asarray(t)
        if np.any(t < low) or np.any(t > self.T):
            raise ValueError(f"step index out of range [{low}, {self.T}]: {t.min()}..{t.max()}")
        return t


def default_betas(T: int):
    """Linear 1e-4 -> 0.02 endpoints, rescaled by 1000/T so short chains still destroy the signal."""
    scale = 1000.0 / T
    return 1e-4 * scale, min(0.02 * scale, 0.999)


def make_schedule(T: int = 1000, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Linear beta schedule of length ``T``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    if beta_start is None or beta_end is None:
        ds, de = default_betas(T)
        beta_start = ds if beta_start is None else beta_start
        beta_end = de if beta_end is None else beta_end
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def forward_corrupt(z0, t, schedule: NoiseSchedule, eps):
    """Closed-form jump z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. ``t`` is a scalar or per-row array."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match latent {z0.shape}")
    t = schedule.check_t(t)
    ab = schedule.abar(t)
    if ab.ndim == 1 and z0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def corrupt_one_step(z_prev, t, schedule: NoiseSchedule, eps):
    """Single transition q(z_t | z_{t-1})."""
    b = schedule.beta[schedule.check_t(t, low=1) - 1]
    return np.sqrt(1.0 - b) * np.asarray(z_prev) + np.sqrt(b) * np.asarray(eps)


# --- denoiser -------------------------------------------------------------------

def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of the step index, (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class Denoiser(Module):
    """Residual MLP with mirrored skips; input is [z_t, c, time embedding]."""

    def __init__(self, latent_dim, cond_dim=None, hidden=256, depth=2, time_dim=64, rng=0):
        rng = np.random.default_rng(rng)
        cond_dim = latent_dim if cond_dim is None else cond_dim
        self.latent_dim, self.cond_dim, self.time_dim = latent_dim, cond_dim, time_dim
        self.inp = Linear(latent_dim + cond_dim + time_dim, hidden, rng=rng)
        self.down = [Linear(hidden, hidden, rng=rng) for _ in range(depth)]
        self.up = [Linear(hidden, hidden, rng=rng) for _ in range(depth)]
        self.out = Linear(hidden, latent_dim, rng=rng)

    def forward(self, z_t, t, c):
        z_t, c = as_tensor(z_t), as_tensor(c)
        if z_t.ndim != 2 or z_t.shape[1] != self.latent_dim:
            raise ShapeError(f"denoiser expects z_t of shape (B, {self.latent_dim}), got {z_t.shape}")
        if c.shape != (z_t.shape[0], self.cond_dim):
            raise ShapeError(f"denoiser expects c of shape ({z_t.shape[0]}, {self.cond_dim}), got {c.shape}")
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        temb = Tensor(timestep_embedding(t, self.time_dim), dtype=z_t.dtype)
        h = T.silu(self.inp(T.concat([z_t, c, temb], axis=1)))
        skips = []
        for layer in self.down:
            skips.append(h)
            h = h + T.silu(layer(h))
        for layer in self.up:
            h = h + T.silu(layer(h)) + skips.pop()
        return self.out(h)


def _predict(model, z_t, t, c):
    with no_grad():
        out = model(z_t, t, c)
    return np.asarray(getattr(out, "data", out), dtype=np.float64)


@dataclass
class LatentState:
    z: np.ndarray
    t: int
    c: np.ndarray


def denoise_step(state: LatentState, model, schedule: NoiseSchedule, eps_draw) -> LatentState:
    """One ancestral step t -> t-1 with fixed variance beta_t; no noise at t=1."""
    t = int(state.t)
    if t < 1 or t > schedule.T:
        raise ValueError(f"denoise_step needs 1 <= t <= {schedule.T}, got {t}")
    z = np.asarray(state.z, dtype=np.float64)
    eps_hat = _predict(model, z, t, state.c)
    if eps_hat.shape != z.shape:
        raise ShapeError(f"model predicted noise of shape {eps_hat.shape} for latent {z.shape}")
    b = schedule.beta[t - 1]
    ab = schedule.alpha_bar[t - 1]
    mean = (z - b / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - b)
    if t > 1:
        mean = mean + math.sqrt(b) * np.asarray(eps_draw, dtype=np.float64)
    return LatentState(mean, t - 1, state.c)


def sample_latents(c, model, schedule: NoiseSchedule, seed=0, latent_dim=None) -> np.ndarray:
    """Run the reverse chain from z_T ~ N(0, I) given conditions ``c``; pure in ``seed``."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        c = c[None]
    d = latent_dim or getattr(model, "latent_dim", c.shape[1])
    rng = np.random.default_rng(seed)
    state = LatentState(rng.standard_normal((len(c), d)), schedule.T, c)
    while state.t > 0:
        draw = rng.standard_normal(state.z.shape) if state.t > 1 else np.zeros_like(state.z)
        state = denoise_step(state, model, schedule, draw)
    if not np.all(np.isfinite(state.z)):
        raise SamplingError("reverse chain produced non-finite latents")
    return state.z


def ldm_loss(model, z_t, t, c, eps) -> Tensor:
    """Mean squared error between the true and predicted noise."""
    pred = model(z_t, t, c)
    diff = pred - Tensor(eps, dtype=pred.dtype)
    return T.mean(diff * diff)


@dataclass
class LDMConfig:
    T: int = 200
    beta_start: float | None = None
    beta_end: float | None = None
    hidden: int = 256
    depth: int = 2
    time_dim: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0


class ConditionalLDM(Module):
    """Denoiser plus its schedule and the latent/condition standardization."""

    def __init__(self, latent_dim, config: LDMConfig, cond_dim=None):
        self.config = config
        self.latent_dim = latent_dim
        self.schedule = make_schedule(config.T, config.beta_start, config.beta_end)
        self.net = Denoiser(latent_dim, cond_dim, config.hidden, config.depth, config.time_dim,
                            rng=np.random.SeedSequence([config.seed, 7]))
        cond_dim = latent_dim if cond_dim is None else cond_dim
        # buffers (no grad): latent scale and condition standardization
        self.z_mean = np.zeros(latent_dim)
        self.z_std = np.ones(latent_dim)
        self.c_mean = np.zeros(cond_dim)
        self.c_std = np.ones(cond_dim)

    @property
    def dtype(self):
        return self.net.inp.weight.dtype

    def fit_scaling(self, z0, c):
        z0, c = np.asarray(z0, np.float64), np.asarray(c, np.float64)
        self.z_mean, self.z_std = z0.mean(axis=0), z0.std(axis=0) + 1e-6
        self.c_mean, self.c_std = c.mean(axis=0), c.std(axis=0) + 1e-6
        # checkpoints store 32-bit floats; round now so a reloaded model predicts identically
        for k, v in self.buffers().items():
            setattr(self, k, v.astype(np.float32).astype(np.float64))

    def to_model_space(self, z0, c):
        return (np.asarray(z0) - self.z_mean) / self.z_std, (np.asarray(c) - self.c_mean) / self.c_std

    def from_model_space(self, z):
        return np.asarray(z) * self.z_std + self.z_mean

    def buffers(self):
        return {"z_mean": self.z_mean, "z_std": self.z_std, "c_mean": self.c_mean, "c_std": self.c_std}

    def load_buffers(self, state):
        for k in ("z_mean", "z_std", "c_mean", "c_std"):
            setattr(self, k, np.asarray(state[k], dtype=np.float64))

    def forward(self, z_t, t, c):
        return self.net(Tensor(z_t, dtype=self.dtype), t, Tensor(c, dtype=self.dtype))


def ldm_train_step(model: ConditionalLDM, store: ParamStore, z0, c, rng, step=0) -> float:
    """One AdamW step of epsilon-prediction on standardized latents; ``c`` is never corrupted."""
    cfg = model.config
    zs, cs = model.to_model_space(z0, c)
    t = rng.integers(1, model.schedule.T + 1, size=len(zs))
    eps = rng.standard_normal(zs.shape)
    z_t = forward_corrupt(zs, t, model.schedule, eps)
    loss = ldm_loss(model, z_t, t, cs, eps)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite diffusion loss {value}", step)
    store.zero_grad()
    loss.backward()
    adamw_step(store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return value


def train_ldm(model: ConditionalLDM, z0, c, steps=None, callback=None, store=None):
    """Train on fixed latents ``z0`` and conditions ``c``; returns ``(store, losses)``."""
    cfg = model.config
    steps = cfg.steps if steps is None else steps
    z0, c = np.asarray(z0, np.float64), np.asarray(c, np.float64)
    if len(z0) != len(c):
        raise ShapeError(f"{len(z0)} latents but {len(c)} conditions")
    store = store or ParamStore(model)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    n, bs = len(z0), cfg.batch_size
    losses = []
    order, pos = rng.permutation(n), 0
    for step in range(steps):
        if pos + min(bs, n) > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + bs]
        pos += bs
        losses.append(ldm_train_step(model, store, z0[idx], c[idx], rng, step))
        if callback is not None:
            callback(step, losses[-1])
    return store, losses


def sample(c, model: ConditionalLDM, seed=0) -> np.ndarray:
    """Latents for raw condition vectors ``c`` (un-standardized in and out)."""
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    cs = (c - model.c_mean) / model.c_std
    z = sample_latents(cs, model, model.schedule, seed, model.latent_dim)
    return model.from_model_space(z)
