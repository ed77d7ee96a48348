"""Dual-encoder variational autoencoder for topology rasters and their conditions."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import physics_losses as pl
from .autodiff import ops as T
from .autodiff.nn import Conv2d, GroupNorm, Linear, Module
from .autodiff.optim import ParamStore, adamw_step
from .autodiff.tensor import Tensor, as_tensor, no_grad
from .errors import ShapeError, TrainingDivergedError

N_STAGES = 4


class ResidualBlock(Module):
    """Depthwise 3x3, group norm, pointwise expand, relu, pointwise project, plus skip."""

    def __init__(self, ch, rng, expand=2):
        self.dw = Conv2d(ch, ch, 3, groups=ch, rng=rng)
        self.norm = GroupNorm(ch)
        self.pw1 = Conv2d(ch, expand * ch, 1, rng=rng)
        self.pw2 = Conv2d(expand * ch, ch, 1, rng=rng)

    def forward(self, x):
        h = self.pw2(T.relu(self.pw1(self.norm(self.dw(x)))))
        return x + h


class Encoder(Module):
    """Four stride-2 conv stages with residual blocks, then flatten and linear heads."""

    def __init__(self, in_ch, latent_dim, resolution, width=32, heads=2, rng=0):
        rng = np.random.default_rng(rng)
        if resolution % 2**N_STAGES:
            raise ShapeError(f"resolution {resolution} must be divisible by {2**N_STAGES}")
        chans = [width, 2 * width, 4 * width, 4 * width]
        self.in_ch, self.resolution = in_ch, resolution
        self.down, self.norms, self.blocks = [], [], []
        prev = in_ch
        for ch in chans:
            self.down.append(Conv2d(prev, ch, 3, stride=2, padding=1, rng=rng))
            self.norms.append(GroupNorm(ch))
            self.blocks.append(ResidualBlock(ch, rng))
            prev = ch
        side = resolution // 2**N_STAGES
        self.heads = [Linear(prev * side * side, latent_dim, rng=rng) for _ in range(heads)]

    def features(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (self.in_ch, self.resolution, self.resolution):
            raise ShapeError(f"encoder expects (B, {self.in_ch}, {self.resolution}, {self.resolution}), got {x.shape}")
        h = x
        for down, norm, block in zip(self.down, self.norms, self.blocks):
            h = block(T.relu(norm(down(h))))
        return h.reshape(h.shape[0], -1)

    def forward(self, x):
        h = self.features(x)
        return tuple(head(h) for head in self.heads)


class Decoder(Module):
    """Linear lift, three upsample-conv stages, then a final upsample into a sigmoid output conv."""

    def __init__(self, out_ch, latent_dim, resolution, width=32, rng=0):
        rng = np.random.default_rng(rng)
        chans = [4 * width, 2 * width, width]
        self.side = resolution // 2**N_STAGES
        self.c0 = 4 * width
        self.lift = Linear(latent_dim, self.c0 * self.side * self.side, rng=rng)
        self.convs, self.norms = [], []
        prev = self.c0
        for ch in chans:
            self.convs.append(Conv2d(prev, ch, 3, rng=rng))
            self.norms.append(GroupNorm(ch))
            prev = ch
        self.out = Conv2d(prev, out_ch, 3, rng=rng)

    def forward(self, z):
        z = as_tensor(z)
        h = T.relu(self.lift(z)).reshape(z.shape[0], self.c0, self.side, self.side)
        for conv, norm in zip(self.convs, self.norms):
            h = T.relu(norm(conv(T.upsample2x(h))))
        return T.sigmoid(self.out(T.upsample2x(h)))


@dataclass
class LatentDistribution:
    mu: Tensor
    log_var: Tensor


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    vf: float
    ld: float
    fm: float
    beta1: float
    beta2: float
    total: float
    fm_hard: float = 0.0
    cond_recon: float = 0.0
    topo_mse: float = 0.0

    def recompose(self):
        return self.recon + self.beta1 * self.kl + self.beta2 * (self.vf + self.ld + self.fm)

    def as_dict(self):
        return asdict(self)


@dataclass
class VAEConfig:
    latent_dim: int = 64
    resolution: int = 32
    width: int = 32
    cond_width: int | None = None
    beta1: float = 0.075
    beta2: float = 0.3
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    recon_mode: str = "topology"
    kl_reduction: str = "mean"
    log_every: int = 50

    def validate(self):
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if self.resolution <= 0 or self.resolution % 2**N_STAGES:
            raise ValueError(f"resolution must be a positive multiple of {2**N_STAGES}, got {self.resolution}")
        if self.recon_mode not in ("topology", "all"):
            raise ValueError(f"recon_mode must be 'topology' or 'all', got {self.recon_mode!r}")
        if self.kl_reduction not in ("mean", "sum"):
            raise ValueError(f"kl_reduction must be 'mean' or 'sum', got {self.kl_reduction!r}")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("loss weights must be non-negative")
        return self


N_COND = 5


class DualVAE(Module):
    """Topology VAE (E1, D1) plus a deterministic condition autoencoder (E2, D2)."""

    def __init__(self, config: VAEConfig):
        config.validate()
        self.config = config
        cw = config.cond_width or config.width
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        out_ch = 1 if config.recon_mode == "topology" else 1 + N_COND
        res, d = config.resolution, config.latent_dim
        self.topo_encoder = Encoder(1, d, res, config.width, heads=2, rng=_gen(seeds[0]))
        self.topo_decoder = Decoder(out_ch, d, res, config.width, rng=_gen(seeds[1]))
        self.cond_encoder = Encoder(N_COND, d, res, cw, heads=1, rng=_gen(seeds[2]))
        self.cond_decoder = Decoder(N_COND, d, res, cw, rng=_gen(seeds[3]))

    @property
    def dtype(self):
        return self.topo_decoder.lift.weight.dtype

    def forward(self, x):
        return self.topo_decoder(self.topo_encoder(x)[0])


def _gen(seq):
    return np.random.default_rng(seq)


# --- functional interface ----------------------------------------------------

def encode_topology(model: DualVAE, x) -> LatentDistribution:
    """q(z|x) parameters for a (B, 1, H, W) topology batch."""
    mu, log_var = model.topo_encoder(_as_batch(x, 1))
    return LatentDistribution(mu, log_var)


def encode_condition(model: DualVAE, cond) -> Tensor:
    """Deterministic condition latent for a (B, 5, H, W) condition stack."""
    (c,) = model.cond_encoder(_as_batch(cond, N_COND))
    return c


def decode(model: DualVAE, z) -> Tensor:
    """Decoded raster in [0, 1]; channel 0 is the topology."""
    return model.topo_decoder(z)


def reparameterize(dist: LatentDistribution, eps) -> Tensor:
    """z = mu + exp(log_var / 2) * eps; ``eps`` is treated as a constant."""
    eps = np.asarray(getattr(eps, "data", eps))
    if eps.shape != dist.mu.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match mu {dist.mu.shape}")
    return dist.mu + T.exp(dist.log_var * 0.5) * Tensor(eps, dtype=dist.mu.dtype)


def kl_divergence(dist: LatentDistribution, reduction="sum") -> Tensor:
    """Per-sample KL(q || N(0, I)); ``reduction='mean'`` divides by the latent size."""
    mu, lv = dist.mu, dist.log_var
    terms = (mu * mu + T.exp(lv) - 1.0 - lv) * 0.5
    per = T.sum_(terms, axis=-1)
    if reduction == "mean":
        return per * (1.0 / mu.shape[-1])
    if reduction == "sum":
        return per
    raise ValueError(f"unknown reduction {reduction!r}")


def _as_batch(x, channels):
    x = as_tensor(x)
    if x.ndim == 3 and channels == 1:
        x = x.reshape(x.shape[0], 1, *x.shape[1:])
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"expected (B, {channels}, H, W), got {x.shape}")
    return x


def _split(channels):
    ch = np.asarray(channels)
    if ch.ndim != 4 or ch.shape[1] != 1 + N_COND:
        raise ShapeError(f"expected (B, 6, H, W) sample channels, got {ch.shape}")
    return ch[:, :1], ch[:, 1:]


def vae_loss(model: DualVAE, channels, eps, beta1=None, beta2=None):
    """Forward pass and loss graph for a (B, 6, H, W) batch.

    Returns ``(objective, breakdown)``. ``objective`` is the topology loss
    plus the condition autoencoder loss; the two touch disjoint parameters.
    """
    cfg = model.config
    b1 = cfg.beta1 if beta1 is None else beta1
    b2 = cfg.beta2 if beta2 is None else beta2
    dtype = model.dtype
    channels = np.asarray(channels, dtype=dtype)
    topo, cond = _split(channels)
    dist = encode_topology(model, topo)
    z = reparameterize(dist, eps)
    recon_raster = decode(model, z)
    target = topo if cfg.recon_mode == "topology" else channels
    diff = recon_raster - Tensor(target, dtype=dtype)
    recon = T.mean(diff * diff)
    x_tilde = recon_raster[:, 0]
    topo_err = x_tilde - Tensor(topo[:, 0], dtype=dtype)
    kl = T.mean(kl_divergence(dist, cfg.kl_reduction))
    aux = pl.auxiliary_losses(pl.TopologyBatch.from_conditions(x_tilde, cond))
    total = recon + kl * b1 + (aux["vf"] + aux["ld"] + aux["fm"]) * b2

    c = encode_condition(model, cond)
    cdiff = model.cond_decoder(c) - Tensor(cond, dtype=dtype)
    cond_recon = T.mean(cdiff * cdiff)

    parts = dict(recon=recon.item(), kl=kl.item(), vf=aux["vf"].item(), ld=aux["ld"].item(), fm=aux["fm"].item())
    breakdown = LossBreakdown(
        **parts, beta1=b1, beta2=b2,
        total=parts["recon"] + b1 * parts["kl"] + b2 * (parts["vf"] + parts["ld"] + parts["fm"]),
        fm_hard=aux["fm_hard"], cond_recon=cond_recon.item(),
        topo_mse=float(np.mean(topo_err.data**2)),
    )
    return total + cond_recon, breakdown


def vae_train_step(model: DualVAE, store: ParamStore, channels, rng, step=0, beta1=None, beta2=None):
    """One AdamW step on a (B, 6, H, W) batch; returns the LossBreakdown."""
    cfg = model.config
    eps = rng.standard_normal((len(channels), cfg.latent_dim))
    objective, breakdown = vae_loss(model, channels, eps, beta1, beta2)
    if not (math.isfinite(breakdown.total) and math.isfinite(breakdown.cond_recon)):
        raise TrainingDivergedError(f"non-finite VAE loss {breakdown.total}", step)
    store.zero_grad()
    objective.backward()
    adamw_step(store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return breakdown


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def add(self, step, breakdown):
        self.steps.append(step)
        self.losses.append(breakdown)

    def lines(self):
        yield "step\trecon\tkl\tvf\tld\tfm\ttotal\tfm_hard\tcond_recon"
        for s, b in zip(self.steps, self.losses):
            yield (f"{s}\t{b.recon:.6g}\t{b.kl:.6g}\t{b.vf:.6g}\t{b.ld:.6g}\t{b.fm:.6g}\t{b.total:.6g}"
                   f"\t{b.fm_hard:.3g}\t{b.cond_recon:.6g}")


def batch_iterator(n, batch_size, rng):
    """Endless epoch-shuffled index batches."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[start:start + batch_size]


def train_vae(model: DualVAE, channels, steps=None, callback=None, store=None):
    """Train on a (N, 6, H, W) array; returns ``(store, log)``."""
    cfg = model.config
    steps = cfg.steps if steps is None else steps
    channels = np.asarray(channels)
    store = store or ParamStore(model)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    batches = batch_iterator(len(channels), cfg.batch_size, rng)
    log = TrainLog()
    for step in range(steps):
        b = vae_train_step(model, store, channels[next(batches)], rng, step)
        log.add(step, b)
        if callback is not None:
            callback(step, b)
    return store, log


def reconstruction_mse(model: DualVAE, topology, batch_size=64) -> float:
    """Mean squared error of decode(mu(x)) against x for (N, 1, H, W) or (N, H, W) input."""
    x = np.asarray(topology)
    if x.ndim == 3:
        x = x[:, None]
    errs = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            xb = x[s:s + batch_size]
            rec = decode(model, encode_topology(model, xb).mu).data[:, :1]
            errs.append(((rec - xb) ** 2).sum())
    return float(np.sum(errs) / x.size)
