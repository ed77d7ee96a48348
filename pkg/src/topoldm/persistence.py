"""Saving and loading trained models as named-tensor checkpoints plus a JSON config sidecar."""
from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .diffusion import ConditionalLDM, LDMConfig
from .errors import CheckpointFormatError
from .vae import DualVAE, VAEConfig


def config_path(path) -> Path:
    return Path(str(path) + ".json")


def _read_config(path, cls, kind):
    cp = config_path(path)
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if not cp.exists():
        raise FileNotFoundError(f"checkpoint config not found: {cp}")
    meta = json.loads(cp.read_text())
    if meta.get("kind") != kind:
        raise CheckpointFormatError(f"{path} holds a {meta.get('kind')!r} model, expected {kind!r}")
    names = {f.name for f in fields(cls)}
    return meta, cls(**{k: v for k, v in meta["config"].items() if k in names})


def save_vae(path, model: DualVAE) -> None:
    save_checkpoint(path, model.state_dict())
    config_path(path).write_text(json.dumps({"kind": "vae", "config": asdict(model.config)}, indent=2, sort_keys=True))


def load_vae(path) -> DualVAE:
    _, cfg = _read_config(path, VAEConfig, "vae")
    model = DualVAE(cfg)
    model.load_state_dict(load_checkpoint(path))
    return model


def save_ldm(path, model: ConditionalLDM) -> None:
    tensors = {f"net.{k}": v for k, v in model.net.state_dict().items()}
    tensors.update({f"buffer.{k}": v for k, v in model.buffers().items()})
    save_checkpoint(path, tensors)
    meta = {"kind": "ldm", "config": asdict(model.config), "latent_dim": model.latent_dim,
            "cond_dim": int(model.c_mean.shape[0])}
    config_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_ldm(path) -> ConditionalLDM:
    meta, cfg = _read_config(path, LDMConfig, "ldm")
    model = ConditionalLDM(meta["latent_dim"], cfg, meta.get("cond_dim"))
    state = load_checkpoint(path)
    model.net.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("net.")})
    model.load_buffers({k[7:]: np.asarray(v, np.float64) for k, v in state.items() if k.startswith("buffer.")})
    return model
