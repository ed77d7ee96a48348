"""Named parameter storage and the AdamW update."""
from __future__ import annotations

import numpy as np


class ParamStore:
    """Named parameters plus AdamW moment estimates."""

    def __init__(self, params):
        if hasattr(params, "named_parameters"):
            params = params.named_parameters()
        self.params = dict(params)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step = 0

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        out = {"step": np.array([self.step], dtype=np.float64)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out


def adamw_step(store: ParamStore, lr=1e-4, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
    """Apply one decoupled-weight-decay Adam step in place and clear gradients."""
    missing = [k for k, p in store.params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"adamw_step: no gradient for parameter(s) {missing[:5]}")
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in store.params.items():
        g = p.grad.astype(p.dtype, copy=False)
        m = store.m[k]
        v = store.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None
    return store
