"""Adam / AdamW over named parameter groups.

Parameters are plain named numpy buffers; each forward pass wraps them as
tape leaves (see Tape.param). The optimizer owns first/second moments and a
per-parameter step counter, all of which serialize into the checkpoint.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit as _njit
except ImportError:          # pure-numpy fallback, same arithmetic
    _njit = None

if _njit is not None:
    @_njit(cache=True)
    def _adam_fused(p, g, m, v, wdk, lr_c, b1, b2, ib2, eps):
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] = p[i] * wdk - lr_c * mi / (np.sqrt(vi) * ib2 + eps)


class Parameter:
    """Named learnable array. `group` routes it to a learning-rate group."""

    __slots__ = ("name", "data", "group")

    def __init__(self, name: str, data: np.ndarray, group: str = "default"):
        self.name = name
        self.data = np.asarray(data)
        self.group = group

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.data.shape)}, group={self.group!r})"


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0):
    """One in-place Adam update with bias correction.

    Nonzero weight_decay is applied decoupled (AdamW): the parameter is
    shrunk by lr*wd*param independently of the gradient moments.
    Returns the new step count t+1.
    """
    t = t + 1
    wdk = 1.0 - lr * weight_decay
    ib2 = 1.0 / np.sqrt(1.0 - beta2 ** t)
    lr_c = lr / (1.0 - beta1 ** t)
    if _njit is not None and param.dtype == grad.dtype:
        _adam_fused(param.reshape(-1), np.ascontiguousarray(grad).reshape(-1),
                    m.reshape(-1), v.reshape(-1),
                    param.dtype.type(wdk), param.dtype.type(lr_c),
                    param.dtype.type(beta1), param.dtype.type(beta2),
                    param.dtype.type(ib2), param.dtype.type(eps))
        return t
    if weight_decay != 0.0:
        param *= wdk
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    denom = np.sqrt(v)
    denom *= ib2
    denom += eps
    upd = m / denom
    upd *= lr_c
    param -= upd
    return t


class Adam:
    """Adam over parameter groups, with per-group learning rates.

    Groups not listed in `enabled` are completely untouched by step():
    no moment update, no weight decay. Gradients that contain non-finite
    values skip their parameter and are counted (surfaced in the training
    log).
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        # groups: {name: {"params": [Parameter], "lr": float}}
        self.groups = {name: dict(g) for name, g in groups.items()}
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.enabled = set(self.groups)
        self.skipped_total = 0
        self.state = {}
        for g in self.groups.values():
            for p in g["params"]:
                self.state[p.name] = {
                    "m": np.zeros_like(p.data),
                    "v": np.zeros_like(p.data),
                    "t": 0,
                }

    def set_lr(self, group: str, lr: float) -> None:
        self.groups[group]["lr"] = lr

    def lr(self, group: str) -> float:
        return self.groups[group]["lr"]

    def set_enabled(self, names) -> None:
        unknown = set(names) - set(self.groups)
        if unknown:
            raise KeyError(f"unknown parameter groups: {sorted(unknown)}")
        self.enabled = set(names)

    def step(self, grads) -> int:
        """Apply one update from a Grads object; returns #skipped params."""
        skipped = 0
        for name, g in self.groups.items():
            if name not in self.enabled:
                continue
            lr = g["lr"]
            for p in g["params"]:
                grad = grads.get(p)
                if not np.all(np.isfinite(grad)):
                    skipped += 1
                    continue
                st = self.state[p.name]
                st["t"] = adam_step(
                    p.data, grad, st["m"], st["v"], st["t"],
                    lr, self.beta1, self.beta2, self.eps, self.weight_decay)
        self.skipped_total += skipped
        return skipped

    # -- checkpoint support --------------------------------------------

    def state_blobs(self) -> dict:
        blobs = {}
        for name, st in self.state.items():
            blobs[f"optim/{name}/m"] = st["m"]
            blobs[f"optim/{name}/v"] = st["v"]
            blobs[f"optim/{name}/t"] = np.asarray([st["t"]], dtype=np.float32)
        return blobs

    def load_state_blobs(self, blobs: dict) -> None:
        for name, st in self.state.items():
            key = f"optim/{name}"
            if f"{key}/m" not in blobs:
                continue
            st["m"] = blobs[f"{key}/m"].reshape(st["m"].shape).astype(st["m"].dtype)
            st["v"] = blobs[f"{key}/v"].reshape(st["v"].shape).astype(st["v"].dtype)
            st["t"] = int(blobs[f"{key}/t"][0])
