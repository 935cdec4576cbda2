"""Optimizers and the warmup/cosine learning-rate schedule."""

import math

import numpy as np

from .errors import ConfigError

MIN_LR_FACTOR = 0.1


def lr_at(step, base_lr, warmup_steps, total_steps, min_factor=MIN_LR_FACTOR):
    """Linear warmup to base_lr, then cosine decay to min_factor * base_lr."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    floor = min_factor * base_lr
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))


def _decays(p):
    # matrices decay; biases and norm scales/shifts (1-D) do not
    return p.array.ndim >= 2


class SGDMomentum:
    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, named_params, grads, lr):
        for name in sorted(named_params):
            p = named_params[name]
            g = grads.get(p)
            if g is None or not p.requires_grad:
                continue
            if self.weight_decay and _decays(p):
                g = g + self.weight_decay * p.array
            v = self.state.setdefault(name, {"v": np.zeros_like(p.array)})["v"]
            v *= self.momentum
            v += g
            p.array -= lr * v

    def state_arrays(self):
        return {f"opt.{n}.v": s["v"] for n, s in self.state.items()}

    def load_state_arrays(self, arrays, step):
        for key, arr in arrays.items():
            if key.startswith("opt.") and key.endswith(".v"):
                self.state[key[4:-2]] = {"v": arr.copy()}


class AdamW:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {}

    def step(self, named_params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(named_params):
            p = named_params[name]
            g = grads.get(p)
            if g is None or not p.requires_grad:
                continue
            st = self.state.setdefault(
                name, {"m": np.zeros_like(p.array), "v": np.zeros_like(p.array)})
            st["m"] *= b1
            st["m"] += (1.0 - b1) * g
            st["v"] *= b2
            st["v"] += (1.0 - b2) * g * g
            if self.weight_decay and _decays(p):
                p.array -= lr * self.weight_decay * p.array
            p.array -= lr * (st["m"] / c1) / (np.sqrt(st["v"] / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for n, st in self.state.items():
            out[f"opt.{n}.m"] = st["m"]
            out[f"opt.{n}.v"] = st["v"]
        return out

    def load_state_arrays(self, arrays, step):
        self.t = step
        for key, arr in arrays.items():
            if not key.startswith("opt."):
                continue
            name, slot = key[4:].rsplit(".", 1)
            st = self.state.setdefault(name, {})
            st[slot] = arr.copy()


def build_optimizer(name, cfg):
    if name == "sgd_momentum":
        return SGDMomentum(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if name == "adamw":
        return AdamW(beta1=cfg.beta1, beta2=cfg.beta2,
                     weight_decay=cfg.weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}")


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint l2 norm is at most max_norm."""
    if max_norm is None or max_norm <= 0:
        return 1.0
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for t in grads:
        grads[t] = grads[t] * factor
    return factor
