"""Bias-corrected Adam with an L2 penalty on selected tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericalError, ShapeError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr=1e-3, weight_decay=0.0, decay=()):
    """Update ``params`` (name -> ndarray) in place.

    ``weight_decay * theta`` is added to the gradient of every name in ``decay``
    before the moment updates.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay and name in decay:
            g = g + weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(theta.dtype, copy=False)
    return params, state


class Adam:
    """Adam over a model's named tensors.

    Parameters
    ----------
    named : dict
        Name -> Tensor; only tensors listed here are updated.
    decay : iterable of str
        Names receiving the L2 term (posterior means and point-estimate weights).
    """

    def __init__(self, named, lr=1e-3, weight_decay=0.0, decay=(), betas=(0.9, 0.999), eps=1e-8):
        self.named = dict(named)
        self.lr = lr
        self.weight_decay = weight_decay
        self.decay = set(decay)
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for t in self.named.values():
            t.grad = None

    def step(self):
        params = {k: t.data for k, t in self.named.items()}
        grads = {k: t.grad for k, t in self.named.items()}
        adam_step(params, grads, self.state, self.lr, self.weight_decay, self.decay)

    def state_tensors(self):
        out = {}
        for name in self.named:
            if name in self.state.m:
                out[f"adam.m.{name}"] = self.state.m[name]
                out[f"adam.v.{name}"] = self.state.v[name]
        return out

    def load_state_tensors(self, tensors, step):
        self.state.step = int(step)
        for name in self.named:
            if f"adam.m.{name}" in tensors:
                self.state.m[name] = np.array(tensors[f"adam.m.{name}"])
                self.state.v[name] = np.array(tensors[f"adam.v.{name}"])
