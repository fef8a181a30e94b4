"""Bayesian convolution and fully-connected layers with Gaussian weight posteriors.

Each weight has posterior ``N(mu, alpha * mu**2)`` and the layers sample
activations rather than weights (local reparameterization): one pass of the
input through ``mu`` gives the activation mean, a second pass of the squared
input through ``alpha * mu**2`` gives its variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ContractError, ShapeError
from .tensor import Tensor

LOG_ALPHA_INIT = -10.0
INIT_GAIN = 2.0
VAR_EPS = 1e-16


@dataclass
class GaussianVariationalParams:
    mu: Tensor
    log_alpha: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_alpha.shape:
            raise ShapeError(f"mu {self.mu.shape} and log_alpha {self.log_alpha.shape} differ")

    @property
    def shape(self):
        return self.mu.shape

    def variance(self):
        """Elementwise ``alpha * mu**2`` as a graph tensor."""
        return T.exp(self.log_alpha) * self.mu * self.mu


@dataclass(frozen=True)
class PriorSpec:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.std <= 0:
            raise ContractError(f"prior std must be positive, got {self.std}")


class NoiseStream:
    """Seeded standard-normal source with one independent substream per key.

    Two streams built from the same seed emit identical sequences for every key.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._generators = {}

    def generator(self, key):
        gen = self._generators.get(key)
        if gen is None:
            seq = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
            gen = self._generators[key] = np.random.Generator(np.random.PCG64(seq))
        return gen

    def normal(self, key, shape, dtype=np.float64):
        return self.generator(key).standard_normal(shape, dtype=dtype)


def fan_in(shape):
    """Inputs feeding one output unit: C_in*k*k for (C_out, C_in, k, k), D_in for (D_in, D_out)."""
    if len(shape) == 4:
        return int(np.prod(shape[1:]))
    if len(shape) == 2:
        return int(shape[0])
    raise ShapeError(f"no fan-in convention for weight shape {shape}")


def init_params(shape, seed, init="fan_in", gain=INIT_GAIN, log_alpha=LOG_ALPHA_INIT, dtype=np.float64):
    """Draw ``mu`` and fill ``log_alpha`` with a constant.

    ``init="fan_in"`` draws ``mu ~ N(0, gain**2 / fan_in)``; ``init="standard"``
    draws plain ``N(0, 1)``.
    """
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(shape)
    if init == "fan_in":
        mu *= gain / math.sqrt(fan_in(shape))
    elif init != "standard":
        raise ContractError(f"unknown init {init!r}")
    return GaussianVariationalParams(
        mu=Tensor(mu.astype(dtype), requires_grad=True),
        log_alpha=Tensor(np.full(shape, log_alpha, dtype=dtype), requires_grad=True),
    )


def _sample(mean, var, noise, key, stochastic):
    if not stochastic:
        return mean
    if noise is None:
        raise ContractError("stochastic forward pass needs a NoiseStream")
    if var.data.min(initial=0.0) < 0:
        raise AssertionError("negative activation variance")
    eps = noise.normal(key, mean.shape, dtype=mean.dtype)
    return mean + Tensor(eps) * T.sqrt(var + VAR_EPS)


def bayes_conv2d(input, params, stride=1, padding=0, noise=None, stochastic=True, bias=None, key=0):
    """Sample convolution activations ``m + eps * sqrt(v)``.

    ``m = conv(A, mu) (+ bias)`` and ``v = conv(A*A, alpha*mu**2)``. With
    ``stochastic=False`` only the mean path is evaluated.
    """
    mean = T.conv2d(input, params.mu, stride, padding)
    if bias is not None:
        mean = mean + T.reshape(bias, (1, -1, 1, 1))
    if not stochastic:
        return mean
    var = T.conv2d(input * input, params.variance(), stride, padding)
    return _sample(mean, var, noise, key, stochastic)


def bayes_linear(input, params, noise=None, stochastic=True, bias=None, key=0):
    """Fully-connected counterpart of :func:`bayes_conv2d`."""
    if bias is None:
        bias = Tensor(np.zeros(params.shape[1], dtype=params.mu.dtype))
    mean = T.affine(input, params.mu, bias)
    if not stochastic:
        return mean
    var = T.matmul(input * input, params.variance())
    return _sample(mean, var, noise, key, stochastic)


class BayesConv2d:
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, seed=0, **init):
        self.stride, self.padding = stride, padding
        self.params = init_params((out_channels, in_channels, kernel_size, kernel_size), seed, **init)
        self.bias = Tensor(np.zeros(out_channels, dtype=self.params.mu.dtype), requires_grad=True)

    def __call__(self, x, noise=None, stochastic=True, key=0):
        return bayes_conv2d(x, self.params, self.stride, self.padding, noise, stochastic, self.bias, key)

    def output_shape(self, shape):
        c, h, w = shape
        k = self.params.shape[-1]
        size = lambda n: (n + 2 * self.padding - k) // self.stride + 1
        return (self.params.shape[0], size(h), size(w))

    def named_tensors(self):
        return {"mu": self.params.mu, "log_alpha": self.params.log_alpha, "bias": self.bias}


class BayesLinear:
    def __init__(self, in_features, out_features, seed=0, **init):
        self.params = init_params((in_features, out_features), seed, **init)
        self.bias = Tensor(np.zeros(out_features, dtype=self.params.mu.dtype), requires_grad=True)

    def __call__(self, x, noise=None, stochastic=True, key=0):
        return bayes_linear(x, self.params, noise, stochastic, self.bias, key)

    def output_shape(self, shape):
        return (self.params.shape[1],)

    def named_tensors(self):
        return {"mu": self.params.mu, "log_alpha": self.params.log_alpha, "bias": self.bias}
