"""LeNet-5, AlexNet and VGG built from variational layers with Softplus activations."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ContractError, ShapeError
from .layers import INIT_GAIN, BayesConv2d, BayesLinear, PriorSpec
from .tensor import Tensor

ARCHITECTURES = ("lenet5", "alexnet", "vgg")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "pool" or "fc"
    width: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    nonlinearity: str = ""


@dataclass
class ArchitectureSpec:
    name: str
    layers: list
    input_shape: tuple
    num_classes: int
    softplus_beta: float = 1.0
    shapes: list = field(default_factory=list)


def _conv(width, k, stride=1, padding=0):
    return LayerSpec("conv", width, k, stride, padding, "softplus")


def _pool():
    return LayerSpec("pool", kernel=2, stride=2)


def _fc(width, nonlinearity="softplus"):
    return LayerSpec("fc", width, nonlinearity=nonlinearity)


def architecture(name, num_classes, in_channels=None):
    """Layer table for ``name``; the last layer emits ``num_classes`` scores."""
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if name == "lenet5":
        layers = [_conv(6, 5), _pool(), _conv(16, 5), _pool(), _fc(120), _fc(84)]
        default_channels = 1
    elif name == "alexnet":
        layers = [
            _conv(64, 11, 4, 5), _pool(),
            _conv(192, 5, 1, 2), _pool(),
            _conv(384, 3, 1, 1), _conv(256, 3, 1, 1), _conv(128, 3, 1, 1), _pool(),
        ]  # fmt: skip
        default_channels = 3
    elif name == "vgg":
        layers = []
        for widths in ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)):
            layers += [_conv(w, 3, 1, 1) for w in widths] + [_pool()]
        default_channels = 3
    else:
        raise ContractError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    layers.append(_fc(num_classes, "softplus_n"))
    channels = default_channels if in_channels is None else in_channels
    return ArchitectureSpec(name, layers, (channels, 32, 32), num_classes)


def _layer_seed(init_seed, index):
    return int(np.random.SeedSequence([int(init_seed), index]).generate_state(1)[0])


class BayesianCNN:
    """A stack of variational layers; ``forward`` returns pre-normalization scores.

    Hidden weight layers are followed by Softplus; the final layer's output is
    normalized by the consumer (objective or uncertainty estimator).
    """

    def __init__(self, spec, init_seed=0, dtype=np.float32, init="fan_in", gain=INIT_GAIN):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers = []
        shape = tuple(spec.input_shape)
        spec.shapes = [shape]
        weight_index = 0
        for layer in spec.layers:
            if layer.kind == "conv":
                module = BayesConv2d(
                    shape[0], layer.width, layer.kernel, layer.stride, layer.padding,
                    seed=_layer_seed(init_seed, weight_index), init=init, gain=gain, dtype=self.dtype,
                )  # fmt: skip
                weight_index += 1
                shape = module.output_shape(shape)
                if min(shape[1:]) < 1:
                    raise ShapeError(f"{spec.name}: feature map vanished at {shape}")
            elif layer.kind == "fc":
                flat = int(np.prod(shape))
                module = BayesLinear(
                    flat, layer.width, seed=_layer_seed(init_seed, weight_index),
                    init=init, gain=gain, dtype=self.dtype,
                )  # fmt: skip
                weight_index += 1
                shape = (layer.width,)
            elif layer.kind == "pool":
                module = None
                if layer.kernel > min(shape[1:]):
                    raise ShapeError(f"{spec.name}: pool window exceeds feature map {shape}")
                shape = (shape[0], (shape[1] - layer.kernel) // layer.stride + 1, (shape[2] - layer.kernel) // layer.stride + 1)
            else:
                raise ContractError(f"unknown layer kind {layer.kind!r}")
            self.layers.append((layer, module))
            spec.shapes.append(shape)

    @property
    def weight_layers(self):
        return [m for _, m in self.layers if m is not None]

    def named_parameters(self):
        named = OrderedDict()
        for idx, module in enumerate(self.weight_layers):
            for name, t in module.named_tensors().items():
                named[f"layer{idx}.{name}"] = t
        return named

    def parameters(self):
        return list(self.named_parameters().values())

    def variational_params(self):
        return [m.params for m in self.weight_layers]

    def kl(self, prior=PriorSpec()):
        from .objective import kl_gaussian

        total = None
        for params in self.variational_params():
            term = kl_gaussian(params, prior)
            total = term if total is None else total + term
        return total

    def forward(self, images, noise=None, stochastic=True):
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError(f"{self.spec.name} expects inputs {self.spec.input_shape}, got {x.shape[1:]}")
        key = 0
        for layer, module in self.layers:
            if layer.kind == "pool":
                x = T.maxpool2d(x, layer.kernel, layer.stride)
                continue
            if layer.kind == "fc" and x.ndim > 2:
                x = T.flatten(x)
            x = module(x, noise=noise, stochastic=stochastic, key=key)
            key += 1
            if layer.nonlinearity == "softplus":
                x = T.softplus(x, self.spec.softplus_beta)
        return x

    __call__ = forward


def build(name, num_classes, init_seed=0, in_channels=None, dtype=np.float32, init="fan_in", gain=INIT_GAIN):
    """Construct the named architecture with freshly initialized posteriors."""
    spec = architecture(name, num_classes, in_channels)
    return BayesianCNN(spec, init_seed=init_seed, dtype=dtype, init=init, gain=gain)
