"""Declarative network specs and the layer stack built from them.

A NetworkSpec lists layers by kind with their hyperparameters; build_network
validates that consecutive shapes compose and initializes all parameters from
one seeded counter-based generator, so the same spec and seed always produce
bit-identical networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .layer import (DAUConfig, DAUParams, backward_efficient, backward_naive,
                    forward_efficient, forward_naive, init_dau_params)
from .optim import make_group
from .tensor_ops import conv2d, conv2d_grads, relu_backward


class BuildError(ValueError):
    """NetworkSpec does not assemble into a consistent layer stack."""


LAYER_KINDS = ("dau", "conv", "maxpool", "batchnorm", "relu", "dense", "softmax_xent")


@dataclass
class LayerSpec:
    kind: str
    args: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "args": dict(self.args)}

    @staticmethod
    def from_dict(d):
        return LayerSpec(d["kind"], dict(d["args"]))


@dataclass
class NetworkSpec:
    input_shape: tuple          # (C, H, W)
    classes: int
    seed: int
    layers: list

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "classes": self.classes,
                "seed": self.seed, "layers": [l.to_dict() for l in self.layers]}

    @staticmethod
    def from_dict(d):
        return NetworkSpec(tuple(d["input_shape"]), d["classes"], d["seed"],
                           [LayerSpec.from_dict(l) for l in d["layers"]])


def init_rng(seed, stream):
    """Independent Philox stream for a purpose index; replayable from the seed."""
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream]))


class DAULayer:
    def __init__(self, name, cfg, params, mu_frozen=False):
        self.name = name
        self.cfg = cfg
        self.params = params
        self.mu_frozen = mu_frozen
        self.grads = {}
        self._cache = None

    def forward(self, x, train=True):
        if self.cfg.mode == "efficient":
            _, cache = forward_efficient(x, self.params, self.cfg)
            self._cache = cache
            return cache.z
        _, z = forward_naive(x, self.params, self.cfg, rasterizer="analytic")
        self._cache = (x, z)
        return z

    def backward(self, grad):
        if self.cfg.mode == "efficient":
            gx, gw, gmu, gb = backward_efficient(self._cache, grad, self.params, self.cfg)
            self.grads = {"w": gw, "mu": gmu, "bias": gb}
        else:
            x, z = self._cache
            gx, gw, gmu, gsig, gb = backward_naive(x, z, grad, self.params, self.cfg)
            self.grads = {"w": gw, "mu": gmu, "sigma": gsig, "bias": gb}
        return gx

    def param_entries(self):
        entries = [("w", "dau_weight", self.params.w, {}),
                   ("bias", "bias", self.params.bias, {})]
        if not self.mu_frozen:
            entries.append(("mu", "dau_mu", self.params.mu,
                            {"clamp_abs": self.cfg.max_displacement}))
        if self.cfg.sigma_learnable:
            entries.append(("sigma", "dau_sigma", self.params.sigma, {}))
        return entries

    def state_arrays(self):
        out = {"w": self.params.w, "mu": self.params.mu, "bias": self.params.bias,
               "active": self.params.active}
        if not np.isscalar(self.params.sigma):
            out["sigma"] = self.params.sigma
        return out

    def out_shape(self, shape):
        c, h, w = shape
        return (self.cfg.out_channels, h, w)


class Conv2DLayer:
    def __init__(self, name, weight, bias):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.grads = {}
        self._x = None

    def forward(self, x, train=True):
        self._x = x
        return conv2d(x, self.weight, self.bias.astype(x.dtype))

    def backward(self, grad):
        gx, gk, gb = conv2d_grads(self._x, self.weight, grad)
        self.grads = {"weight": gk, "bias": gb}
        return gx

    def param_entries(self):
        return [("weight", "dense_weight", self.weight, {}),
                ("bias", "bias", self.bias, {})]

    def state_arrays(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, shape):
        c, h, w = shape
        return (self.weight.shape[0], h, w)


class MaxPoolLayer:
    def __init__(self, name, size=2):
        self.name = name
        self.size = size
        self.grads = {}
        self._cache = None

    def forward(self, x, train=True):
        out, argmax = nn.maxpool_forward(x, self.size, self.size)
        self._cache = (argmax, x.shape)
        return out

    def backward(self, grad):
        argmax, shape = self._cache
        return nn.maxpool_backward(grad, argmax, shape, self.size, self.size)

    def param_entries(self):
        return []

    def state_arrays(self):
        return {}

    def out_shape(self, shape):
        c, h, w = shape
        ho, wo = h // self.size, w // self.size
        if ho == 0 or wo == 0:
            raise BuildError(f"{self.name}: pooling {h}x{w} by {self.size} leaves nothing")
        return (c, ho, wo)


class BatchNormLayer:
    def __init__(self, name, channels, eps=1e-5, momentum=0.9):
        self.name = name
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.grads = {}
        self._cache = None

    def forward(self, x, train=True):
        out, cache, rm, rv = nn.batchnorm_forward(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            eps=self.eps, momentum=self.momentum, train=train)
        if train:
            self.running_mean, self.running_var = rm, rv
        self._cache = cache
        return out

    def backward(self, grad):
        gx, gg, gb = nn.batchnorm_backward(grad, self._cache)
        self.grads = {"gamma": gg, "beta": gb}
        return gx

    def param_entries(self):
        return [("gamma", "bn_affine", self.gamma, {}),
                ("beta", "bn_affine", self.beta, {})]

    def state_arrays(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def out_shape(self, shape):
        return shape


class ReLULayer:
    def __init__(self, name):
        self.name = name
        self.grads = {}
        self._pre = None

    def forward(self, x, train=True):
        self._pre = x
        return np.maximum(x, 0)

    def backward(self, grad):
        return relu_backward(grad, self._pre)

    def param_entries(self):
        return []

    def state_arrays(self):
        return {}

    def out_shape(self, shape):
        return shape


class DenseLayer:
    """Flattens any incoming shape to (N, D)."""

    def __init__(self, name, weight, bias):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.grads = {}
        self._x = None

    def forward(self, x, train=True):
        flat = x.reshape(x.shape[0], -1)
        self._x = (flat, x.shape)
        return nn.dense_forward(flat, self.weight, self.bias)

    def backward(self, grad):
        flat, shape = self._x
        gx, gw, gb = nn.dense_backward(grad, flat, self.weight)
        self.grads = {"weight": gw, "bias": gb}
        return gx.reshape(shape)

    def param_entries(self):
        return [("weight", "dense_weight", self.weight, {}),
                ("bias", "bias", self.bias, {})]

    def state_arrays(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, shape):
        d = int(np.prod(shape))
        if d != self.weight.shape[1]:
            raise BuildError(f"{self.name}: dense expects {self.weight.shape[1]} "
                             f"inputs, gets {d}")
        return (self.weight.shape[0],)


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_network(spec):
    """Assemble and initialize the stack; shape mismatches raise BuildError
    naming the offending layer."""
    rng = init_rng(spec.seed, 0)
    layers = []
    shape = tuple(spec.input_shape)
    if len(shape) != 3:
        raise BuildError(f"input_shape must be (C, H, W), got {shape}")
    specs = list(spec.layers)
    if specs and specs[-1].kind == "softmax_xent":
        specs = specs[:-1]
    for ls in specs:
        if ls.kind == "softmax_xent":
            raise BuildError("softmax_xent may only appear as the final layer")
        if ls.kind not in LAYER_KINDS:
            raise BuildError(f"unknown layer kind {ls.kind!r}")
    for i, ls in enumerate(specs):
        name = f"layer{i}.{ls.kind}"
        a = ls.args
        if len(shape) == 1 and ls.kind not in ("dense", "relu"):
            raise BuildError(f"{name}: needs a spatial input, got flat {shape}")
        if ls.kind == "dau":
            cfg = DAUConfig(
                in_channels=shape[0], out_channels=int(a["out"]),
                units_per_filter=int(a.get("k", 2)),
                sigma=float(a.get("sigma", 0.5)),
                max_displacement=float(a.get("dmax", 4.0)),
                mode=a.get("mode", "efficient"),
                sigma_learnable=bool(a.get("sigma_learnable", False)))
            params = init_dau_params(cfg, rng, mu_init=a.get("mu_init", "uniform"))
            layer = DAULayer(name, cfg, params, mu_frozen=bool(a.get("mu_frozen", False)))
        elif ls.kind == "conv":
            f, k = int(a["out"]), int(a.get("ksize", 3))
            if k % 2 == 0:
                raise BuildError(f"{name}: kernel size must be odd")
            s = shape[0]
            weight = _glorot(rng, s * k * k, f * k * k, (f, s, k, k))
            layer = Conv2DLayer(name, weight, np.zeros(f))
        elif ls.kind == "maxpool":
            layer = MaxPoolLayer(name, size=int(a.get("size", 2)))
        elif ls.kind == "batchnorm":
            layer = BatchNormLayer(name, shape[0])
        elif ls.kind == "relu":
            layer = ReLULayer(name)
        elif ls.kind == "dense":
            d = int(np.prod(shape))
            if "in" in a and int(a["in"]) != d:
                raise BuildError(f"{name}: declared input size {a['in']} but the "
                                 f"incoming shape provides {d}")
            out = int(a.get("out", spec.classes))
            weight = _glorot(rng, d, out, (out, d))
            layer = DenseLayer(name, weight, np.zeros(out))
        layers.append(layer)
        shape = layer.out_shape(shape)
    if len(shape) != 1 or shape[0] != spec.classes:
        raise BuildError(f"network must end in {spec.classes} logits, got shape {shape}")
    return Network(spec, layers)


class Network:
    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers
        self.sigma_clamp_events = 0

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def loss_and_grad(self, x, labels, train=True):
        """Softmax cross-entropy over the logits; leaves per-layer grads in
        place and returns (loss, batch accuracy)."""
        logits = self.forward(x, train=train)
        loss, grad, probs = nn.softmax_xent(logits, labels)
        self.backward(grad)
        acc = float((probs.argmax(axis=1) == labels).mean())
        return loss, acc

    def forward_partial(self, x, upto, train=False):
        """Run layers [0, upto] inclusive, keeping caches for backward_partial."""
        for layer in self.layers[:upto + 1]:
            x = layer.forward(x, train=train)
        return x

    def backward_partial(self, grad, upto):
        for layer in reversed(self.layers[:upto + 1]):
            grad = layer.backward(grad)
        return grad

    def param_groups(self, mu_lr_multiplier=500.0):
        """Optimizer groups aliasing the live parameter arrays. Create once per
        training run; the groups carry velocity state."""
        groups = []
        for layer in self.layers:
            for field_name, role, values, extra in layer.param_entries():
                groups.append(make_group(
                    f"{layer.name}.{field_name}", role, values,
                    mu_lr_multiplier=mu_lr_multiplier,
                    clamp_abs=extra.get("clamp_abs")))
        return groups

    def grads_for(self, groups):
        by_name = {}
        for layer in self.layers:
            for field_name, _, _, _ in layer.param_entries():
                by_name[f"{layer.name}.{field_name}"] = layer.grads[field_name]
        return [by_name[g.name] for g in groups]

    def state_arrays(self):
        out = {}
        for layer in self.layers:
            for key, arr in layer.state_arrays().items():
                out[f"{layer.name}.{key}"] = arr
        return out

    def dau_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, DAULayer)]

    def validate_invariants(self):
        for _, layer in self.dau_layers():
            layer.params.validate(layer.cfg)
