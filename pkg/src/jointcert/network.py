"""Feed-forward network with a flat parameter vector and exact reverse-mode gradients.

Parameters of all layers live in one contiguous ``theta`` array, laid out
layer by layer as (weight, bias). Layers hold views into it, so an in-place
update of ``theta`` is immediately visible to every layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor_ops as ops
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class Affine:
    out_dim: int


@dataclass(frozen=True)
class Conv:
    filters: int
    kh: int
    kw: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Affine, Conv, ReLU, Flatten]

_SPEC_TYPES = {"affine": Affine, "conv": Conv, "relu": ReLU, "flatten": Flatten}
_SPEC_NAMES = {v: k for k, v in _SPEC_TYPES.items()}


def spec_to_dict(spec: LayerSpec) -> dict:
    d = {"type": _SPEC_NAMES[type(spec)]}
    d.update(spec.__dict__)
    return d


def spec_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _SPEC_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    try:
        return _SPEC_TYPES[kind](**d)
    except TypeError as exc:
        raise ValueError(f"bad fields for {kind} layer: {exc}") from None


def mlp(in_dim: int, hidden: list[int], num_classes: int) -> list[LayerSpec]:
    specs: list[LayerSpec] = []
    for width in hidden:
        specs += [Affine(width), ReLU()]
    specs.append(Affine(num_classes))
    return specs


@dataclass
class Layer:
    spec: LayerSpec
    in_shape: tuple
    out_shape: tuple
    w_shape: tuple | None = None
    b_shape: tuple | None = None
    offset: int = 0

    @property
    def n_params(self) -> int:
        if self.w_shape is None:
            return 0
        return int(np.prod(self.w_shape) + np.prod(self.b_shape))

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.w_shape[1:]))


def _shape_layers(specs, input_shape) -> list[Layer]:
    layers = []
    shape = tuple(input_shape)
    offset = 0
    for i, spec in enumerate(specs):
        if isinstance(spec, Affine):
            if len(shape) != 1:
                raise DimensionError(f"layer {i}: Affine needs a flat input, got shape {shape}")
            layer = Layer(spec, shape, (spec.out_dim,), (spec.out_dim, shape[0]), (spec.out_dim,))
        elif isinstance(spec, Conv):
            if len(shape) != 3:
                raise DimensionError(f"layer {i}: Conv needs a (C,H,W) input, got shape {shape}")
            c, h, w = shape
            if spec.kh > h or spec.kw > w or spec.stride < 1:
                raise DimensionError(f"layer {i}: kernel {spec.kh}x{spec.kw}/{spec.stride} does not fit {h}x{w}")
            out = (spec.filters, ops.conv_output_size(h, spec.kh, spec.stride),
                   ops.conv_output_size(w, spec.kw, spec.stride))
            layer = Layer(spec, shape, out, (spec.filters, c, spec.kh, spec.kw), (spec.filters,))
        elif isinstance(spec, ReLU):
            layer = Layer(spec, shape, shape)
        elif isinstance(spec, Flatten):
            layer = Layer(spec, shape, (int(np.prod(shape)),))
        else:
            raise TypeError(f"not a layer spec: {spec!r}")
        layer.offset = offset
        offset += layer.n_params
        layers.append(layer)
        shape = layer.out_shape
    return layers


class Network:
    """Ordered layer stack ``f_theta`` over inputs of shape ``input_shape``."""

    def __init__(self, specs, input_shape, theta=None):
        self.specs = list(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = _shape_layers(self.specs, self.input_shape)
        n = sum(layer.n_params for layer in self.layers)
        if theta is None:
            theta = np.zeros(n)
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise DimensionError(f"theta has {theta.size} entries, layers need {n}")
        self.theta = theta

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_shape[0]

    @property
    def n_params(self) -> int:
        return self.theta.size

    def params(self, i: int):
        """(weight, bias) views into ``theta`` for layer ``i``."""
        layer = self.layers[i]
        if layer.w_shape is None:
            return None, None
        nw = int(np.prod(layer.w_shape))
        w = self.theta[layer.offset:layer.offset + nw].reshape(layer.w_shape)
        b = self.theta[layer.offset + nw:layer.offset + layer.n_params]
        return w, b

    def grad_views(self, grad: np.ndarray, i: int):
        layer = self.layers[i]
        nw = int(np.prod(layer.w_shape))
        return (grad[layer.offset:layer.offset + nw].reshape(layer.w_shape),
                grad[layer.offset + nw:layer.offset + layer.n_params])

    def copy(self) -> "Network":
        return Network(self.specs, self.input_shape, self.theta.copy())

    def __call__(self, x):
        return forward(self, x)[0]


def init_network(specs, input_shape, seed: int) -> Network:
    """Gaussian fan-in init (std ``sqrt(2/fan_in)``), zero biases."""
    net = Network(specs, input_shape)
    rng = np.random.default_rng(seed)
    for i, layer in enumerate(net.layers):
        if layer.w_shape is None:
            continue
        w, _ = net.params(i)
        w[...] = rng.standard_normal(layer.w_shape) * np.sqrt(2.0 / layer.fan_in)
    return net


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)   # h^(l-1) per layer
    outputs: list = field(default_factory=list)  # z^(l) or h^(l) per layer
    batched: bool = True


def _batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], False
    if x.shape[1:] != net.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match network input {net.input_shape}")
    return x, True


def forward(net: Network, x):
    """Logits for ``x`` (single example or leading batch axis) plus the activation cache."""
    h, batched = _batch(net, x)
    cache = ForwardCache(batched=batched)
    for i, layer in enumerate(net.layers):
        cache.inputs.append(h)
        spec = layer.spec
        if isinstance(spec, Affine):
            w, b = net.params(i)
            h = h @ w.T + b
        elif isinstance(spec, Conv):
            w, b = net.params(i)
            h = ops.conv2d(h, w, b, spec.stride)
        elif isinstance(spec, ReLU):
            h = ops.relu(h)
        else:
            h = h.reshape(h.shape[0], -1)
        cache.outputs.append(h)
    return (h if batched else h[0]), cache


def cross_entropy(logits, y):
    """Softmax cross-entropy and its logit gradient.

    For a batch ``(B, K)`` the loss is the batch mean and ``dlogits`` is
    already divided by ``B``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(y))
    k = z.shape[1]
    if y.shape != (z.shape[0],):
        raise DimensionError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    if np.any(y < 0) or np.any(y >= k):
        raise ContractError(f"label out of range for {k} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, y]
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, y] -= 1.0
    if single:
        return float(losses[0]), probs[0]
    return float(losses.mean()), probs / z.shape[0]


def cross_entropy_per_example(logits, y) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(z.shape[0]), y]


def backward(net: Network, cache: ForwardCache, dlogits, need_input_grad: bool = True):
    """Reverse pass. Returns ``(grad_theta, grad_input)``; gradients sum over the batch."""
    if len(cache.inputs) != len(net.layers):
        raise ContractError("cache does not belong to this network")
    d = np.asarray(dlogits, dtype=np.float64)
    if not cache.batched:
        d = d[None]
    if d.shape != cache.outputs[-1].shape:
        raise DimensionError(f"dlogits shape {d.shape} does not match logits {cache.outputs[-1].shape}")
    grad = np.zeros(net.n_params)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        spec = layer.spec
        h_in = cache.inputs[i]
        want_dx = i > 0 or need_input_grad
        if isinstance(spec, Affine):
            w, _ = net.params(i)
            gw, gb = net.grad_views(grad, i)
            gw += d.T @ h_in
            gb += d.sum(axis=0)
            d = d @ w if want_dx else None
        elif isinstance(spec, Conv):
            w, _ = net.params(i)
            gw, gb = net.grad_views(grad, i)
            dx, dk, db = ops.conv2d_backward(d, h_in, w, spec.stride, want_dx)
            gw += dk
            gb += db
            d = dx
        elif isinstance(spec, ReLU):
            d = d * ops.relu_grad_mask(h_in)
        else:
            d = d.reshape(h_in.shape)
    if d is not None and not cache.batched:
        d = d[0]
    return grad, d


def apply_update(net: Network, direction, step: float) -> None:
    """``theta <- theta - step * direction`` in place."""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != net.theta.shape:
        raise DimensionError(f"direction length {direction.size} != theta length {net.theta.size}")
    net.theta -= step * direction


def predict(net: Network, x, chunk: int = 2048) -> np.ndarray:
    """Argmax class per example; ties resolve to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    out = [np.argmax(forward(net, x[i:i + chunk])[0], axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
