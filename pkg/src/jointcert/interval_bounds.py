"""Interval bound propagation (IBP), certified margin lower bounds and the
cross-entropy upper bound ("abstract loss") built from them.

Everything is batched over a leading axis. The backward pass is exact for the
piecewise-linear propagation: ``max(0, W)`` / ``min(0, W)`` split on the sign
of each weight (a weight of exactly 0 contributes no gradient) and ReLU
bounds use the same ``> 0`` mask as the ordinary network.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as ops
from .errors import ContractError, DimensionError
from .network import Affine, Conv, Flatten, Network, ReLU, _batch, cross_entropy

PIXEL_MIN = 0.0
PIXEL_MAX = 1.0


@dataclass
class BoundPair:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape:
            raise DimensionError(f"bound shapes differ: {self.lower.shape} vs {self.upper.shape}")

    def contains(self, v, tol: float = 0.0) -> np.ndarray:
        return (v >= self.lower - tol) & (v <= self.upper + tol)

    def is_valid(self) -> bool:
        return bool(np.all(self.lower <= self.upper))


def input_interval(x, eps: float) -> BoundPair:
    """The l-inf ball of radius ``eps`` around ``x`` intersected with the pixel box."""
    if eps < 0:
        raise ContractError(f"eps must be non-negative, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    return BoundPair(np.clip(x - eps, PIXEL_MIN, PIXEL_MAX), np.clip(x + eps, PIXEL_MIN, PIXEL_MAX))


def _split(w):
    return np.maximum(w, 0.0), np.minimum(w, 0.0)


def ibp_affine(b: BoundPair, w, bias) -> BoundPair:
    w = np.asarray(w, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if b.lower.shape[-1] != w.shape[1] or bias.shape != (w.shape[0],):
        raise DimensionError(f"bounds {b.lower.shape} incompatible with weight {w.shape} / bias {bias.shape}")
    wp, wn = _split(w)
    upper = b.lower @ wn.T + b.upper @ wp.T + bias
    lower = b.upper @ wn.T + b.lower @ wp.T + bias
    return BoundPair(lower, upper)


def ibp_conv(b: BoundPair, kernel, bias, stride: int) -> BoundPair:
    kp, kn = _split(np.asarray(kernel, dtype=np.float64))
    upper = ops.conv2d(b.lower, kn, None, stride) + ops.conv2d(b.upper, kp, bias, stride)
    lower = ops.conv2d(b.upper, kn, None, stride) + ops.conv2d(b.lower, kp, bias, stride)
    return BoundPair(lower, upper)


def ibp_activation(b: BoundPair) -> BoundPair:
    if not b.is_valid():
        raise ContractError("lower bound exceeds upper bound")
    return BoundPair(ops.relu(b.lower), ops.relu(b.upper))


def margin_matrix(y, num_classes: int) -> np.ndarray:
    """Rows ``e_y - e_j`` for every ``j != y``; shape ``(B, K-1, K)``."""
    y = np.atleast_1d(np.asarray(y))
    c = np.zeros((y.size, num_classes - 1, num_classes))
    for b, label in enumerate(y):
        others = [j for j in range(num_classes) if j != label]
        c[b, :, label] = 1.0
        c[b, np.arange(num_classes - 1), others] = -1.0
    return c


def other_classes(y, num_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    return np.array([[j for j in range(num_classes) if j != label] for label in y], dtype=np.int64)


def propagate(net: Network, bounds: BoundPair) -> list[BoundPair]:
    """Bounds after every layer of ``net`` (batched input bounds)."""
    out = []
    b = bounds
    for i, layer in enumerate(net.layers):
        spec = layer.spec
        if isinstance(spec, Affine):
            w, bias = net.params(i)
            b = ibp_affine(b, w, bias)
        elif isinstance(spec, Conv):
            w, bias = net.params(i)
            b = ibp_conv(b, w, bias, spec.stride)
        elif isinstance(spec, ReLU):
            b = ibp_activation(b)
        else:
            n = b.lower.shape[0]
            b = BoundPair(b.lower.reshape(n, -1), b.upper.reshape(n, -1))
        out.append(b)
    return out


@dataclass
class IBPCache:
    bounds_in: list = field(default_factory=list)  # BoundPair entering each layer
    spec_weight: np.ndarray | None = None          # C W of the merged last layer, (B, K-1, H)
    spec_matrix: np.ndarray | None = None          # C, (B, K-1, K)


@dataclass
class MarginBounds:
    """Certified lower bounds of ``z_y - z_j`` for all ``j != y``."""
    lower: np.ndarray
    y: np.ndarray
    batched: bool = True
    net: Network | None = None
    cache: IBPCache | None = None


def margin_lower_bounds(net: Network, x, eps: float, y) -> MarginBounds:
    """IBP margin lower bounds with the margin matrix folded into the final affine layer."""
    if not isinstance(net.layers[-1].spec, Affine):
        raise ContractError("margin bounds need a network ending in an affine layer")
    xb, batched = _batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if yb.shape != (xb.shape[0],):
        raise DimensionError(f"{yb.size} labels for {xb.shape[0]} inputs")
    k = net.num_classes
    if np.any(yb < 0) or np.any(yb >= k):
        raise ContractError(f"label out of range for {k} classes")
    cache = IBPCache()
    b = input_interval(xb, eps)
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers[:-1]):
        cache.bounds_in.append(b)
        spec = layer.spec
        if isinstance(spec, Conv):
            w, bias = net.params(i)
            b = ibp_conv(b, w, bias, spec.stride)
        elif isinstance(spec, Affine):
            w, bias = net.params(i)
            b = ibp_affine(b, w, bias)
        elif isinstance(spec, ReLU):
            b = ibp_activation(b)
        else:
            n = b.lower.shape[0]
            b = BoundPair(b.lower.reshape(n, -1), b.upper.reshape(n, -1))
    cache.bounds_in.append(b)
    w, bias = net.params(last)
    c = margin_matrix(yb, k)
    cw = np.einsum("bjk,kh->bjh", c, w)
    cb = np.einsum("bjk,k->bj", c, bias)
    cwp, cwn = _split(cw)
    lower = (np.einsum("bjh,bh->bj", cwp, b.lower) + np.einsum("bjh,bh->bj", cwn, b.upper) + cb)
    cache.spec_weight = cw
    cache.spec_matrix = c
    if not batched:
        return MarginBounds(lower[0], yb[0], False, net, cache)
    return MarginBounds(lower, yb, True, net, cache)


def pseudo_logits(lower: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Logit vector with 0 at the true class and ``-m_j`` elsewhere."""
    n, km1 = lower.shape
    u = np.zeros((n, km1 + 1))
    others = other_classes(y, km1 + 1)
    u[np.arange(n)[:, None], others] = -lower
    return u


def abstract_loss(mb: MarginBounds, y=None):
    """Cross-entropy of the worst-case pseudo-logits (an upper bound on robust loss).

    Returns ``(loss, grad_theta)``. ``grad_theta`` is None when ``mb`` was not
    produced by :func:`margin_lower_bounds` (no network to differentiate).
    Batched bounds give the batch-mean loss.
    """
    lower = np.asarray(mb.lower, dtype=np.float64)
    yb = np.atleast_1d(np.asarray(mb.y if y is None else y, dtype=np.int64))
    if y is not None and mb.y is not None and not np.array_equal(np.atleast_1d(mb.y), yb):
        raise ContractError("labels differ from those used to build the margin bounds")
    if lower.ndim == 1:
        lower = lower[None]
    u = pseudo_logits(lower, yb)
    loss, du = cross_entropy(u, yb)
    if mb.cache is None or mb.net is None:
        return loss, None
    others = other_classes(yb, lower.shape[1] + 1)
    dlower = -du[np.arange(len(yb))[:, None], others]
    return loss, ibp_backward(mb.net, mb.cache, dlower)


def ibp_backward(net: Network, cache: IBPCache, dmargin: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. theta of ``sum(dmargin * margin_lower)``."""
    grad = np.zeros(net.n_params)
    last = len(net.layers) - 1
    b = cache.bounds_in[last]
    cw = cache.spec_weight
    pos = cw > 0
    neg = cw < 0
    # d lower / d(CW) = h_lo where CW>0, h_up where CW<0
    dcw = dmargin[:, :, None] * (np.where(pos, b.lower[:, None, :], 0.0) + np.where(neg, b.upper[:, None, :], 0.0))
    gw, gb = net.grad_views(grad, last)
    gw += np.einsum("bjk,bjh->kh", cache.spec_matrix, dcw)
    gb += np.einsum("bjk,bj->k", cache.spec_matrix, dmargin)
    d_lo = np.einsum("bj,bjh->bh", dmargin, np.where(pos, cw, 0.0))
    d_up = np.einsum("bj,bjh->bh", dmargin, np.where(neg, cw, 0.0))
    for i in range(last - 1, -1, -1):
        spec = net.layers[i].spec
        b = cache.bounds_in[i]
        if isinstance(spec, Affine):
            w, _ = net.params(i)
            wp, wn = _split(w)
            gw, gb = net.grad_views(grad, i)
            # lower_out = lo Wp^T + up Wn^T + b ; upper_out = up Wp^T + lo Wn^T + b
            gw += np.where(w > 0, d_lo.T @ b.lower + d_up.T @ b.upper, 0.0)
            gw += np.where(w < 0, d_lo.T @ b.upper + d_up.T @ b.lower, 0.0)
            gb += d_lo.sum(axis=0) + d_up.sum(axis=0)
            if i > 0:
                d_lo, d_up = d_lo @ wp + d_up @ wn, d_up @ wp + d_lo @ wn
        elif isinstance(spec, Conv):
            w, _ = net.params(i)
            wp, wn = _split(w)
            gw, gb = net.grad_views(grad, i)
            s = spec.stride
            need = i > 0
            dl_lo_p, gk1, gb1 = ops.conv2d_backward(d_lo, b.lower, wp, s, need)
            dl_up_n, gk2, _ = ops.conv2d_backward(d_lo, b.upper, wn, s, need)
            du_up_p, gk3, gb2 = ops.conv2d_backward(d_up, b.upper, wp, s, need)
            du_lo_n, gk4, _ = ops.conv2d_backward(d_up, b.lower, wn, s, need)
            gw += np.where(w > 0, gk1 + gk3, 0.0) + np.where(w < 0, gk2 + gk4, 0.0)
            gb += gb1 + gb2
            if need:
                d_lo, d_up = dl_lo_p + du_lo_n, du_up_p + dl_up_n
        elif isinstance(spec, ReLU):
            d_lo = d_lo * ops.relu_grad_mask(b.lower)
            d_up = d_up * ops.relu_grad_mask(b.upper)
        else:
            d_lo = d_lo.reshape(b.lower.shape)
            d_up = d_up.reshape(b.upper.shape)
    return grad


def is_verified(mb) -> bool | np.ndarray:
    """True where every margin lower bound is strictly positive."""
    lower = mb.lower if isinstance(mb, MarginBounds) else np.asarray(mb, dtype=np.float64)
    lower = np.asarray(lower)
    if lower.ndim == 1:
        return bool(np.min(lower) > 0)
    return np.min(lower, axis=1) > 0
