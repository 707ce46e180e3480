import numpy as np
import pytest

from jointcert.interval_bounds import margin_lower_bounds
from jointcert.network import Affine, Conv, Flatten, Network, ReLU, forward, init_network

# criterion number -> (passed, detail); filled by test_acceptance, printed at session end
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mlp(rng, in_dim=None, depth=None, classes=None, max_width=32):
    """Random MLP with <= 4 affine layers and widths <= max_width; biases nonzero."""
    in_dim = in_dim or int(rng.integers(2, 9))
    depth = depth or int(rng.integers(1, 5))
    classes = classes or int(rng.integers(2, 6))
    specs = []
    for _ in range(depth - 1):
        specs += [Affine(int(rng.integers(2, max_width + 1))), ReLU()]
    specs.append(Affine(classes))
    net = init_network(specs, (in_dim,), int(rng.integers(1 << 30)))
    net.theta += rng.normal(0, 0.1, net.n_params)
    return net


def random_convnet(rng, channels=2, size=7):
    specs = [Conv(3, 3, 3, 2), ReLU(), Flatten(), Affine(8), ReLU(), Affine(4)]
    net = init_network(specs, (channels, size, size), int(rng.integers(1 << 30)))
    net.theta += rng.normal(0, 0.05, net.n_params)
    return net


def kink_pattern(net: Network, x, eps=None, y=None) -> np.ndarray:
    """Boolean fingerprint of every piecewise-linear branch the losses depend on.

    Covers ReLU masks of the forward pass, ReLU masks of both IBP bounds and
    the sign split of every weight. Finite differences are only meaningful
    when this pattern is the same at theta+h and theta-h.
    """
    parts = [net.theta > 0, net.theta < 0]
    _, cache = forward(net, x)
    parts += [np.ravel(h > 0) for h in cache.outputs]
    if eps is not None:
        mb = margin_lower_bounds(net, x, eps, y)
        for b in mb.cache.bounds_in:
            parts += [np.ravel(b.lower > 0), np.ravel(b.upper > 0)]
        parts.append(np.ravel(mb.cache.spec_weight > 0))
    return np.concatenate(parts)


def fd_check(loss_fn, net: Network, analytic, pattern_fn=None, h=1e-5, floor=1e-6):
    """Max relative error of ``analytic`` against central differences of ``loss_fn(theta)``.

    Coordinates whose +-h perturbation changes ``pattern_fn`` (a kink inside
    the stencil) are skipped; returns ``(max_rel_err, n_checked)``.
    """
    theta = net.theta.copy()
    worst, checked = 0.0, 0
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        if pattern_fn is not None and not np.array_equal(pattern_fn(theta + e), pattern_fn(theta - e)):
            continue
        num = (loss_fn(theta + e) - loss_fn(theta - e)) / (2 * h)
        rel = abs(num - analytic[i]) / max(abs(num), abs(analytic[i]), floor)
        worst = max(worst, rel)
        checked += 1
    return worst, checked
