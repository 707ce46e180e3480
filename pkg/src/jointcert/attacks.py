"""l-inf attacks (FGSM with random start, multi-step PGD) and the FOSC
adversarial-strength measure.

All functions work on batches ``(B, *input_shape)`` and draw randomness from
the ``numpy.random.Generator`` they are given, so a fixed seed reproduces the
same perturbations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .network import Network, backward, cross_entropy_per_example, forward

BALL_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    eps: float
    pgd_steps: int = 200
    pgd_step_size: float | None = None   # None -> eps / 4
    fgsm_step_factor: float = 1.25

    def __post_init__(self):
        if self.eps < 0:
            raise ContractError("eps must be non-negative")
        if self.pgd_steps < 1:
            raise ContractError("pgd_steps must be >= 1")
        if self.fgsm_step_factor <= 0 or (self.pgd_step_size is not None and self.pgd_step_size <= 0):
            raise ContractError("step sizes must be positive")

    @property
    def step_size(self) -> float:
        return self.eps / 4 if self.pgd_step_size is None else self.pgd_step_size


def loss_and_input_grad(net: Network, x: np.ndarray, y: np.ndarray):
    """Per-example CE losses, their gradients w.r.t. ``x`` and the logits.

    Each row of the gradient is the gradient of that example's own loss (not
    of the batch mean).
    """
    logits, cache = forward(net, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    losses = cross_entropy_per_example(logits, y)
    probs[np.arange(len(y)), y] -= 1.0
    _, gx = backward(net, cache, probs)
    return losses, gx, logits


def project(x_adv, x, eps):
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _as_batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return x, y


def fgsm_random_init(net: Network, x, y, eps: float, rng: np.random.Generator,
                     step_factor: float = 1.25) -> np.ndarray:
    """Single signed-gradient step from a uniform random start inside the ball.

    ``x_adv = clip(x + clip(delta + a*sign(grad), -eps, eps), 0, 1)`` with
    ``delta ~ U[-eps, eps]`` and ``a = step_factor * eps``; the gradient is
    taken at ``x + delta``.
    """
    if eps < 0:
        raise ContractError("eps must be non-negative")
    x, y = _as_batch(x, y)
    if eps == 0:
        return x.copy()
    delta = rng.uniform(-eps, eps, size=x.shape)
    _, g, _ = loss_and_input_grad(net, x + delta, y)
    delta = np.clip(delta + step_factor * eps * np.sign(g), -eps, eps)
    return np.clip(x + delta, 0.0, 1.0)


def pgd(net: Network, x, y, eps: float, steps: int, step_size: float | None,
        rng: np.random.Generator | None, random_start: bool = True, include_clean: bool = True):
    """Projected signed-gradient ascent on the CE loss.

    Starts from a uniform point in the ball (or the center when
    ``random_start`` is false or ``rng`` is None). Among all visited iterates,
    and ``x`` itself when ``include_clean``, the one returned per example is a
    misclassified iterate if any exists, otherwise the one with the largest
    loss.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    x, y = _as_batch(x, y)
    if step_size is None:
        step_size = eps / 4
    n = len(y)
    best = x.copy()
    best_wrong = np.zeros(n, dtype=bool)
    best_loss = np.full(n, -np.inf)

    def keep(cand, logits, losses):
        nonlocal best_wrong, best_loss
        wrong = np.argmax(logits, axis=1) != y
        better = (wrong & ~best_wrong) | ((wrong == best_wrong) & (losses > best_loss))
        best[better] = cand[better]
        best_wrong = best_wrong | wrong
        best_loss = np.where(better, losses, best_loss)

    if include_clean:
        logits, _ = forward(net, x)
        keep(x, logits, cross_entropy_per_example(logits, y))
    if random_start and rng is not None and eps > 0:
        cur = project(x + rng.uniform(-eps, eps, size=x.shape), x, eps)
    else:
        cur = x.copy()
    for _ in range(steps):
        losses, g, logits = loss_and_input_grad(net, cur, y)
        keep(cur, logits, losses)
        cur = project(cur + step_size * np.sign(g), x, eps)
    logits, _ = forward(net, cur)
    keep(cur, logits, cross_entropy_per_example(logits, y))
    return best


def _check_ball(x, x_adv, eps):
    if np.any(np.abs(x_adv - x) > eps + BALL_TOL):
        raise ContractError("x_adv lies outside the eps-ball around x")


def fosc_values(net: Network, x, x_adv, y, eps: float) -> np.ndarray:
    """Per-example FOSC: ``eps*||g||_1 - <x_adv - x, g>`` with ``g`` the loss gradient at ``x_adv``."""
    x, y = _as_batch(x, y)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    _check_ball(x, x_adv, eps)
    _, g, _ = loss_and_input_grad(net, x_adv, y)
    return fosc_from_grad(x, x_adv, g, eps)


def fosc_from_grad(x, x_adv, g, eps: float) -> np.ndarray:
    n = g.shape[0]
    g = g.reshape(n, -1)
    diff = (np.asarray(x_adv) - np.asarray(x)).reshape(n, -1)
    return eps * np.abs(g).sum(axis=1) - (diff * g).sum(axis=1)


def fosc(net: Network, x, x_adv, y, eps: float) -> float:
    """FOSC of a single example (unbatched inputs)."""
    x = np.asarray(x, dtype=np.float64)
    return float(fosc_values(net, x[None], np.asarray(x_adv)[None], [y], eps)[0])


def fosc_batch(net: Network, xs, x_advs, ys, eps: float) -> float:
    """Mean FOSC over a batch."""
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) == 0:
        raise ContractError("empty batch")
    if len(xs) != len(x_advs) or len(xs) != len(np.atleast_1d(ys)):
        raise ContractError("batch lengths differ")
    return float(np.mean(fosc_values(net, xs, x_advs, ys, eps)))
