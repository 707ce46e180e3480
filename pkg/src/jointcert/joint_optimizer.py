"""Weights for combining the adversarial-loss and abstract-loss gradients.

The weights at step ``t`` are computed only from exponential moving averages
of gradients observed at steps ``< t`` so that they are independent of the
stochastic gradients they multiply.

Three cases, with bias-corrected moments ``m1, m2`` (gradient means) and
``v1, v2`` (gradient-norm means):

* ``<m1, m2> > 0``: move along the angular bisector of the two gradients.
* conflict and the attack is strong (FOSC <= threshold): follow the
  adversarial gradient, projected to not increase the abstract loss.
* conflict and the attack is weak: follow the abstract-loss gradient,
  projected against the adversarial one, plus a squared-loss regularizer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UndefinedStateError

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12

CASE_COLD = "cold"
CASE_BISECTOR = "bisector"
CASE_ADV = "adv_priority"
CASE_IBP = "ibp_priority"
CASE_FIXED = "fixed"


@dataclass
class MomentState:
    m1_hat: np.ndarray
    m2_hat: np.ndarray
    v1_hat: float = 0.0
    v2_hat: float = 0.0
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.99

    @classmethod
    def zeros(cls, n: int, beta1: float = 0.9, beta2: float = 0.99) -> "MomentState":
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("decay rates must lie in [0, 1)")
        return cls(np.zeros(n), np.zeros(n), 0.0, 0.0, 0, beta1, beta2)

    def to_dict(self) -> dict:
        return {
            "m1_hat": self.m1_hat.tolist(),
            "m2_hat": self.m2_hat.tolist(),
            "v1_hat": float(self.v1_hat),
            "v2_hat": float(self.v2_hat),
            "t": int(self.t),
            "beta1": float(self.beta1),
            "beta2": float(self.beta2),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MomentState":
        return cls(np.array(d["m1_hat"], dtype=np.float64), np.array(d["m2_hat"], dtype=np.float64),
                   float(d["v1_hat"]), float(d["v2_hat"]), int(d["t"]),
                   float(d["beta1"]), float(d["beta2"]))


@dataclass(frozen=True)
class WeightTriple:
    kappa_adv: float
    kappa_ibp: float
    kappa_reg: float
    case: str = ""

    def __iter__(self):
        return iter((self.kappa_adv, self.kappa_ibp, self.kappa_reg))


def update_moments(state: MomentState, g_adv_prev, g_ibp_prev) -> None:
    """Fold the previous step's gradients into the moving averages."""
    g1 = np.asarray(g_adv_prev, dtype=np.float64)
    g2 = np.asarray(g_ibp_prev, dtype=np.float64)
    if g1.shape != state.m1_hat.shape or g2.shape != state.m2_hat.shape:
        raise DimensionError("gradient length does not match moment state")
    b1, b2 = state.beta1, state.beta2
    state.m1_hat = b1 * state.m1_hat + (1 - b1) * g1
    state.m2_hat = b1 * state.m2_hat + (1 - b1) * g2
    state.v1_hat = b2 * state.v1_hat + (1 - b2) * float(np.linalg.norm(g1))
    state.v2_hat = b2 * state.v2_hat + (1 - b2) * float(np.linalg.norm(g2))
    state.t += 1


def bias_correct(state: MomentState):
    if state.t < 1:
        raise UndefinedStateError("moments have not been updated yet")
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    return state.m1_hat / c1, state.m2_hat / c1, state.v1_hat / c2, state.v2_hat / c2


def compute_weights(state: MomentState, fosc_value: float, c_t: float) -> WeightTriple:
    if state.t == 0:
        return WeightTriple(1.0, 0.0, 0.0, CASE_COLD)
    m1, m2, v1, v2 = bias_correct(state)
    if v1 < DEGENERATE_NORM or v2 < DEGENERATE_NORM:
        log.warning("degenerate gradient-norm moments (v1=%g, v2=%g); using adversarial gradient only", v1, v2)
        return WeightTriple(1.0, 0.0, 0.0, CASE_COLD)
    dot = float(m1 @ m2)
    if dot > 0:
        u = m1 / v1 + m2 / v2
        gamma = 0.5 * float((m1 + m2) @ u) / float(u @ u)
        return WeightTriple(gamma / v1, gamma / v2, 0.0, CASE_BISECTOR)
    if fosc_value <= c_t:
        return WeightTriple(1.0, -dot / v2 ** 2, 0.0, CASE_ADV)
    return WeightTriple(-dot / v1 ** 2, 1.0, 0.5, CASE_IBP)


def combine_gradients(w: WeightTriple, g_adv, g_ibp, loss_ibp: float) -> np.ndarray:
    """Gradient of ``k_adv*L_adv + k_ibp*L_ibp + k_reg*L_ibp**2``."""
    g_adv = np.asarray(g_adv, dtype=np.float64)
    g_ibp = np.asarray(g_ibp, dtype=np.float64)
    if g_adv.shape != g_ibp.shape:
        raise DimensionError("gradient lengths differ")
    return w.kappa_adv * g_adv + (w.kappa_ibp + 2.0 * w.kappa_reg * loss_ibp) * g_ibp


def baseline_weights() -> WeightTriple:
    return WeightTriple(1.0, 1.0, 0.0, CASE_FIXED)
