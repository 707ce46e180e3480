"""Standard, IBP-verified and PGD error of a trained network."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .attacks import pgd
from .data_io import Dataset
from .errors import ContractError
from .interval_bounds import margin_lower_bounds
from .network import Network, predict

CHUNK = 1000


@dataclass
class EvalReport:
    model_id: str
    n_examples: int
    eps: float
    pgd_steps: int
    standard_error: float
    verified_error: float
    pgd_error: float

    def to_dict(self) -> dict:
        # field order is the JSON key order
        return {
            "model_id": self.model_id,
            "n_examples": self.n_examples,
            "eps": self.eps,
            "pgd_steps": self.pgd_steps,
            "standard_error": self.standard_error,
            "verified_error": self.verified_error,
            "pgd_error": self.pgd_error,
        }


def model_id(net: Network) -> str:
    return hashlib.sha256(net.theta.tobytes()).hexdigest()[:16]


def _nonempty(ds: Dataset) -> None:
    if len(ds) == 0:
        raise ContractError("empty dataset")


def standard_error(net: Network, ds: Dataset) -> float:
    _nonempty(ds)
    return float(np.mean(predict(net, ds.images) != ds.labels))


def margin_bounds_all(net: Network, ds: Dataset, eps: float) -> np.ndarray:
    """Lower margin bounds for every example, shape ``(N, K-1)``."""
    out = [margin_lower_bounds(net, ds.images[i:i + CHUNK], eps, ds.labels[i:i + CHUNK]).lower
           for i in range(0, len(ds), CHUNK)]
    return np.concatenate(out)


def verified_flags(net: Network, ds: Dataset, eps: float):
    """``(verified, predictions, min_margin_lower)`` per example.

    A point counts as verified only if it is classified correctly and all its
    margin lower bounds are strictly positive.
    """
    if eps < 0:
        raise ContractError("eps must be non-negative")
    preds = predict(net, ds.images)
    min_margin = margin_bounds_all(net, ds, eps).min(axis=1)
    verified = (preds == ds.labels) & (min_margin > 0)
    return verified, preds, min_margin


def ibp_verified_error(net: Network, ds: Dataset, eps: float) -> float:
    _nonempty(ds)
    verified, _, _ = verified_flags(net, ds, eps)
    return float(np.mean(~verified))


def pgd_predictions(net: Network, ds: Dataset, eps: float, steps: int = 200,
                    step_size: float | None = None, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    preds = []
    for i in range(0, len(ds), CHUNK):
        x, y = ds.images[i:i + CHUNK], ds.labels[i:i + CHUNK]
        x_adv = pgd(net, x, y, eps, steps, step_size, rng)
        preds.append(predict(net, x_adv))
    return np.concatenate(preds)


def pgd_error(net: Network, ds: Dataset, eps: float, steps: int = 200,
              step_size: float | None = None, seed: int = 0) -> float:
    _nonempty(ds)
    if steps < 1:
        raise ContractError("steps must be >= 1")
    return float(np.mean(pgd_predictions(net, ds, eps, steps, step_size, seed) != ds.labels))


def evaluate(net: Network, ds: Dataset, eps: float, pgd_steps: int = 200,
             step_size: float | None = None, seed: int = 0) -> EvalReport:
    return EvalReport(
        model_id=model_id(net),
        n_examples=len(ds),
        eps=float(eps),
        pgd_steps=int(pgd_steps),
        standard_error=standard_error(net, ds),
        verified_error=ibp_verified_error(net, ds, eps),
        pgd_error=pgd_error(net, ds, eps, pgd_steps, step_size, seed),
    )
