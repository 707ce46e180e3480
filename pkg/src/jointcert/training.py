"""Joint adversarial + IBP training loop.

One call to :func:`train` runs warm-up (clean, then FGSM-adversarial
descent), followed by ``total_steps`` joint steps. Each joint step:

1. draws a batch and perturbs it with FGSM + random start at the current
   radius ``eps_t``;
2. computes the gradients of the adversarial CE and of the abstract loss;
3. folds the *previous* step's gradients into the moment estimates and
   derives the objective weights from them and the batch FOSC;
4. applies the combined gradient through the parameter optimizer.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, fields, asdict
from typing import NamedTuple

import numpy as np

from . import attacks
from .data_io import Dataset, batch_stream, batches_per_epoch
from .errors import CheckpointError, ConfigError, DimensionError, TrainingDivergedError
from .interval_bounds import abstract_loss, margin_lower_bounds
from .joint_optimizer import (MomentState, WeightTriple, baseline_weights, combine_gradients,
                              compute_weights, update_moments)
from .network import (Network, apply_update, backward, cross_entropy, forward, init_network,
                      spec_from_dict, spec_to_dict)

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "phase", "eps_t", "c_t", "fosc", "loss_adv", "loss_ibp",
               "kappa_adv", "kappa_ibp", "kappa_reg", "lr"]
FORMAT_VERSION = 1
MODES = ("joint", "baseline")
OPTIMIZERS = ("adam", "sgd")
UNITS = ("steps", "epochs")


@dataclass
class TrainConfig:
    """Training hyperparameters. Counts are in optimizer steps unless
    ``schedule_unit`` is ``"epochs"``, in which case :func:`resolve_units`
    converts them using the training-set size."""
    eps_train: float = 0.1
    T_nat: int = 0
    T_adv: int = 0
    R: int = 1
    T_prime: int = 1
    c_max: float | str = 1e-4          # number, or "auto" to measure after warm-up
    beta1: float = 0.9
    beta2: float = 0.99
    total_steps: int = 0
    batch_size: int = 256
    lr_schedule: list = field(default_factory=lambda: [[0, 5e-4]])
    seed: int = 0
    mode: str = "joint"
    optimizer: str = "adam"
    schedule_unit: str = "steps"
    model: list = field(default_factory=list)
    data: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("T_nat", "T_adv", "total_steps"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.R < 1 or self.T_prime < 1:
            raise ConfigError("R and T_prime must be >= 1")
        if self.eps_train < 0:
            raise ConfigError("eps_train must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule_unit not in UNITS:
            raise ConfigError(f"schedule_unit must be one of {UNITS}")
        if isinstance(self.c_max, str):
            if self.c_max != "auto":
                raise ConfigError("c_max must be a number or 'auto'")
        elif self.c_max < 0:
            raise ConfigError("c_max must be >= 0")
        if not self.lr_schedule:
            raise ConfigError("lr_schedule needs at least one breakpoint")
        starts = [float(s) for s, _ in self.lr_schedule]
        if starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("lr_schedule breakpoints must start at 0 and strictly increase")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_units(config: TrainConfig, n_train: int) -> TrainConfig:
    """Return a copy of ``config`` with every count expressed in steps."""
    if config.schedule_unit == "steps":
        return config
    per = batches_per_epoch(n_train, config.batch_size)
    d = config.to_dict()
    for name in ("T_nat", "T_adv", "R", "T_prime", "total_steps"):
        d[name] = int(round(d[name] * per))
    d["lr_schedule"] = [[int(round(s * per)), lr] for s, lr in d["lr_schedule"]]
    d["schedule_unit"] = "steps"
    return TrainConfig.from_dict(d)


def eps_schedule(t: int, eps_train: float, t_start: int, R: int) -> float:
    """Linear ramp from 0 at ``t_start`` to ``eps_train`` at ``t_start + R``."""
    if R < 1:
        raise ConfigError("R must be >= 1")
    frac = min(max((t - t_start) / R, 0.0), 1.0)
    return eps_train * frac


def fosc_threshold(t: int, c_max: float, R: int, T_prime: int) -> float:
    if T_prime < 1:
        raise ConfigError("T_prime must be >= 1")
    return float(np.clip(c_max - (t - R) * c_max / T_prime, 0.0, c_max))


def lr_at(schedule, step: int) -> float:
    lr = float(schedule[0][1])
    for start, value in schedule:
        if step >= start:
            lr = float(value)
    return lr


class Adam:
    """Per-coordinate adaptive step applied to an already-combined gradient."""

    def __init__(self, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def direction(self, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m = self.m / (1 - self.beta1 ** self.t)
        v = self.v / (1 - self.beta2 ** self.t)
        return m / (np.sqrt(v) + self.eps)


class SGD:
    def direction(self, g: np.ndarray) -> np.ndarray:
        return g


def make_optimizer(name: str, n: int):
    return Adam(n) if name == "adam" else SGD()


class TrainResult(NamedTuple):
    net: Network
    log: list
    moments: MomentState


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} became non-finite ({value}) at step {step}")


def _clean_grad(net, x, y):
    logits, cache = forward(net, x)
    loss, dlogits = cross_entropy(logits, y)
    grad, _ = backward(net, cache, dlogits, need_input_grad=False)
    return loss, grad


def _adv_loss_grad_fosc(net, x, x_adv, y, eps):
    """Batch adversarial CE, its theta-gradient and the batch-mean FOSC, from one backward pass."""
    logits, cache = forward(net, x_adv)
    loss, dlogits = cross_entropy(logits, y)
    grad, gx = backward(net, cache, dlogits)
    # dlogits carries a 1/B factor; undo it for per-example input gradients
    gx = gx * len(y)
    fosc = float(np.mean(attacks.fosc_from_grad(x, x_adv, gx, eps)))
    return loss, grad, fosc


def warmup(net: Network, stream, T_nat: int, T_adv: int, rng: np.random.Generator,
           eps: float, optimizer, lr_schedule, step_offset: int = 0) -> int:
    """Clean-loss descent for ``T_nat`` steps, then FGSM-adversarial descent for ``T_adv``.

    Returns the number of steps taken (for the global learning-rate index).
    """
    step = step_offset
    for _ in range(T_nat):
        x, y = next(stream)
        loss, grad = _clean_grad(net, x, y)
        _check_finite(loss, "warm-up clean loss", step)
        apply_update(net, optimizer.direction(grad), lr_at(lr_schedule, step))
        step += 1
    for _ in range(T_adv):
        x, y = next(stream)
        x_adv = attacks.fgsm_random_init(net, x, y, eps, rng)
        loss, grad = _clean_grad(net, x_adv, y)
        _check_finite(loss, "warm-up adversarial loss", step)
        apply_update(net, optimizer.direction(grad), lr_at(lr_schedule, step))
        step += 1
    return step - step_offset


def estimate_c_max(net: Network, ds: Dataset, eps: float, rng: np.random.Generator,
                   batch_size: int = 256) -> float:
    """Mean FOSC of FGSM examples over (at most) one pass of ``ds``."""
    vals = []
    for i in range(0, len(ds), batch_size):
        x, y = ds.images[i:i + batch_size], ds.labels[i:i + batch_size]
        x_adv = attacks.fgsm_random_init(net, x, y, eps, rng)
        vals.append(attacks.fosc_values(net, x, x_adv, y, eps))
    return float(np.mean(np.concatenate(vals)))


def build_network(config: TrainConfig, input_shape) -> Network:
    if not config.model:
        raise ConfigError("config.model lists no layers")
    try:
        specs = [spec_from_dict(d) for d in config.model]
        return init_network(specs, input_shape, config.seed)
    except (ValueError, DimensionError) as exc:
        raise ConfigError(f"bad model: {exc}") from None


def train(config: TrainConfig, dataset: Dataset, net: Network | None = None) -> TrainResult:
    """Warm-up followed by ``total_steps`` joint (or fixed-weight baseline) steps."""
    config = resolve_units(config, len(dataset))
    if net is None:
        net = build_network(config, dataset.input_shape)
    if net.input_shape != dataset.input_shape:
        raise DimensionError(f"dataset inputs {dataset.input_shape} do not match network {net.input_shape}")
    if net.num_classes != dataset.num_classes:
        raise DimensionError(f"network has {net.num_classes} outputs, dataset {dataset.num_classes} classes")

    stream = batch_stream(dataset, config.batch_size, config.seed)
    attack_rng = np.random.default_rng([config.seed, 1])
    optimizer = make_optimizer(config.optimizer, net.n_params)
    n_warm = warmup(net, stream, config.T_nat, config.T_adv, attack_rng, config.eps_train,
                    optimizer, config.lr_schedule)

    c_max = config.c_max
    if c_max == "auto":
        c_max = estimate_c_max(net, dataset, config.eps_train, np.random.default_rng([config.seed, 2]),
                               config.batch_size)
        log.info("c_max measured after warm-up: %g", c_max)

    moments = MomentState.zeros(net.n_params, config.beta1, config.beta2)
    prev = None
    rows = []
    for t in range(config.total_steps):
        c_t = fosc_threshold(t, c_max, config.R, config.T_prime)
        eps_t = eps_schedule(t, config.eps_train, 0, config.R)
        lr = lr_at(config.lr_schedule, n_warm + t)
        x, y = next(stream)
        x_adv = attacks.fgsm_random_init(net, x, y, eps_t, attack_rng)
        loss_adv, g_adv, fosc = _adv_loss_grad_fosc(net, x, x_adv, y, eps_t)
        loss_ibp, g_ibp = abstract_loss(margin_lower_bounds(net, x, eps_t, y))
        _check_finite(loss_adv, "adversarial loss", t)
        _check_finite(loss_ibp, "abstract loss", t)

        if config.mode == "baseline":
            w = baseline_weights()
        else:
            if prev is not None:
                update_moments(moments, *prev)
            w = compute_weights(moments, fosc, c_t)
        g_final = combine_gradients(w, g_adv, g_ibp, loss_ibp)
        apply_update(net, optimizer.direction(g_final), lr)
        prev = (g_adv, g_ibp)
        rows.append({"step": t, "phase": w.case, "eps_t": eps_t, "c_t": c_t, "fosc": fosc,
                     "loss_adv": loss_adv, "loss_ibp": loss_ibp, "kappa_adv": w.kappa_adv,
                     "kappa_ibp": w.kappa_ibp, "kappa_reg": w.kappa_reg, "lr": lr})
    if not np.all(np.isfinite(net.theta)):
        raise TrainingDivergedError("parameters became non-finite")
    return TrainResult(net, rows, moments)


def format_log_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])
    return buf.getvalue()


def write_log_csv(rows, path: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(format_log_csv(rows))


def checkpoint_dumps(net: Network, optimizer_state: MomentState | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "layer_specs": [spec_to_dict(s) for s in net.specs],
        "theta": net.theta.tolist(),
    }
    if optimizer_state is not None:
        doc["optimizer_state"] = optimizer_state.to_dict()
    return json.dumps(doc)


def checkpoint_save(net: Network, optimizer_state: MomentState | None, path: str) -> None:
    with open(path, "w") as f:
        f.write(checkpoint_dumps(net, optimizer_state))


def checkpoint_loads(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint JSON: {exc}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError("checkpoint lacks format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {doc['format_version']} "
                              f"(this build reads {FORMAT_VERSION})")
    try:
        specs = [spec_from_dict(s) for s in doc["layer_specs"]]
        net = Network(specs, doc["input_shape"], np.array(doc["theta"], dtype=np.float64))
        state = doc.get("optimizer_state")
        state = MomentState.from_dict(state) if state is not None else None
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint: {exc}") from None
    return net, state


def checkpoint_load(path: str):
    with open(path) as f:
        return checkpoint_loads(f.read())
