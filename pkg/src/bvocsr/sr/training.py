"""Mini-batch Adam training of ``ConvModel`` with plateau decay and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, DataError, NumericalError
from .model import ConvModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    lr_min: float = 1e-7
    early_stop_patience: int = 50
    max_epochs: int = 500
    batch_size: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr0:
            raise ConfigError(f"need 0 < lr_min <= lr0, got {self.lr_min}, {self.lr0}")
        for name in ("plateau_patience", "early_stop_patience", "max_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.99, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauSchedule:
    """Learning-rate decay on stalled validation loss, plus the early-stop counter.

    A validation loss counts as an improvement only if strictly below the best so
    far. After ``patience`` non-improving epochs in a row the rate is multiplied by
    ``factor`` (never below ``lr_min``) and the plateau counter restarts.
    """

    def __init__(self, lr0: float, patience: int = 10, factor: float = 0.1,
                 lr_min: float = 1e-7, stop_patience: int = 50):
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self.lr_min = lr_min
        self.stop_patience = stop_patience
        self.best = math.inf
        self.stagnant = 0  # epochs since the last improvement or decay
        self.since_best = 0  # epochs since the last improvement

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauSchedule":
        return cls(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor, cfg.lr_min,
                   cfg.early_stop_patience)

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns True if it improved on the best loss."""
        if val_loss < self.best:
            self.best = val_loss
            self.stagnant = 0
            self.since_best = 0
            return True
        self.stagnant += 1
        self.since_best += 1
        if self.stagnant >= self.patience:
            self.lr = max(self.lr * self.factor, self.lr_min)
            self.stagnant = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.stop_patience


@dataclass
class TrainResult:
    model: ConvModel
    history: list[dict] = field(default_factory=list)
    initial_val_loss: float = math.nan
    best_val_loss: float = math.nan
    best_epoch: int = 0
    stopped_early: bool = False


def _as_xy(data):
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 4 or y.ndim != 3 or x.shape[0] != y.shape[0]:
        raise DataError(f"expected X (N, C, H, W) and Y (N, aH, aW), got {x.shape}, {y.shape}")
    return x, y


def evaluate_loss(model: ConvModel, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    """Mean squared error of the unclipped forward pass over the full set."""
    total = 0.0
    for i in range(0, x.shape[0], batch):
        d = model.forward(x[i:i + batch]) - y[i:i + batch]
        total += float(np.sum(d * d))
    return total / y.size


def _check_finite(value: float, what: str, epoch: int):
    if not math.isfinite(value):
        raise NumericalError(f"{what} became {value} at epoch {epoch}; aborting training")


def train(model: ConvModel, train_data, val_data, cfg: TrainConfig = TrainConfig(),
          callback=None) -> TrainResult:
    """Fit ``model`` in place on ``(X, Y)`` pairs and return it with its loss history.

    The weights with the lowest validation loss are restored at the end. Runs
    are deterministic for a fixed ``cfg.rng_seed``.
    """
    xt, yt = _as_xy(train_data)
    xv, yv = _as_xy(val_data)
    if xt.shape[1:] != xv.shape[1:] or yt.shape[1:] != yv.shape[1:]:
        raise DataError("train and validation samples differ in shape")
    if yt.shape[1] != model.alpha * xt.shape[2]:
        raise DataError(f"targets are not {model.alpha}x the input size")

    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauSchedule.from_config(cfg)
    result = TrainResult(model)
    result.initial_val_loss = evaluate_loss(model, xv, yv)
    _check_finite(result.initial_val_loss, "validation loss", 0)
    best_params = model.copy_params()
    n = xt.shape[0]

    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            # overflow is caught by the finiteness check below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = model.loss_and_grads(xt[idx], yt[idx])
            _check_finite(loss, "training loss", epoch)
            opt.step(model.params, grads, lr)
            total += loss * idx.size
        train_loss = total / n
        with np.errstate(over="ignore", invalid="ignore"):
            val_loss = evaluate_loss(model, xv, yv)
        _check_finite(val_loss, "validation loss", epoch)
        improved = sched.step(val_loss)
        if improved:
            best_params = model.copy_params()
            result.best_epoch = epoch
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        result.history.append(rec)
        log.debug("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, lr)
        if callback is not None:
            callback(rec)
        if sched.should_stop:
            result.stopped_early = True
            break

    model.params = best_params
    result.best_val_loss = sched.best
    return result


def stack_patches(patches, drivers=()) -> tuple[np.ndarray, np.ndarray]:
    """``(X, Y)`` training arrays: stacked LR inputs and T_HR targets."""
    if not patches:
        raise DataError("no patches to stack")
    x = np.stack([p.stacked_input(drivers) for p in patches])
    y = np.stack([p.t_hr for p in patches])
    return x, y
