"""Shared training plumbing: hyperparameters, Adam, early stopping."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, TrainingError


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 500
    lambda_e: float = 0.1
    lambda_f: float = 1.0
    patience: int = 50
    seed: int = 0
    lr_decay: float = 0.01  # cosine-decay floor as a fraction of lr

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("invalid training hyperparameters")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Cosine decay from lr to lr*lr_decay across the epoch budget."""
        frac = min(epoch / max(self.epochs - 1, 1), 1.0)
        lo = self.lr * self.lr_decay
        return lo + 0.5 * (self.lr - lo) * (1.0 + np.cos(np.pi * frac))

    def with_seed(self, seed: int) -> "TrainHyper":
        return replace(self, seed=seed)


class Adam:
    def __init__(self, n: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr  # may be reassigned per epoch by a schedule
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class EarlyStopper:
    """Tracks the best validation loss and the parameters that produced it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_val = np.inf
        self.best_params = None
        self.best_epoch = -1
        self._since = 0

    def update(self, epoch: int, val_loss: float, params: np.ndarray) -> bool:
        """Returns True when training should stop."""
        if not np.isfinite(val_loss):
            raise TrainingError(
                f"validation loss became non-finite at epoch {epoch}; "
                f"last finite epoch was {self.best_epoch}"
            )
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_params = params.copy()
            self.best_epoch = epoch
            self._since = 0
            return False
        self._since += 1
        return self._since >= self.patience


def batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]
