"""Mini-batch schedule and the inner optimization loop shared by every strategy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore
from .errors import ConfigError
from .numcore import OptimizerState, Rng
from .segmodel import Prepared, SegModel, prepared_loss_grad


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01

    def fresh(self) -> OptimizerState:
        if self.kind == "sgd":
            return numcore.sgd(self.lr)
        if self.kind == "adamw":
            return numcore.adamw(self.lr, self.weight_decay)
        raise ConfigError(f"unknown optimizer kind {self.kind!r}")


class BatchSampler:
    """Epoch-structured sampling without replacement.

    Step ``k`` belongs to epoch ``k // batches_per_epoch``; each epoch's order
    is a permutation drawn from its own sub-stream, so any step can be
    replayed without running the earlier ones.
    """

    def __init__(self, n: int, batch_size: int, rng: Rng):
        if n <= 0 or batch_size <= 0:
            raise ConfigError("sampler needs n > 0 and batch_size > 0")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.per_epoch = -(-n // self.batch_size)
        self.rng = rng
        self._epoch = -1
        self._perm = None

    def batch(self, step: int) -> np.ndarray:
        epoch, j = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._perm = self.rng.child("epoch", epoch).generator().permutation(self.n)
            self._epoch = epoch
        return self._perm[j * self.batch_size:(j + 1) * self.batch_size]


def run_steps(model: SegModel, data: Sequence[Prepared], opt: OptimizerState, n_steps: int,
              batch_size: int, rng: Rng, start_step: int = 0, anchor: np.ndarray | None = None,
              mu: float = 0.0, dropout: bool = True) -> tuple[SegModel, OptimizerState]:
    """Run ``n_steps`` optimizer steps; with ``anchor`` the proximal gradient mu*(theta - anchor) is added."""
    sampler = BatchSampler(len(data), batch_size, rng.child("batches"))
    params = model.params
    for step in range(start_step, start_step + n_steps):
        idx = sampler.batch(step)
        drop = rng.child("dropout", step) if dropout else None
        _, grad = prepared_loss_grad(model.with_params(params), [data[i] for i in idx], drop)
        if anchor is not None:
            grad = grad + mu * (params - anchor)
        opt, params = numcore.optimizer_step(opt, params, grad)
    return model.with_params(params), opt
