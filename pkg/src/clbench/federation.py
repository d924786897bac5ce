"""FedAvg / FedProx simulation: clients run local steps, the server averages.

The server only ever sees :class:`ClientUpdate` objects, which hold a
parameter vector and scalars. Raw samples stay inside :class:`Client`.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore
from .errors import ConfigError, ProtocolError
from .numcore import Rng
from .segmodel import Prepared, SegModel, mean_loss
from .training import OptimizerSpec, run_steps


def model_nbytes(model_or_params) -> int:
    """Serialized size of a model: its float64 parameter payload."""
    params = getattr(model_or_params, "params", model_or_params)
    return int(np.asarray(params, dtype=np.float64).nbytes)


def compute_rounds(E: int, N_T: int, M: int, B: int, s: int) -> int:
    """Rounds giving FL clients the same number of gradient steps as E local epochs."""
    for name, v in (("E", E), ("N_T", N_T), ("M", M), ("B", B), ("s", s)):
        if v <= 0:
            raise ConfigError(f"{name} must be positive")
    return max(1, -(-(E * N_T) // (M * B * s)))


@dataclass(frozen=True)
class FlConfig:
    strategy: str = "fedavg"
    mu: float = 0.0
    local_steps: int = 20
    batch_size: int = 8
    rounds: int = 1
    weights: tuple | None = None
    optimizer: OptimizerSpec = OptimizerSpec()
    train_dropout: bool = True

    def __post_init__(self):
        if self.strategy not in ("fedavg", "fedprox"):
            raise ConfigError(f"unknown FL strategy {self.strategy!r}")
        if self.local_steps < 1 or self.rounds < 1 or self.batch_size < 1:
            raise ConfigError("local steps, rounds and batch size must be >= 1")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if self.weights is not None:
            if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
                raise ConfigError("client weights must be non-negative and sum to 1")


@dataclass
class Client:
    center_id: str
    data: list  # list[Prepared]
    rng: Rng

    @property
    def n_samples(self) -> int:
        return len(self.data)

    def local_update(self, global_model: SegModel, round_idx: int, config: FlConfig) -> "ClientUpdate":
        return local_update(self, global_model, round_idx, config)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    params: np.ndarray
    n_steps: int
    loss_pre: float
    loss_post: float
    seconds: float


@dataclass(frozen=True)
class ClientRoundStats:
    client_id: str
    steps: int
    loss_pre: float
    loss_post: float
    bytes_up: int
    bytes_down: int
    seconds: float


@dataclass
class RoundLog:
    round: int
    clients: list = field(default_factory=list)
    checksum: int = 0

    @property
    def total_bytes(self) -> int:
        return sum(c.bytes_up + c.bytes_down for c in self.clients)


def local_update(client: Client, global_model: SegModel, round_idx: int, config: FlConfig) -> ClientUpdate:
    if not client.data:
        raise ProtocolError(f"client {client.center_id} has no training data")
    t0 = time.perf_counter()
    loss_pre = mean_loss(global_model, client.data)
    anchor = global_model.params if config.strategy == "fedprox" else None
    model, _ = run_steps(global_model, client.data, config.optimizer.fresh(), config.local_steps,
                         config.batch_size, client.rng, start_step=round_idx * config.local_steps,
                         anchor=anchor, mu=config.mu, dropout=config.train_dropout)
    loss_post = mean_loss(model, client.data)
    return ClientUpdate(client.center_id, model.params, config.local_steps, loss_pre, loss_post,
                        time.perf_counter() - t0)


class Server:
    def __init__(self, model: SegModel, weights: Sequence[float]):
        self.model = model
        self.weights = [float(w) for w in weights]
        self.logs: list[RoundLog] = []

    def broadcast(self) -> SegModel:
        return self.model

    def aggregate(self, updates: Sequence[ClientUpdate]) -> SegModel:
        if len(updates) != len(self.weights):
            raise ProtocolError(f"expected {len(self.weights)} updates, got {len(updates)}")
        new = aggregate([u.params for u in updates], self.weights)
        size = model_nbytes(self.model)
        log = RoundLog(len(self.logs), checksum=numcore.checksum(new))
        for u in updates:
            log.clients.append(ClientRoundStats(u.client_id, u.n_steps, u.loss_pre, u.loss_post,
                                                size, size, u.seconds))
        self.logs.append(log)
        self.model = self.model.with_params(new)
        return self.model


def aggregate(models: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    return numcore.weighted_mean(models, weights)


def default_weights(clients: Sequence[Client]) -> list[float]:
    total = sum(c.n_samples for c in clients)
    return [c.n_samples / total for c in clients]


def run_federated(clients: Sequence[Client], config: FlConfig, init: SegModel,
                  workers: int = 1) -> tuple[SegModel, list[RoundLog]]:
    if not clients:
        raise ProtocolError("federation needs at least one training client")
    weights = list(config.weights) if config.weights is not None else default_weights(clients)
    if len(weights) != len(clients):
        raise ConfigError("one weight per client is required")
    server = Server(init, weights)

    def work(args):
        client, model, r = args
        try:
            return client.local_update(model, r, config)
        except Exception as exc:
            raise ProtocolError(f"client {client.center_id}: {exc}") from exc

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for r in range(config.rounds):
            model = server.broadcast()
            jobs = [(c, model, r) for c in clients]
            updates = list(pool.map(work, jobs)) if pool else [work(j) for j in jobs]
            server.aggregate(updates)
    finally:
        if pool:
            pool.shutdown()
    return server.model, server.logs


def fl_bytes(M: int, model_size: int, R: int) -> int:
    return 2 * M * model_size * R


ROUNDLOG_COLUMNS = ["round", "client", "loss_pre", "loss_post", "bytes_up", "bytes_down", "seconds"]


def write_roundlogs(logs: Sequence[RoundLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROUNDLOG_COLUMNS)
        for log in logs:
            for c in log.clients:
                w.writerow([log.round, c.client_id, repr(c.loss_pre), repr(c.loss_post),
                            c.bytes_up, c.bytes_down, f"{c.seconds:.6f}"])


def rounds_for_plan(E: int, train_sizes: Sequence[int], B: int, s: int) -> int:
    return compute_rounds(E, sum(train_sizes), len(train_sizes), B, s)


def local_epochs_from_steps(K: int, train_sizes: Sequence[int], B: int) -> int:
    """Mean over clients of the epochs each one completes in K steps (at least 1)."""
    per = [K / math.ceil(n / min(B, n)) for n in train_sizes]
    return max(1, round(sum(per) / len(per)))
