"""DP-SGD (per-sample clipping plus Gaussian noise) and a Renyi-DP accountant.

Accounting conventions:

* consensus training: each client only touches its own data, so every
  client keeps its own ledger and the reported budget is the worst client;
* federated training: each client's ledger composes all of its local steps
  across rounds, and the federation stops as soon as the next round would
  push any client past the target budget.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import binom, gammaln, log_ndtr, logsumexp

from . import consensus, metrics, numcore
from .errors import ConfigError, NumericError
from .harness import preprocess_dataset, volume_ndim
from .federation import Client, default_weights, local_epochs_from_steps, rounds_for_plan
from .numcore import Rng
from .segmodel import Prepared, SegModel, forward, init_model, prepare, sample_loss_grad

DEFAULT_ORDERS = (1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0, 12.0, 16.0,
                  20.0, 24.0, 32.0, 48.0, 64.0)
DEFAULT_EPS_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5)


@dataclass(frozen=True)
class DpConfig:
    """DP-SGD settings. With a small clip norm every clipped gradient is nearly
    normalized, so the effective step length is about ``lr * clip``."""

    clip: float = 0.02
    sigma: float = 4.0
    delta: float = 1e-5
    lr: float = 20.0
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.clip > 0:
            raise ConfigError("clip norm must be > 0")
        if self.sigma < 0:
            raise ConfigError("noise multiplier must be >= 0")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")


def clip_and_noise(grads: Sequence[np.ndarray], config: DpConfig, rng: Rng,
                   denominator: float | None = None) -> np.ndarray:
    """Clip each per-sample gradient to norm ``clip``, sum, add N(0, (sigma*clip)^2) noise, divide.

    ``denominator`` defaults to the number of gradients; Poisson-sampled
    batches pass the expected batch size instead.
    """
    if len(grads) == 0:
        raise ConfigError("clip_and_noise needs at least one gradient")
    total = None
    for g in grads:
        g = numcore.as_params(g)
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise NumericError(f"non-finite per-sample gradient entry at index {int(bad[0])}")
        norm = float(np.linalg.norm(g))
        if norm > config.clip:
            g = g * (config.clip / norm)
        total = g.copy() if total is None else total + g
    if config.sigma > 0:
        total = total + rng.generator().normal(0.0, config.sigma * config.clip, size=total.shape)
    return total / (len(grads) if denominator is None else denominator)


# --- Renyi accountant --------------------------------------------------------

def _check_orders(orders) -> tuple:
    orders = tuple(float(a) for a in orders)
    if not orders or any(a <= 1 for a in orders):
        raise ConfigError("every Renyi order must be > 1")
    return orders


def _log_binom(n: int, k: int) -> float:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _sgm_integer(q: float, sigma: float, alpha: int) -> float:
    """RDP of the Poisson-subsampled Gaussian at integer order (binomial expansion)."""
    terms = []
    for k in range(alpha + 1):
        t = _log_binom(alpha, k) + (k * k - k) / (2.0 * sigma * sigma)
        if k:
            t += k * math.log(q)
        if alpha - k:
            t += (alpha - k) * math.log1p(-q)
        terms.append(t)
    return float(logsumexp(terms)) / (alpha - 1)


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(log_ndtr(-x * math.sqrt(2.0)))


def _log_sub(a: float, b: float) -> float:
    if b == -math.inf:
        return a
    if b >= a:
        return -math.inf  # the series terms cancel below float resolution
    return a + math.log1p(-math.exp(b - a))


def _sgm_fractional(q: float, sigma: float, alpha: float, cutoff: float = -30.0) -> float:
    """RDP of the Poisson-subsampled Gaussian at non-integer order.

    Splits the integral at the point where both mixture components have
    equal density and sums the two resulting binomial series until their
    terms become negligible.
    """
    log_a0 = log_a1 = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = float(binom(alpha, i))
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if coef > 0:
            log_a0 = float(np.logaddexp(log_a0, log_s0))
            log_a1 = float(np.logaddexp(log_a1, log_s1))
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < cutoff:
            break
    return float(np.logaddexp(log_a0, log_a1)) / (alpha - 1.0)


def rdp_increment(q: float, sigma: float, alpha: float) -> float:
    """One step's Renyi-DP at order ``alpha``; ``alpha / (2 sigma^2)`` when q = 1."""
    if not sigma > 0:
        raise ConfigError("noise multiplier must be > 0 for accounting")
    if not 0 < q <= 1:
        raise ConfigError("sampling rate must lie in (0, 1]")
    if alpha <= 1:
        raise ConfigError("Renyi order must be > 1")
    full = alpha / (2.0 * sigma * sigma)
    if q == 1.0:
        return full
    if float(alpha).is_integer():
        return min(full, _sgm_integer(q, sigma, int(alpha)))
    return min(full, _sgm_fractional(q, sigma, float(alpha)))


@dataclass(frozen=True)
class RdpLedger:
    """Accumulated Renyi-DP per order, stored as counts of identical mechanisms."""

    orders: tuple = DEFAULT_ORDERS
    terms: tuple = ()  # ((q, sigma), count) pairs

    def __post_init__(self):
        object.__setattr__(self, "orders", _check_orders(self.orders))

    @property
    def steps(self) -> int:
        return sum(n for _, n in self.terms)

    @property
    def rdp(self) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for (q, sigma), n in self.terms:
            total = total + n * np.array([rdp_increment(q, sigma, a) for a in self.orders])
        return total

    def add(self, q: float, sigma: float, count: int = 1) -> "RdpLedger":
        rdp_increment(q, sigma, self.orders[0])  # validates arguments
        terms = dict(self.terms)
        terms[(float(q), float(sigma))] = terms.get((float(q), float(sigma)), 0) + count
        return replace(self, terms=tuple(terms.items()))


def rdp_gaussian_step(ledger: RdpLedger, q: float, sigma: float, orders=None) -> RdpLedger:
    if orders is not None and _check_orders(orders) != ledger.orders:
        if ledger.terms:
            raise ConfigError("cannot change the order grid of a non-empty ledger")
        ledger = RdpLedger(orders)
    return ledger.add(q, sigma, 1)


def to_epsilon(ledger: RdpLedger, delta: float) -> float:
    if not 0 < delta < 1:
        raise ConfigError("delta must lie in (0, 1)")
    orders = np.array(ledger.orders)
    return float(np.min(ledger.rdp + math.log(1.0 / delta) / (orders - 1.0)))


def max_steps(q: float, sigma: float, delta: float, epsilon: float, limit: int,
              orders=DEFAULT_ORDERS, per: int = 1) -> int:
    """Largest multiple of ``per`` steps (<= limit) whose budget stays within ``epsilon``."""
    inc = np.array([rdp_increment(q, sigma, a) for a in orders])
    slack = math.log(1.0 / delta) / (np.array(orders) - 1.0)
    best = 0
    k = per
    while k <= limit:
        if float(np.min(k * inc + slack)) > epsilon:
            break
        best = k
        k += per
    return best


# --- DP training -------------------------------------------------------------

def dp_steps(model: SegModel, data: Sequence[Prepared], n_steps: int, batch_size: int,
             config: DpConfig, rng: Rng, start_step: int = 0,
             snapshots: Sequence[int] = ()) -> tuple[SegModel, dict]:
    """DP-SGD with Poisson sampling at rate batch_size / len(data).

    Returns the final model and ``{k: params}`` for every requested snapshot
    step count ``k`` (counted from ``start_step``).
    """
    n = len(data)
    q = min(1.0, batch_size / n)
    expected = q * n
    opt = numcore.sgd(config.lr) if config.optimizer == "sgd" else numcore.adamw(config.lr, 0.0)
    params = model.params
    wanted = set(snapshots)
    saved = {0: params} if 0 in wanted else {}
    for j in range(n_steps):
        step = start_step + j
        take = np.flatnonzero(rng.child("poisson", step).generator().random(n) < q)
        current = model.with_params(params)
        grads = [sample_loss_grad(current, data[i], rng.child("dropout", step, int(i)))[1] for i in take]
        if not grads:
            grads = [np.zeros_like(params)]
        noisy = clip_and_noise(grads, config, rng.child("noise", step), denominator=expected)
        opt, params = numcore.optimizer_step(opt, params, noisy)
        if j + 1 in wanted:
            saved[j + 1] = params
    return model.with_params(params), saved


@dataclass(frozen=True)
class SweepPoint:
    method: str
    seed: int
    epsilon: float
    steps: int
    mean_dsc: float
    zero_step: bool = False


def _mean_dsc(predict, tests) -> float:
    vals = [metrics.dsc(predict(img), mask) for img, mask in tests]
    return float(np.mean(vals))


def budget_sweep(datasets, profiles: dict, spec, eps_grid: Sequence[float], seeds: Sequence[int],
                 config: DpConfig = DpConfig(), methods: Sequence[str] = ("MV", "FedAvg"),
                 workers: int = 1) -> list[SweepPoint]:
    """DSC on the test-only centers as a function of the privacy budget.

    Training centers use all of their samples. Training is a single
    trajectory per method and seed; the model for budget ``eps`` is the
    prefix of that trajectory that still fits within ``eps``.
    """
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid or any(b <= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ConfigError("epsilon grid must be non-empty and strictly increasing")
    for m in methods:
        if m not in ("MV", "FedAvg"):
            raise ConfigError(f"privacy sweep supports MV and FedAvg, not {m!r}")
    jobs = [(datasets, profiles, spec, eps_grid, seed, config, tuple(methods)) for seed in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            parts = list(pool.map(_sweep_job, jobs))
    else:
        parts = [_sweep_job(j) for j in jobs]
    return [p for part in parts for p in part]


def _sweep_job(args) -> list[SweepPoint]:
    return _sweep_seed(*args)


def _sweep_seed(datasets, profiles, spec, eps_grid, seed, config, methods) -> list[SweepPoint]:
    out = []
    rng = Rng(seed).child("dp")
    pre = [preprocess_dataset(d, profiles.get(d.center_id), spec, rng) for d in datasets]
    ndim = volume_ndim(spec.target_shape)
    clients = [Client(d.center_id, prepare(d.train, spec.radius, ndim), rng.child("client", d.center_id))
               for d in pre if d.train]
    tests = [s for d in pre if not d.train for s in d.test]
    init = init_model(rng.child("init"), spec.radius, spec.hidden, spec.dropout, ndim)
    sizes = [c.n_samples for c in clients]
    E = local_epochs_from_steps(spec.K, sizes, spec.batch_size)
    R = rounds_for_plan(E, sizes, spec.batch_size, spec.local_steps)
    rates = [min(1.0, spec.batch_size / n) for n in sizes]

    def predict_with(params):
        model = init.with_params(params)
        return lambda img: (forward(model, img) >= spec.threshold).astype(np.uint8)

    if "MV" in methods:
        limits = [E * -(-n // min(spec.batch_size, n)) for n in sizes]
        budgets = [[max_steps(q, config.sigma, config.delta, e, lim) for e in eps_grid]
                   for q, lim in zip(rates, limits)]
        snaps = []
        for c, ks in zip(clients, budgets):
            _, saved = dp_steps(init, c.data, max(ks), spec.batch_size, config, c.rng.child("dp-local"),
                                snapshots=set(ks) | {0})
            snaps.append(saved)
        for j, eps in enumerate(eps_grid):
            preds = [predict_with(snaps[i][budgets[i][j]]) for i in range(len(clients))]
            score = _mean_dsc(lambda img: consensus.majority_vote([p(img) for p in preds]), tests)
            steps = max(b[j] for b in budgets)
            out.append(SweepPoint("MV", seed, eps, steps, score, steps == 0))

    if "FedAvg" in methods:
        s = spec.local_steps
        rounds_for = []
        for eps in eps_grid:
            per_client = [max_steps(q, config.sigma, config.delta, eps, R * s, per=s) // s for q in rates]
            rounds_for.append(min(per_client))
        weights = default_weights(clients)
        params = init.params
        saved = {0: params}
        for r in range(max(rounds_for)):
            updates = []
            for c in clients:
                model, _ = dp_steps(init.with_params(params), c.data, s, spec.batch_size, config,
                                    c.rng.child("dp-fl"), start_step=r * s)
                updates.append(model.params)
            params = numcore.weighted_mean(updates, weights)
            saved[r + 1] = params
        for eps, r in zip(eps_grid, rounds_for):
            score = _mean_dsc(predict_with(saved[r]), tests)
            out.append(SweepPoint("FedAvg", seed, eps, r * s, score, r == 0))
    return out


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "epsilon", "steps", "mean_dsc", "zero_step"])
    for p in points:
        w.writerow([p.method, p.seed, repr(p.epsilon), p.steps, f"{p.mean_dsc:.6f}", int(p.zero_step)])
    return buf.getvalue()
