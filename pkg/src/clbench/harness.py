"""Experiment orchestration: K-fold cells, the strategy matrix and result assembly."""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import consensus, federation, metrics
from .errors import ConfigError
from .federation import Client, FlConfig
from .numcore import Rng
from .scenario import ClientDataset, CenterProfile, PreprocessSpec, preprocess
from .segmodel import SegModel, forward, init_model, prepare
from .training import OptimizerSpec, run_steps

log = logging.getLogger(__name__)

STRATEGIES = ("Local", "Centralized", "FedAvg", "FedProx", "UBE", "Staple", "MV")
FL_STRATEGIES = ("FedAvg", "FedProx")
CBM_STRATEGIES = ("UBE", "Staple", "MV")


@dataclass(frozen=True)
class TrainSpec:
    K: int = 450
    batch_size: int = 8
    lr: float = 0.01
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    dropout: float = 0.3
    local_steps: int = 20
    mu: float = 0.01
    radius: int = 2
    hidden: int = 16
    threshold: float = 0.5
    ube_passes: int = 20
    ube_eps: float = 1e-9
    ube_direction: str = "inverse"
    staple_tol: float = 1e-6
    staple_max_iter: int = 100
    nsd_tau: float = 1.0
    target_shape: tuple = (1, 32, 32)

    @property
    def optimizer_spec(self) -> OptimizerSpec:
        return OptimizerSpec(self.optimizer, self.lr, self.weight_decay)


@dataclass
class ExperimentPlan:
    datasets: list  # list[ClientDataset], raw (not preprocessed)
    profiles: dict = field(default_factory=dict)  # center id -> CenterProfile
    strategies: Sequence[str] = STRATEGIES
    folds: int = 5
    seeds: Sequence[int] = (0,)
    train: TrainSpec = TrainSpec()
    exclude: tuple = ()
    fold_subset: Sequence[int] | None = None
    workers: int = 1

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("fold count must be >= 2")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; known: {', '.join(STRATEGIES)}")
        ids = [d.center_id for d in self.datasets]
        for c in self.exclude:
            if c not in ids:
                raise ConfigError(f"excluded center {c!r} is not in the scenario")

    @property
    def training_ids(self) -> list[str]:
        return [d.center_id for d in self.datasets if d.train and d.center_id not in self.exclude]

    def cells(self) -> list[tuple[int, int]]:
        folds = range(self.folds) if self.fold_subset is None else self.fold_subset
        return [(s, f) for s in self.seeds for f in folds]

    def columns(self) -> list[str]:
        cols = []
        for s in self.strategies:
            cols += [f"Local-{c}" for c in self.training_ids] if s == "Local" else [s]
        return cols


def fold_assignment(n: int, k: int, rng: Rng) -> np.ndarray:
    """Fold index per sample: a random permutation dealt round-robin into k folds."""
    perm = rng.generator().permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


def split_fold(ds: ClientDataset, k: int, fold: int, rng: Rng) -> ClientDataset:
    if not ds.train:
        return ClientDataset(ds.center_id, [], list(ds.test), ds.seed)
    assign = fold_assignment(len(ds.train), k, rng.child("folds", ds.center_id))
    train = [s for s, f in zip(ds.train, assign) if f != fold]
    test = [s for s, f in zip(ds.train, assign) if f == fold]
    return ClientDataset(ds.center_id, train, test, ds.seed)


def preprocess_dataset(ds: ClientDataset, profile: CenterProfile | None, spec: TrainSpec,
                       rng: Rng) -> ClientDataset:
    pre = PreprocessSpec(tuple(spec.target_shape), True, bool(profile and profile.bias_correct))
    train = [preprocess(s, pre, rng.child("flip", ds.center_id, k)) for k, s in enumerate(ds.train)]
    test = [preprocess(s, pre) for s in ds.test]
    return ClientDataset(ds.center_id, train, test, ds.seed)


@dataclass
class CellResult:
    seed: int
    fold: int
    records: list
    ledger: metrics.CostLedger
    epochs: int
    rounds: int
    errors: list = field(default_factory=list)
    models: dict = field(default_factory=dict)


def volume_ndim(shape) -> int:
    return 2 if shape[0] == 1 else 3


def prepare_cell(plan: ExperimentPlan, seed: int, fold: int):
    rng = Rng(seed)
    spec = plan.train
    split = [split_fold(d, plan.folds, fold, rng) for d in plan.datasets]
    pre = [preprocess_dataset(d, plan.profiles.get(d.center_id), spec, rng.child("fold", fold)) for d in split]
    ndim = volume_ndim(spec.target_shape)
    clients = [Client(d.center_id, prepare(d.train, spec.radius, ndim), rng.child("client", d.center_id, fold))
               for d in pre if d.train and d.center_id not in plan.exclude]
    tests = {d.center_id: d.test for d in pre if d.test}
    init = init_model(rng.child("init"), spec.radius, spec.hidden, spec.dropout, ndim)
    return clients, tests, init


def schedule(clients: Sequence[Client], spec: TrainSpec) -> tuple[int, int]:
    sizes = [c.n_samples for c in clients]
    E = federation.local_epochs_from_steps(spec.K, sizes, spec.batch_size)
    R = federation.rounds_for_plan(E, sizes, spec.batch_size, spec.local_steps)
    return E, R


def train_centralized(clients: Sequence[Client], init: SegModel, epochs: int, spec: TrainSpec,
                      rng: Rng) -> SegModel:
    pooled = [s for c in clients for s in c.data]
    per_epoch = -(-len(pooled) // min(spec.batch_size, len(pooled)))
    model, _ = run_steps(init, pooled, spec.optimizer_spec.fresh(), epochs * per_epoch,
                         spec.batch_size, rng)
    return model


def fl_config(strategy: str, rounds: int, spec: TrainSpec) -> FlConfig:
    return FlConfig("fedprox" if strategy == "FedProx" else "fedavg",
                    spec.mu if strategy == "FedProx" else 0.0,
                    spec.local_steps, spec.batch_size, rounds, None, spec.optimizer_spec)


def _predict(model: SegModel, image, threshold: float) -> np.ndarray:
    return (forward(model, image) >= threshold).astype(np.uint8)


def run_cell(plan: ExperimentPlan, seed: int, fold: int, keep_models: bool = False) -> CellResult:
    spec = plan.train
    clients, tests, init = prepare_cell(plan, seed, fold)
    E, R = schedule(clients, spec)
    size = federation.model_nbytes(init)
    ledger = metrics.CostLedger(size, len(clients), R)
    models: dict[str, SegModel] = {}
    errors = []
    failed: dict[str, str] = {}
    strategies = list(plan.strategies)
    rng = Rng(seed).child("cell", fold)

    need_local = any(s in strategies for s in ("Local",) + CBM_STRATEGIES)
    local_models: list[SegModel] = []
    if need_local:
        t0 = time.perf_counter()
        try:
            local_models, _ = consensus.train_local_once(clients, init, E, spec.batch_size,
                                                         spec.optimizer_spec)
        except Exception as exc:  # recorded, not fatal
            for s in ("Local",) + CBM_STRATEGIES:
                failed[s] = str(exc)
        elapsed = time.perf_counter() - t0
        slowest = elapsed / max(1, len(clients))
        for c, m in zip(clients, local_models):
            models[f"Local-{c.center_id}"] = m
            if "Local" in strategies:
                ledger.record(f"Local-{c.center_id}", "local", slowest)
        for s in CBM_STRATEGIES:
            if s in strategies:
                ledger.record(s, "consensus", slowest)

    if "Centralized" in strategies:
        t0 = time.perf_counter()
        try:
            models["Centralized"] = train_centralized(clients, init, E, spec, rng.child("centralized"))
        except Exception as exc:
            failed["Centralized"] = str(exc)
        ledger.record("Centralized", "centralized", time.perf_counter() - t0)

    for s in FL_STRATEGIES:
        if s in strategies:
            t0 = time.perf_counter()
            try:
                models[s], _ = federation.run_federated(clients, fl_config(s, R, spec), init)
            except Exception as exc:
                failed[s] = str(exc)
            ledger.record(s, "federated", time.perf_counter() - t0)

    records = []
    infer_time: dict[str, float] = {}
    columns = plan.columns()

    def add(strategy, test_set, case_id, pred, truth):
        records.append(metrics.CaseRecord(seed, fold, strategy, test_set, case_id,
                                          metrics.dsc(pred, truth), metrics.nsd(pred, truth, spec.nsd_tau)))

    n_cases = 0
    for test_set, cases in tests.items():
        for k, (image, truth) in enumerate(cases):
            n_cases += 1
            case_id = f"{test_set}-f{fold}-{k}" if test_set in [d.center_id for d in plan.datasets if d.train] \
                else f"{test_set}-{k}"
            local_preds = []
            for c, m in zip(clients, local_models):
                t0 = time.perf_counter()
                pred = _predict(m, image, spec.threshold)
                infer_time[f"Local-{c.center_id}"] = infer_time.get(f"Local-{c.center_id}", 0.0) + time.perf_counter() - t0
                local_preds.append(pred)
            for col in columns:
                if col in failed or (col.startswith("Local-") and "Local" in failed):
                    continue
                t0 = time.perf_counter()
                try:
                    if col.startswith("Local-"):
                        pred = local_preds[[f"Local-{c.center_id}" for c in clients].index(col)]
                    elif col in ("Centralized",) + FL_STRATEGIES:
                        pred = _predict(models[col], image, spec.threshold)
                    elif col == "MV":
                        pred = consensus.majority_vote(local_preds)
                    elif col == "Staple":
                        pred = (consensus.staple(local_preds, spec.staple_tol, spec.staple_max_iter)[0]
                                if len(local_preds) >= 2 else local_preds[0])
                    elif col == "UBE":
                        pred, _ = consensus.ube_fuse(local_models, image, spec.ube_passes,
                                                     rng.child("ube", case_id), spec.ube_eps,
                                                     spec.ube_direction, spec.threshold)
                    else:
                        raise ConfigError(f"no runner for {col}")
                except Exception as exc:
                    failed[col] = str(exc)
                    continue
                infer_time[col] = infer_time.get(col, 0.0) + time.perf_counter() - t0
                add(col, test_set, case_id, pred, truth)

    for col, msg in failed.items():
        errors.append((col, msg))
        records = [r for r in records if r.strategy != col]
        records.append(metrics.CaseRecord(seed, fold, col, "-", "-", float("nan"), float("nan"),
                                          "error: " + msg.replace("\n", " ")))
    for name, entry in ledger.entries.items():
        extra = 0.0
        if name in CBM_STRATEGIES:
            # fusion needs every local prediction first
            extra = sum(v for k, v in infer_time.items() if k.startswith("Local-"))
        entry.infer_seconds = (infer_time.get(name, 0.0) + extra) / max(1, n_cases)

    return CellResult(seed, fold, records, ledger, E, R, errors, models if keep_models else {})


def _run_cell_job(args):
    plan, seed, fold = args
    return run_cell(plan, seed, fold)


@dataclass
class PlanResult:
    plan: ExperimentPlan
    cells: list

    @property
    def records(self) -> list:
        return [r for c in self.cells for r in c.records]

    def table(self) -> metrics.ResultsTable:
        return metrics.results_table(self.records, self.plan.columns(), test_set_order(self.plan))

    @property
    def ledger(self) -> metrics.CostLedger:
        return self.cells[0].ledger

    def all_failed(self) -> bool:
        return all(r.status != "ok" for r in self.records)


def test_set_order(plan: ExperimentPlan) -> list[str]:
    return [d.center_id for d in plan.datasets]


def run_plan(plan: ExperimentPlan) -> PlanResult:
    """Run every (seed, fold) cell; results are merged in cell order whatever the worker count."""
    cells = plan.cells()
    if plan.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            results = list(pool.map(_run_cell_job, [(plan, s, f) for s, f in cells]))
    else:
        results = [run_cell(plan, s, f) for s, f in cells]
    return PlanResult(plan, results)


def leave_one_out(plan: ExperimentPlan, excluded: str) -> tuple[PlanResult, PlanResult]:
    by_id = {d.center_id: d for d in plan.datasets}
    if excluded not in by_id:
        raise ConfigError(f"unknown center {excluded!r}")
    if not by_id[excluded].train:
        raise ConfigError(f"center {excluded!r} is test-only and cannot be excluded from training")
    with_all = run_plan(plan)
    without = run_plan(replace(plan, exclude=tuple(plan.exclude) + (excluded,)))
    return with_all, without


def robustness(with_all: PlanResult, without: PlanResult) -> dict:
    strategies = [s for s in ("Centralized",) + FL_STRATEGIES + CBM_STRATEGIES if s in with_all.plan.strategies]
    return metrics.robustness_delta(with_all.table(), without.table(), strategies)


def grid_search(plan: ExperimentPlan, grid: dict) -> dict:
    """Pick the hyperparameters whose Local models score best on their own test sets.

    ``grid`` maps TrainSpec field names to candidate values. Ties go to the
    smaller learning rate, then the smaller batch size.
    """
    keys = list(grid)
    points = [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]
    if not points:
        raise ConfigError("empty hyperparameter grid")
    scored = []
    for point in points:
        sub = replace(plan, strategies=("Local",), train=replace(plan.train, **point))
        result = run_plan(sub)
        recs = [r for r in result.records if r.status == "ok"]
        per_client = []
        for c in sub.training_ids:
            vals = [r.dsc for r in recs if r.strategy == f"Local-{c}" and r.test_set == c]
            per_client.append(float(np.mean(vals)) if vals else 0.0)
        score = float(np.mean(per_client)) if per_client else 0.0
        if not np.isfinite(score):
            score = 0.0
        log.info("grid point %s: mean local DSC %.4f", point, score)
        scored.append((score, point))
    best = max(scored, key=lambda sp: (sp[0], -sp[1].get("lr", plan.train.lr),
                                       -sp[1].get("batch_size", plan.train.batch_size)))
    return dict(best[1])
