"""Overlap and surface metrics, utility and robustness deltas, cost accounting."""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import StructuralError

log = logging.getLogger(__name__)

MB = 1024 * 1024


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred).astype(bool)
    b = np.asarray(truth).astype(bool)
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def dsc(pred, truth) -> float:
    a, b = _pair(pred, truth)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbour.

    Voxels outside the grid count as background. Volumes with depth 1 use
    in-plane 4-connectivity, deeper volumes 6-connectivity.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim == 2:
        m = m[None]
    axes = (1, 2) if m.shape[0] == 1 else (0, 1, 2)
    padded = np.pad(m, 1)
    interior = padded.copy()
    for ax in axes:
        interior &= np.roll(padded, 1, axis=ax) & np.roll(padded, -1, axis=ax)
    inner = interior[1:-1, 1:-1, 1:-1]
    return (m & ~inner).reshape(np.asarray(mask).shape)


def surface_distances(from_mask, to_mask) -> np.ndarray:
    """Distance from every boundary voxel of ``from_mask`` to the nearest boundary voxel of ``to_mask``."""
    bf, bt = boundary(from_mask), boundary(to_mask)
    if not bt.any():
        return np.full(int(bf.sum()), np.inf)
    dist = ndimage.distance_transform_edt(~bt)
    return dist[bf]


def nsd(pred, truth, tau: float = 1.0) -> float:
    """Symmetric normalized surface distance at tolerance ``tau`` voxels."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    a, b = _pair(pred, truth)
    da, db = surface_distances(a, b), surface_distances(b, a)
    n = da.size + db.size
    if n == 0:
        return 1.0
    return float(((da <= tau).sum() + (db <= tau).sum()) / n)


# --- case records and tables ----------------------------------------------

RECORD_COLUMNS = ["seed", "fold", "strategy", "test_set", "case_id", "dsc", "nsd", "status"]


@dataclass(frozen=True)
class CaseRecord:
    seed: int
    fold: int
    strategy: str
    test_set: str
    case_id: str
    dsc: float
    nsd: float
    status: str = "ok"

    def row(self) -> list:
        return [self.seed, self.fold, self.strategy, self.test_set, self.case_id,
                repr(float(self.dsc)), repr(float(self.nsd)), self.status]

    @classmethod
    def from_row(cls, row: dict) -> "CaseRecord":
        return cls(int(row["seed"]), int(row["fold"]), row["strategy"], row["test_set"],
                   row["case_id"], float(row["dsc"]), float(row["nsd"]), row["status"])


def records_csv(records: Iterable[CaseRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def parse_records(text: str) -> list[CaseRecord]:
    return [CaseRecord.from_row(row) for row in csv.DictReader(io.StringIO(text))]


def _ok(records: Iterable[CaseRecord]) -> list[CaseRecord]:
    return [r for r in records if r.status == "ok"]


def _order(values: Iterable[str], preferred: Sequence[str] | None) -> list[str]:
    seen = list(dict.fromkeys(values))
    if preferred is None:
        return seen
    return [v for v in preferred if v in seen] + [v for v in seen if v not in preferred]


@dataclass
class ResultsTable:
    test_sets: list
    strategies: list
    dsc: dict = field(default_factory=dict)  # (test_set, strategy) -> mean
    nsd: dict = field(default_factory=dict)
    dsc_std: dict = field(default_factory=dict)  # std of per-(seed, fold) means
    nsd_std: dict = field(default_factory=dict)

    def average(self, strategy: str, metric: str = "dsc") -> float:
        vals = [getattr(self, metric)[(t, strategy)] for t in self.test_sets
                if (t, strategy) in getattr(self, metric)]
        return float(np.mean(vals)) if vals else float("nan")


def results_table(records: Iterable[CaseRecord], strategy_order=None, test_order=None) -> ResultsTable:
    recs = _ok(records)
    cells = defaultdict(list)
    folds = defaultdict(lambda: defaultdict(list))
    for r in recs:
        cells[(r.test_set, r.strategy)].append(r)
        folds[(r.test_set, r.strategy)][(r.seed, r.fold)].append(r)
    table = ResultsTable(_order((r.test_set for r in recs), test_order),
                         _order((r.strategy for r in recs), strategy_order))
    for key, rs in cells.items():
        table.dsc[key] = float(np.mean([r.dsc for r in rs]))
        table.nsd[key] = float(np.mean([r.nsd for r in rs]))
        per_fold = folds[key].values()
        table.dsc_std[key] = float(np.std([np.mean([r.dsc for r in f]) for f in per_fold]))
        table.nsd_std[key] = float(np.std([np.mean([r.nsd for r in f]) for f in per_fold]))
    return table


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def results_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["test_set", "strategy", "dsc", "dsc_std", "nsd", "nsd_std"])
    for t in table.test_sets + ["Average"]:
        for s in table.strategies:
            if t == "Average":
                w.writerow([t, s, _fmt(table.average(s)), "", _fmt(table.average(s, "nsd")), ""])
            elif (t, s) in table.dsc:
                w.writerow([t, s, _fmt(table.dsc[(t, s)]), _fmt(table.dsc_std[(t, s)]),
                            _fmt(table.nsd[(t, s)]), _fmt(table.nsd_std[(t, s)])])
    return buf.getvalue()


def results_markdown(table: ResultsTable, metric: str = "dsc") -> str:
    values = getattr(table, metric)
    lines = ["| test set | " + " | ".join(table.strategies) + " |",
             "|---" * (len(table.strategies) + 1) + "|"]
    for t in table.test_sets:
        cells = [_fmt(values[(t, s)]) if (t, s) in values else "" for s in table.strategies]
        lines.append(f"| {t} | " + " | ".join(cells) + " |")
    lines.append("| Average | " + " | ".join(_fmt(table.average(s, metric)) for s in table.strategies) + " |")
    return "\n".join(lines) + "\n"


# --- client utility ---------------------------------------------------------

@dataclass(frozen=True)
class UtilityRow:
    client: str
    method: str
    delta_local: float
    delta_external: float


def _mean_dsc(recs: Sequence[CaseRecord], strategy: str, keep) -> float | None:
    vals = [r.dsc for r in recs if r.strategy == strategy and keep(r.test_set)]
    return float(np.mean(vals)) if vals else None


def utility_from_records(records: Iterable[CaseRecord], clients: Sequence[str],
                         methods: Sequence[str], local_prefix: str = "Local-") -> list[UtilityRow]:
    """Per-client DSC change of each collaborative method versus that client's local model.

    The local test set of client ``l`` holds the cases whose ``test_set`` is
    ``l``; the external set is every other test case.
    """
    recs = _ok(records)
    rows = []
    for client in clients:
        local = local_prefix + client
        is_local = lambda t, c=client: t == c  # noqa: E731
        is_ext = lambda t, c=client: t != c  # noqa: E731
        base_l = _mean_dsc(recs, local, is_local)
        base_e = _mean_dsc(recs, local, is_ext)
        if base_l is None:
            log.warning("client %s has no local test cases; excluded from utility", client)
            continue
        for method in methods:
            ml = _mean_dsc(recs, method, is_local)
            me = _mean_dsc(recs, method, is_ext)
            if ml is None or me is None or base_e is None:
                continue
            rows.append(UtilityRow(client, method, ml - base_l, me - base_e))
    return rows


def utility_report(local_models: dict, collaborative: dict, test_sets: dict) -> list[UtilityRow]:
    """Evaluate predictors directly.

    ``local_models`` maps client id to a predict function, ``collaborative``
    maps method name to a predict function, ``test_sets`` maps test-set id to
    a list of ``(image, mask)`` pairs.
    """
    records = []
    predictors = {f"Local-{c}": f for c, f in local_models.items()} | dict(collaborative)
    for name, predict in predictors.items():
        for t, cases in test_sets.items():
            for k, (image, mask) in enumerate(cases):
                records.append(CaseRecord(0, 0, name, t, f"{t}-{k}", dsc(predict(image), mask), float("nan")))
    return utility_from_records(records, list(local_models), list(collaborative))


def utility_csv(rows: Sequence[UtilityRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client", "method", "delta_local", "delta_external"])
    for r in rows:
        w.writerow([r.client, r.method, _fmt(r.delta_local), _fmt(r.delta_external)])
    return buf.getvalue()


# --- robustness -------------------------------------------------------------

def robustness_delta(with_all: ResultsTable, without: ResultsTable,
                     strategies: Sequence[str] | None = None) -> dict:
    """Absolute DSC change per test set and strategy, plus a per-strategy ``Average``."""
    if set(with_all.test_sets) != set(without.test_sets):
        raise StructuralError("result sets cover different test sets")
    if strategies is None:
        strategies = [s for s in with_all.strategies if s in without.strategies]
    out = {}
    for s in strategies:
        per = {}
        for t in with_all.test_sets:
            if (t, s) in with_all.dsc and (t, s) in without.dsc:
                per[t] = abs(with_all.dsc[(t, s)] - without.dsc[(t, s)])
        per["Average"] = float(np.mean(list(per.values()))) if per else float("nan")
        out[s] = per
    return out


def robustness_csv(deltas: dict, test_sets: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    strategies = list(deltas)
    w.writerow(["test_set"] + strategies)
    for t in list(test_sets) + ["Average"]:
        w.writerow([t] + [_fmt(deltas[s][t]) if t in deltas[s] else "" for s in strategies])
    return buf.getvalue()


# --- cost -------------------------------------------------------------------

@dataclass
class StrategyCost:
    train_seconds: float = 0.0
    infer_seconds: float = 0.0  # per case
    bytes: int = 0


@dataclass
class CostLedger:
    model_size: int
    clients: int
    rounds: int
    entries: dict = field(default_factory=dict)  # strategy -> StrategyCost

    def fl_bytes(self) -> int:
        return 2 * self.clients * self.model_size * self.rounds

    def cbm_bytes(self) -> int:
        return self.clients * self.model_size

    def difference(self) -> int:
        return self.clients * self.model_size * (2 * self.rounds - 1)

    def record(self, strategy: str, kind: str, train_seconds: float = 0.0, infer_seconds: float = 0.0):
        """Add a strategy with the byte count implied by its ``kind``."""
        if kind == "federated":
            nbytes = self.fl_bytes()
        elif kind == "consensus":
            nbytes = self.cbm_bytes()
        elif kind == "local":
            nbytes = self.model_size
        elif kind == "centralized":
            nbytes = 0
        else:
            raise ValueError(f"unknown strategy kind {kind!r}")
        self.entries[strategy] = StrategyCost(train_seconds, infer_seconds, nbytes)
        return self.entries[strategy]


@dataclass(frozen=True)
class CostRow:
    strategy: str
    train_seconds: float
    infer_seconds: float
    bandwidth_bytes: int

    @property
    def bandwidth_mb(self) -> float:
        return self.bandwidth_bytes / MB


def cost_report(ledger: CostLedger) -> tuple[list[CostRow], int]:
    """Per-strategy cost rows plus the FL minus consensus bandwidth gap in bytes."""
    rows = [CostRow(name, e.train_seconds, e.infer_seconds, e.bytes) for name, e in ledger.entries.items()]
    return rows, ledger.difference()


def cost_csv(ledger: CostLedger) -> str:
    rows, diff = cost_report(ledger)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "train_seconds", "infer_seconds_per_case", "bandwidth_bytes", "bandwidth_mb"])
    for r in rows:
        w.writerow([r.strategy, f"{r.train_seconds:.3f}", f"{r.infer_seconds:.5f}", r.bandwidth_bytes,
                    f"{r.bandwidth_mb:.6f}"])
    w.writerow(["FL-minus-CBM", "", "", diff, f"{diff / MB:.6f}"])
    w.writerow(["meta:model_size_bytes", "", "", ledger.model_size, ""])
    w.writerow(["meta:clients", "", "", ledger.clients, ""])
    w.writerow(["meta:rounds", "", "", ledger.rounds, ""])
    return buf.getvalue()
