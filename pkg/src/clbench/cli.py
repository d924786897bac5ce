"""Command-line front end: ``generate``, ``run`` and ``export``.

Exit codes: 0 success, 2 config or usage error, 3 I/O error, 4 every
experiment cell failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import zlib
from dataclasses import replace
from pathlib import Path

from . import __version__, harness, metrics, privacy, scenario
from .config import Config, load_config
from .errors import ConfigError, FormatError

log = logging.getLogger("clbench")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FAILED = 0, 2, 3, 4
EXPERIMENTS = ("accuracy", "cost", "robustness", "utility", "privacy")
MANIFEST = "manifest.csv"
CASES = "cases.csv"
CASES_WITHOUT = "cases_without.csv"
META = "run.meta"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clbench", description="Collaborative-learning benchmark on synthetic segmentation data.")
    p.add_argument("--version", action="version", version=f"clbench {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render the synthetic centers to disk")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="dataset directory (overrides output.data_dir)")

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    r.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    r.add_argument("--seed-override", type=int)
    r.add_argument("--nsd-tau", type=float)
    r.add_argument("--out", help="results directory (overrides output.results_dir)")
    r.add_argument("--data", help="dataset directory (overrides output.data_dir)")
    r.add_argument("--generate", action="store_true", help="render the datasets first")

    e = sub.add_parser("export", help="re-aggregate per-case records into tables")
    e.add_argument("results_dir")
    e.add_argument("--format", choices=("csv", "markdown"), default="csv")
    e.add_argument("--metric", choices=("dsc", "nsd"), default="dsc")
    e.add_argument("--out", help="write here instead of standard output")
    return p


# --- datasets ---------------------------------------------------------------

def generate(cfg: Config, data_dir: Path) -> list[tuple[str, str, int, int]]:
    data_dir.mkdir(parents=True, exist_ok=True)
    datasets = scenario.generate_scenario(cfg.profiles(), cfg.scenario.seed, tuple(cfg.scenario.shape))
    rows = []
    for ds in datasets:
        blob = scenario.dataset_bytes(ds)
        name = f"{ds.center_id}.clb"
        (data_dir / name).write_bytes(blob)
        rows.append((ds.center_id, name, len(blob), zlib.crc32(blob)))
    lines = ["center_id,file,bytes,crc32"] + [f"{c},{f},{n},{crc:08x}" for c, f, n, crc in rows]
    (data_dir / MANIFEST).write_text("\n".join(lines) + "\n")
    return rows


def load_datasets(cfg: Config, data_dir: Path) -> list:
    manifest = data_dir / MANIFEST
    if not manifest.exists():
        raise ConfigError(f"no datasets in {data_dir} (run 'clbench generate' or pass --generate)")
    entries = {}
    for line in manifest.read_text().splitlines()[1:]:
        c, f, n, crc = line.split(",")
        entries[c] = (f, int(n), int(crc, 16))
    out = []
    for center in cfg.scenario.centers:
        if center.id not in entries:
            raise ConfigError(f"dataset for center {center.id} is missing from {manifest}")
        f, n, crc = entries[center.id]
        blob = (data_dir / f).read_bytes()
        if len(blob) != n or zlib.crc32(blob) != crc:
            raise FormatError(f"{f} does not match its manifest checksum")
        out.append(scenario.parse_dataset(blob))
    return out


# --- results ----------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.write_text(text)


def write_meta(out: Path, cfg: Config, experiment: str, files: list[str], plan=None,
               chosen: dict | None = None) -> None:
    lines = [f"version={__version__}", f"experiment={experiment}", f"config_sha256={cfg.digest()}",
             "seeds=" + ",".join(str(s) for s in cfg.plan.seeds),
             "dp_seeds=" + ",".join(str(s) for s in cfg.dp.seeds),
             f"nsd_tau={cfg.plan.train.nsd_tau!r}"]
    if chosen:
        lines.append("grid_choice=" + ",".join(f"{k}:{v!r}" for k, v in sorted(chosen.items())))
    if plan is not None:
        lines += ["columns=" + ",".join(plan.columns()), "test_sets=" + ",".join(harness.test_set_order(plan))]
    for name in files:
        blob = (out / name).read_bytes()
        lines.append(f"file.{name}={len(blob)}:{zlib.crc32(blob):08x}")
    _write(out / META, "\n".join(lines) + "\n")


def read_meta(results: Path) -> dict:
    meta = {}
    for line in (results / META).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    return meta


def verified_records(results: Path, name: str = CASES) -> list:
    """Per-case records, rejected if the file differs from what ``run.meta`` recorded."""
    meta = read_meta(results)
    key = f"file.{name}"
    if key not in meta:
        raise FormatError(f"{META} has no checksum for {name}")
    size, crc = meta[key].split(":")
    blob = (results / name).read_bytes()
    if len(blob) != int(size) or f"{zlib.crc32(blob):08x}" != crc:
        raise FormatError(f"{name} failed its checksum (expected {size} bytes, crc {crc})")
    return metrics.parse_records(blob.decode())


def table_text(table: metrics.ResultsTable, fmt: str, metric: str = "dsc") -> str:
    if fmt == "markdown":
        return metrics.results_markdown(table, metric)
    return metrics.results_csv(table)


def run_experiment(cfg: Config, experiment: str, out: Path, data_dir: Path, workers: int) -> int:
    datasets = load_datasets(cfg, data_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = cfg.plan_for(datasets, workers)
    files = []

    def emit(name: str, text: str):
        _write(out / name, text)
        files.append(name)

    def emit_tables(result: harness.PlanResult, suffix: str = ""):
        emit(f"cases{suffix}.csv", metrics.records_csv(result.records))
        table = result.table()
        emit(f"results{suffix}.csv", metrics.results_csv(table))
        emit(f"results{suffix}.md", metrics.results_markdown(table))
        return table

    if experiment == "privacy":
        points = privacy.budget_sweep(datasets, plan.profiles, plan.train, cfg.dp.eps_grid, cfg.dp.seeds,
                                      cfg.dp_config(), workers=workers)
        emit("privacy.csv", privacy.sweep_csv(points))
        write_meta(out, cfg, experiment, files)
        print(privacy.sweep_csv(points), end="")
        return EXIT_OK

    chosen = None
    if cfg.plan.grid is not None and cfg.plan.grid.as_dict():
        chosen = harness.grid_search(plan, cfg.plan.grid.as_dict())
        log.info("grid search chose %s", chosen)
        plan = replace(plan, train=replace(plan.train, **chosen))

    if experiment == "cost":
        # one cell is enough: bandwidth is analytic and timings are per cell
        seed = cfg.plan.seeds[0]
        result = harness.run_plan(replace(plan, seeds=(seed,), fold_subset=(0,)))
        emit("cost.csv", metrics.cost_csv(result.ledger))
        write_meta(out, cfg, experiment, files, chosen=chosen)
        print(metrics.cost_csv(result.ledger), end="")
        return EXIT_FAILED if result.all_failed() else EXIT_OK

    if experiment == "robustness":
        with_all, without = harness.leave_one_out(plan, cfg.plan.leave_out)
        emit_tables(with_all)
        emit_tables(without, "_without")
        deltas = harness.robustness(with_all, without)
        emit("robustness.csv", metrics.robustness_csv(deltas, harness.test_set_order(plan)))
        write_meta(out, cfg, experiment, files, plan, chosen)
        print(metrics.robustness_csv(deltas, harness.test_set_order(plan)), end="")
        return EXIT_FAILED if with_all.all_failed() and without.all_failed() else EXIT_OK

    result = harness.run_plan(plan)
    table = emit_tables(result)
    if experiment == "utility":
        methods = [s for s in plan.strategies if s not in ("Local",)]
        rows = metrics.utility_from_records(result.records, plan.training_ids, methods)
        emit("utility.csv", metrics.utility_csv(rows))
        print(metrics.utility_csv(rows), end="")
    else:
        print(metrics.results_markdown(table), end="")
    write_meta(out, cfg, experiment, files, plan, chosen)
    errors = [r for r in result.records if r.status != "ok"]
    for r in errors:
        log.warning("seed %d fold %d %s: %s", r.seed, r.fold, r.strategy, r.status)
    return EXIT_FAILED if result.all_failed() else EXIT_OK


def export(results: Path, fmt: str, metric: str = "dsc") -> str:
    if not results.is_dir() or not (results / CASES).exists() or not (results / META).exists():
        raise ConfigError(f"{results} holds no per-case records")
    records = verified_records(results)
    if not records:
        raise ConfigError(f"{results / CASES} is empty")
    meta = read_meta(results)
    strategies = meta["columns"].split(",") if meta.get("columns") else None
    tests = meta["test_sets"].split(",") if meta.get("test_sets") else None
    return table_text(metrics.results_table(records, strategies, tests), fmt, metric)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"clbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export":
            text = export(Path(args.results_dir), args.format, args.metric)
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "generate":
            data_dir = Path(args.out) if args.out else cfg.path("data_dir")
            for c, f, n, crc in generate(cfg, data_dir):
                print(f"{c}\t{data_dir / f}\t{n} bytes\tcrc32 {crc:08x}")
            return EXIT_OK
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = cfg.with_overrides(args.seed_override, args.nsd_tau)
        data_dir = Path(args.data) if args.data else cfg.path("data_dir")
        if args.generate:
            generate(cfg, data_dir)
        out = Path(args.out) if args.out else cfg.path("results_dir")
        return run_experiment(cfg, args.experiment, out, data_dir, args.workers)
    except (ConfigError, FormatError) as exc:
        print(f"clbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"clbench: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
