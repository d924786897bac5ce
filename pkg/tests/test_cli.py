import csv
import io
import subprocess
import sys
import zlib

import pytest

from clbench import cli, metrics

SMALL = """\
scenario:
  seed: 1
  shape: [1, 16, 16]
plan:
  folds: 2
  seeds: [0]
  train:
    K: 12
    ube_passes: 3
dp:
  eps_grid: [1.0, 2.0]
  seeds: [0]
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def _run(*args):
    return cli.main([str(a) for a in args])


def test_generate_writes_centers_and_manifest(config, tmp_path, capsys):
    assert _run("generate", "--config", config) == 0
    data = tmp_path / "data"
    rows = list(csv.DictReader(open(data / "manifest.csv")))
    assert [r["center_id"] for r in rows] == ["N01", "N02", "N03", "N04", "N05", "N06"]
    for r in rows:
        blob = (data / r["file"]).read_bytes()
        assert int(r["bytes"]) == len(blob) and r["crc32"] == f"{zlib.crc32(blob):08x}"
    first = (data / "manifest.csv").read_text()
    assert _run("generate", "--config", config, "--out", tmp_path / "again") == 0
    assert (tmp_path / "again" / "manifest.csv").read_text() == first
    assert "N06" in capsys.readouterr().out


def test_schema_and_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario:\n  centers: []\n")
    assert _run("generate", "--config", bad) == 2
    assert "line 2" in capsys.readouterr().err
    assert _run("run", "--config", bad, "--experiment", "nonsense") == 2
    assert _run("frobnicate") == 2
    assert _run("generate", "--config", tmp_path / "missing.yaml") == 3


def test_run_without_datasets_is_a_config_error(config, capsys):
    assert _run("run", "--config", config, "--experiment", "accuracy") == 2
    assert "generate" in capsys.readouterr().err


def test_accuracy_run_and_export(config, tmp_path, capsys):
    out = tmp_path / "acc"
    assert _run("run", "--config", config, "--experiment", "accuracy", "--generate", "--workers", 1,
                "--out", out) == 0
    cases = metrics.parse_records((out / "cases.csv").read_text())
    assert {r.strategy for r in cases} == {"Local-N01", "Local-N02", "Local-N03", "Local-N04", "Centralized",
                                           "FedAvg", "FedProx", "UBE", "Staple", "MV"}
    header = (out / "results.md").read_text().splitlines()[0]
    assert header == ("| test set | Local-N01 | Local-N02 | Local-N03 | Local-N04 | Centralized | FedAvg | "
                      "FedProx | UBE | Staple | MV |")
    meta = cli.read_meta(out)
    assert meta["experiment"] == "accuracy" and meta["seeds"] == "0"
    assert len(meta["config_sha256"]) == 64 and meta["version"]
    capsys.readouterr()

    assert _run("export", out) == 0
    assert capsys.readouterr().out == (out / "results.csv").read_text()
    assert _run("export", out, "--format", "markdown", "--out", tmp_path / "t.md") == 0
    md = (tmp_path / "t.md").read_text()
    assert md == (out / "results.md").read_text()
    rows = [l for l in md.splitlines()[2:] if not l.startswith("| Average")]
    assert [l.split("|")[1].strip() for l in rows] == ["N01", "N02", "N03", "N04", "N05", "N06"]
    assert _run("export", out, "--metric", "nsd", "--format", "markdown") == 0

    text = (out / "cases.csv").read_text()
    (out / "cases.csv").write_text(text[: len(text) // 2])
    assert _run("export", out) == 2
    assert "checksum" in capsys.readouterr().err


def test_export_of_empty_dir(tmp_path):
    assert _run("export", tmp_path) == 2


def test_cost_identities(config, tmp_path, capsys):
    out = tmp_path / "cost"
    assert _run("run", "--config", config, "--experiment", "cost", "--generate", "--out", out) == 0
    rows = {r["strategy"]: r for r in csv.DictReader(open(out / "cost.csv"))}
    size = int(rows["meta:model_size_bytes"]["bandwidth_bytes"])
    M = int(rows["meta:clients"]["bandwidth_bytes"])
    R = int(rows["meta:rounds"]["bandwidth_bytes"])
    assert int(rows["FedAvg"]["bandwidth_bytes"]) == 2 * M * size * R
    assert int(rows["FedProx"]["bandwidth_bytes"]) == 2 * M * size * R
    for s in ("UBE", "Staple", "MV"):
        assert int(rows[s]["bandwidth_bytes"]) == M * size
    assert int(rows["FL-minus-CBM"]["bandwidth_bytes"]) == M * size * (2 * R - 1)


def test_utility_robustness_and_privacy(config, tmp_path):
    data = tmp_path / "d"
    assert _run("generate", "--config", config, "--out", data) == 0
    out = tmp_path / "u"
    assert _run("run", "--config", config, "--experiment", "utility", "--data", data, "--out", out) == 0
    util = list(csv.DictReader(open(out / "utility.csv")))
    assert {r["client"] for r in util} == {"N01", "N02", "N03", "N04"}
    out = tmp_path / "r"
    assert _run("run", "--config", config, "--experiment", "robustness", "--data", data, "--out", out) == 0
    assert (out / "cases_without.csv").exists()
    rob = list(csv.DictReader(open(out / "robustness.csv")))
    assert rob[-1]["test_set"] == "Average" and "UBE" in rob[0]
    out = tmp_path / "p"
    assert _run("run", "--config", config, "--experiment", "privacy", "--data", data, "--out", out,
                "--seed-override", 3) == 0
    pts = list(csv.DictReader(open(out / "privacy.csv")))
    assert [(p["method"], p["seed"], p["epsilon"]) for p in pts] == [
        ("MV", "3", "1.0"), ("MV", "3", "2.0"), ("FedAvg", "3", "1.0"), ("FedAvg", "3", "2.0")]


def test_tampered_dataset_rejected(config, tmp_path, capsys):
    data = tmp_path / "d"
    _run("generate", "--config", config, "--out", data)
    blob = bytearray((data / "N02.clb").read_bytes())
    blob[-1] ^= 0xFF
    (data / "N02.clb").write_bytes(bytes(blob))
    assert _run("run", "--config", config, "--experiment", "accuracy", "--data", data,
                "--out", tmp_path / "o") == 2
    assert "N02.clb" in capsys.readouterr().err


def test_grid_choice_recorded(tmp_path):
    cfg = tmp_path / "g.yaml"
    cfg.write_text(SMALL.replace("plan:\n", "plan:\n  strategies: [Local, MV]\n  grid:\n    lr: [1000.0, 0.1]\n"))
    out = tmp_path / "o"
    assert _run("run", "--config", cfg, "--experiment", "accuracy", "--generate", "--out", out) == 0
    assert cli.read_meta(out)["grid_choice"] == "lr:0.1"


def test_all_cells_failed_exit_code(config, tmp_path, monkeypatch):
    from clbench import harness

    def broken(plan, seed, fold, keep_models=False):
        rec = metrics.CaseRecord(seed, fold, "MV", "-", "-", float("nan"), float("nan"), "error: x")
        return harness.CellResult(seed, fold, [rec], metrics.CostLedger(1, 1, 1), 1, 1, [("MV", "x")])

    monkeypatch.setattr(harness, "run_cell", broken)
    assert _run("run", "--config", config, "--experiment", "accuracy", "--generate", "--workers", 1,
                "--out", tmp_path / "o") == 4


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "clbench", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("clbench ")
    proc = subprocess.run([sys.executable, "-m", "clbench", "run"], capture_output=True, text=True)
    assert proc.returncode == 2
