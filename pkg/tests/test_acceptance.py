"""End-to-end acceptance checks, one test per criterion.

The long pattern checks share one five-seed accuracy run made through the
command line; the determinism check repeats it with a different worker count.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from clbench import cli, federation, harness, metrics, privacy, segmodel
from clbench.config import load_config
from clbench.consensus import staple
from clbench.federation import Client, FlConfig, run_federated
from clbench.metrics import MB, CostLedger
from clbench.numcore import Rng, finite_diff_grad
from clbench.privacy import RdpLedger, rdp_increment, to_epsilon
from clbench.training import OptimizerSpec

from oracles import centralized_gd, nsd_reference, staple_reference

SEEDS = [0, 1, 2, 3, 4]
FIVE_SEEDS = "plan:\n  seeds: [0, 1, 2, 3, 4]\ndp:\n  seeds: [0, 1, 2, 3, 4]\n"


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    (root / "bench.yaml").write_text(FIVE_SEEDS)
    assert cli.main(["generate", "--config", str(root / "bench.yaml")]) == 0
    return root


@pytest.fixture(scope="session")
def accuracy_run(workspace):
    """Five-seed accuracy experiment on the default scenario, single worker."""
    out = workspace / "run-w1"
    t0 = time.perf_counter()
    code = cli.main(["run", "--config", str(workspace / "bench.yaml"), "--experiment", "accuracy",
                     "--workers", "1", "--out", str(out)])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return out, metrics.parse_records((out / "cases.csv").read_text()), elapsed


def _note(request, text):
    request.node.criterion_detail = text


@pytest.mark.criterion(1, "bandwidth identities (9600 MB, 120 MB, ~9.25 GB)")
def test_criterion_01_bandwidth(request):
    t0 = time.perf_counter()
    ledger = CostLedger(model_size=30 * MB, clients=4, rounds=40)
    fl = ledger.record("FedAvg", "federated").bytes
    cbm = ledger.record("MV", "consensus").bytes
    assert fl == 9600 * MB == 10_066_329_600
    assert cbm == 120 * MB == 125_829_120
    assert ledger.difference() == fl - cbm == 9480 * MB
    assert abs(ledger.difference() / 1024 ** 3 - 9.25) < 0.01
    assert time.perf_counter() - t0 < 1.0
    _note(request, f"FL {fl // MB} MB, CBM {cbm // MB} MB, gap {ledger.difference() / 1024 ** 3:.3f} GiB")


@pytest.mark.criterion(2, "FedProx with mu=0 is bitwise FedAvg")
def test_criterion_02_fedprox_zero(request, workspace):
    t0 = time.perf_counter()
    cfg = load_config(workspace / "bench.yaml")
    plan = cfg.plan_for(cli.load_datasets(cfg, workspace / "data"))
    clients, _, init = harness.prepare_cell(plan, 0, 0)
    spec = plan.train
    avg_cfg = FlConfig("fedavg", 0.0, spec.local_steps, spec.batch_size, 6, optimizer=spec.optimizer_spec)
    prox_cfg = replace(avg_cfg, strategy="fedprox")
    a, la = run_federated(clients, avg_cfg, init)
    b, lb = run_federated(clients, prox_cfg, init)
    assert np.array_equal(a.params, b.params)
    assert [l.checksum for l in la] == [l.checksum for l in lb]
    assert len(la) == 6
    assert time.perf_counter() - t0 < 60
    _note(request, f"6 rounds, final checksum {la[-1].checksum}")


@pytest.mark.criterion(3, "degenerate federation equals centralized gradient descent")
def test_criterion_03_degenerate_federation(request, workspace):
    t0 = time.perf_counter()
    cfg = load_config(workspace / "bench.yaml")
    plan = cfg.plan_for(cli.load_datasets(cfg, workspace / "data"))
    clients, _, init = harness.prepare_cell(plan, 0, 0)
    shared = clients[0].data[:6]
    twins = [Client(f"C{k}", shared, Rng(k)) for k in range(4)]
    lr = 0.5
    fl = FlConfig("fedavg", 0.0, 1, len(shared), 1, optimizer=OptimizerSpec("sgd", lr), train_dropout=False)

    def grad(theta):
        return segmodel.prepared_loss_grad(init.with_params(theta), shared)[1]

    reference = centralized_gd(grad, init.params.copy(), lr, 20)
    model = init
    worst = 0.0
    for r in range(20):
        model, _ = run_federated(twins, fl, model)
        worst = max(worst, float(np.max(np.abs(model.params - reference[r]))))
    whole, _ = run_federated(twins, replace(fl, rounds=20), init)
    worst = max(worst, float(np.max(np.abs(whole.params - reference[-1]))))
    assert worst <= 1e-10
    assert time.perf_counter() - t0 < 60
    _note(request, f"max deviation {worst:.2e}")


def _staple_agrees(masks):
    ref_iters, ref_mask = staple_reference(masks)
    mask, state = staple(masks, record=True)
    if len(state.history) != len(ref_iters):
        return False
    for (W, p, q), (rW, rp, rq) in zip(state.history, ref_iters):
        if max(np.max(np.abs(W - np.array(rW))), np.max(np.abs(p - np.array(rp))),
               np.max(np.abs(q - np.array(rq)))) > 1e-10:
            return False
    if state.history:
        clear = np.abs(state.history[-1][0] - 0.5).reshape(mask.shape) > 1e-9
        return bool(np.array_equal(mask[clear], ref_mask[clear]))
    return bool(np.array_equal(mask, ref_mask))


@pytest.mark.criterion(4, "STAPLE matches reference EM iterate by iterate")
def test_criterion_04_staple(request):
    t0 = time.perf_counter()
    for bits in range(2 ** 12):
        flat = [(bits >> k) & 1 for k in range(12)]
        masks = [np.array(flat[4 * r:4 * r + 4], dtype=np.uint8).reshape(2, 2, 1) for r in range(3)]
        assert _staple_agrees(masks), bits
        if masks[0].tolist() == masks[1].tolist() == masks[2].tolist():
            out, _ = staple(masks)
            assert np.array_equal(out, masks[0])
    g = np.random.default_rng(2024)
    for k in range(100):
        masks = [(g.random((1, 4, 4)) < g.uniform(0.1, 0.9)).astype(np.uint8) for _ in range(3)]
        assert _staple_agrees(masks), k
    elapsed = time.perf_counter() - t0
    assert elapsed < 60
    _note(request, f"4196 cases in {elapsed:.1f} s")


@pytest.mark.criterion(5, "Dice-loss gradient matches finite differences on 100 draws")
def test_criterion_05_gradients(request):
    t0 = time.perf_counter()
    g = np.random.default_rng(5)
    worst = 0.0
    for k in range(100):
        model = segmodel.init_model(Rng(1000 + k))
        model = model.with_params(model.params * g.uniform(0.5, 3.0))
        shape = (1, int(g.integers(5, 10)), int(g.integers(5, 10)))
        batch = [(g.normal(size=shape), (g.random(shape) < g.uniform(0.2, 0.6)).astype(np.uint8))
                 for _ in range(int(g.integers(1, 4)))]
        drop = Rng(7).child(k) if k % 2 else None
        _, grad = segmodel.loss_and_grad(model, batch, drop)
        prepared = segmodel.prepare(batch, model.radius, model.ndim)
        fd = finite_diff_grad(lambda p: segmodel.prepared_loss(model.with_params(p), prepared, drop), model.params)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-300)
        worst = max(worst, float(rel))
    assert worst < 1e-4
    assert time.perf_counter() - t0 < 60
    _note(request, f"worst relative error {worst:.1e}")


@pytest.mark.criterion(6, "RDP accountant exact at q=1, monotone, subsampling strictly smaller")
def test_criterion_06_rdp(request):
    t0 = time.perf_counter()
    ledger = RdpLedger()
    orders = np.array(ledger.orders)
    prev = -math.inf
    for k in range(1, 101):
        ledger = privacy.rdp_gaussian_step(ledger, 1.0, 4.0)
        assert np.max(np.abs(ledger.rdp - k * orders / 32.0)) <= 1e-12
        eps = to_epsilon(ledger, 1e-5)
        assert eps > prev
        prev = eps
    for q in (0.01, 0.1, 0.5, 0.9, 0.99):
        for a in ledger.orders:
            assert rdp_increment(q, 4.0, a) < rdp_increment(1.0, 4.0, a)
    assert time.perf_counter() - t0 < 1.0
    _note(request, f"epsilon after 100 full-batch steps {prev:.3f}")


def _external_gaps(records, clients, methods):
    rows = metrics.utility_from_records(records, clients, methods)
    return {(r.client, r.method): r.delta_external for r in rows}


@pytest.mark.slow
@pytest.mark.criterion(7, "accuracy pattern over 5 seeds")
def test_criterion_07_accuracy_pattern(request, accuracy_run):
    out, records, elapsed = accuracy_run
    plan_cols = cli.read_meta(out)["columns"].split(",")
    table = metrics.results_table(records, plan_cols)
    avg = {s: table.average(s) for s in table.strategies}
    others = {s: v for s, v in avg.items() if s != "Centralized"}
    best_other = max(others, key=others.get)
    clients = [c[len("Local-"):] for c in plan_cols if c.startswith("Local-")]
    collab = ["Centralized", "FedAvg", "FedProx", "UBE", "Staple", "MV"]
    gaps = _external_gaps(records, clients, collab)
    best_fl = max(avg["FedAvg"], avg["FedProx"])
    best_cbm = max(avg["UBE"], avg["Staple"], avg["MV"])
    _note(request, f"Centralized {avg['Centralized']:.4f} vs {best_other} {avg[best_other]:.4f}; "
                   f"min external gain {min(gaps.values()):+.4f}; CBM-FL {best_cbm - best_fl:+.4f}; "
                   f"{elapsed / 60:.1f} min")
    assert len(gaps) == len(clients) * len(collab)
    assert avg["Centralized"] >= max(others.values())
    assert min(gaps.values()) > 0
    assert best_cbm >= best_fl - 0.05
    assert elapsed < 30 * 60


@pytest.mark.slow
@pytest.mark.criterion(8, "leave-one-out: UBE moves less than FedAvg in >= 4 of 5 seeds")
def test_criterion_08_robustness(request, workspace, accuracy_run):
    out, records, _ = accuracy_run
    cfg = load_config(workspace / "bench.yaml")
    datasets = cli.load_datasets(cfg, workspace / "data")
    plan = cfg.plan_for(datasets)
    t0 = time.perf_counter()
    without = harness.run_plan(replace(plan, exclude=(cfg.plan.leave_out,)))
    elapsed = time.perf_counter() - t0
    cols = plan.columns()
    tests = harness.test_set_order(plan)
    wins, pairs = 0, []
    for seed in SEEDS:
        a = metrics.results_table([r for r in records if r.seed == seed], cols, tests)
        b = metrics.results_table([r for r in without.records if r.seed == seed], cols, tests)
        d = metrics.robustness_delta(a, b, ["FedAvg", "UBE"])
        pairs.append((round(d["UBE"]["Average"], 4), round(d["FedAvg"]["Average"], 4)))
        wins += d["UBE"]["Average"] <= d["FedAvg"]["Average"]
    _note(request, f"{wins}/5 seeds; (UBE, FedAvg) per seed {pairs}")
    assert wins >= 4
    assert elapsed < 60 * 60


@pytest.mark.slow
@pytest.mark.criterion(9, "privacy sweep: MV >= FedAvg at median epsilon, MV plateaus")
def test_criterion_09_privacy(request, workspace):
    cfg = load_config(workspace / "bench.yaml")
    datasets = cli.load_datasets(cfg, workspace / "data")
    plan = cfg.plan_for(datasets)
    grid = list(cfg.dp.eps_grid)
    t0 = time.perf_counter()
    points = privacy.budget_sweep(datasets, plan.profiles, plan.train, grid, SEEDS, cfg.dp_config())
    elapsed = time.perf_counter() - t0
    mid = grid[len(grid) // 2]
    score = {(p.method, p.seed, p.epsilon): p.mean_dsc for p in points}
    wins = sum(score[("MV", s, mid)] >= score[("FedAvg", s, mid)] for s in SEEDS)
    curve = [np.mean([score[("MV", s, e)] for s in SEEDS]) for e in grid]
    tail = math.ceil(len(grid) / 3)
    slope = float(np.polyfit(grid[-tail:], curve[-tail:], 1)[0])
    _note(request, f"{wins}/5 seeds at eps={mid}; tail slope {slope:.4f}/eps; {elapsed:.0f} s")
    assert wins >= 4
    assert slope < 0.01
    assert elapsed < 60 * 60


@pytest.mark.criterion(10, "NSD equals brute-force search on 1000 mask pairs")
def test_criterion_10_nsd(request):
    t0 = time.perf_counter()
    g = np.random.default_rng(10)
    for k in range(1000):
        h, w = int(g.integers(1, 11)), int(g.integers(1, 11))
        a = (g.random((1, h, w)) < g.uniform(0.05, 0.95)).astype(np.uint8)
        b = (g.random((1, h, w)) < g.uniform(0.05, 0.95)).astype(np.uint8)
        tau = float(g.choice([0.5, 1.0, 1.5, 2.0, 2.5, 4.0]))
        assert metrics.nsd(a, b, tau) == nsd_reference(a, b, tau), k
        assert metrics.nsd(a, a, tau) == 1.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 60
    _note(request, f"{elapsed:.1f} s")


@pytest.mark.slow
@pytest.mark.criterion(11, "accuracy runs are byte-identical across worker counts")
def test_criterion_11_determinism(request, workspace, accuracy_run):
    out1, _, elapsed1 = accuracy_run
    out2 = workspace / "run-w2"
    t0 = time.perf_counter()
    assert cli.main(["run", "--config", str(workspace / "bench.yaml"), "--experiment", "accuracy",
                     "--workers", "2", "--out", str(out2)]) == 0
    elapsed2 = time.perf_counter() - t0
    a = (out1 / "cases.csv").read_bytes()
    b = (out2 / "cases.csv").read_bytes()
    m1, m2 = cli.read_meta(out1), cli.read_meta(out2)
    n_cases = a.count(b"\n") - 1
    _note(request, f"{len(a)} bytes, {n_cases} cases; {(elapsed1 + elapsed2) / 60:.1f} min total")
    assert a == b
    assert (out1 / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()
    assert m1 == m2
