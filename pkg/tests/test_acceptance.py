"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import itertools
import time

import numpy as np
import pytest

from slo_autoscale.agent import EXPLOIT, EXPLORE, Agent, RegressionModel, fit_service
from slo_autoscale.core import (
    COMPLETION, CORES, DATA_QUALITY, MODEL_SIZE, SloSpec, default_specs, service_fulfillment,
    slo_fulfillment, validate_assignment,
)
from slo_autoscale.env import Environment, default_truth
from slo_autoscale.harness import ExperimentConfig, Trace, run_experiment
from slo_autoscale.metrics import MetricStore
from slo_autoscale.server import ControlPlane, make_server
from slo_autoscale.solver import (
    ObjectiveSpec, SolverSettings, assemble_objective, improving_moves, oracle_solve, solve, truth_predictors,
)

from conftest import explored_store


def held_out_grid(spec):
    """Dense grid over the whole box: cores every 0.1, quality lattice thinned to ~40 points, all model sizes."""
    cols = {CORES: np.round(np.arange(1, 81) * 0.1, 10)}
    for p in spec.discrete:
        lat = p.lattice()
        cols[p.name] = lat[:: max(1, len(lat) // 40)]
    names = list(cols)
    mesh = np.meshgrid(*(cols[n] for n in names), indexing="ij")
    return {n: m.ravel() for n, m in zip(names, mesh)}


def grid_max_error(model, spec, truth):
    grid = held_out_grid(spec)
    want = truth.services[spec.id].completion(grid[CORES], grid[DATA_QUALITY], grid.get(MODEL_SIZE))
    return float(np.max(np.abs(model.predict_batch(grid) - want)))


def test_criterion_1_default_spec_fidelity(criterion):
    t0 = time.perf_counter()
    by_id = {s.id: s for s in default_specs()}
    expected = {
        ("qr", DATA_QUALITY): (100.0, 1000.0, 1.0), ("cv", DATA_QUALITY): (128.0, 320.0, 32.0),
        ("cv", MODEL_SIZE): (1.0, 4.0, 1.0), ("pc", DATA_QUALITY): (6.0, 60.0, 1.0),
        ("qr", CORES): (0.0, 8.0, None), ("cv", CORES): (0.0, 8.0, None), ("pc", CORES): (0.0, 8.0, None),
    }
    slos = {
        "qr": {(DATA_QUALITY, 800.0, 0.5), (COMPLETION, 1.0, 1.0)},
        "cv": {(DATA_QUALITY, 288.0, 0.2), (MODEL_SIZE, 3.0, 0.2), (COMPLETION, 1.0, 1.0)},
        "pc": {(DATA_QUALITY, 40.0, 0.5), (COMPLETION, 1.0, 1.0)},
    }
    bad = []
    for (sid, name), want in expected.items():
        p = by_id[sid].param(name)
        if (p.lower, p.upper, p.step) != want:
            bad.append(f"{sid}.{name}")
    for sid, want in slos.items():
        got = {(s.variable, s.threshold, s.weight, s.comparator) for s in by_id[sid].slos}
        if got != {w + ("at_least",) for w in want}:
            bad.append(f"{sid}.slos")
    budget = ExperimentConfig().budget
    if budget != 8.0:
        bad.append("budget")
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 1.0
    criterion("1 default spec fidelity", ok, f"mismatches={bad} in {elapsed:.3f}s")
    assert ok


def test_criterion_2_regression_recovery(criterion):
    t0 = time.perf_counter()
    specs = default_specs()
    truth = default_truth(0.0)
    store, _ = explored_store(30, seed=0, sigma=0.0, specs=specs)
    parts, ok = [], True
    for spec in specs:
        m = fit_service(store, spec, spec.completion_parents)
        err = grid_max_error(m, spec, truth)
        ok &= m.r2 >= 0.99 and err <= 0.05
        parts.append(f"{spec.id} R2={m.r2:.4f} max_err={err:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 5.0
    criterion("2 regression recovery", ok, "; ".join(parts) + f" in {elapsed:.2f}s")
    assert ok


def perturbed_truths(n=10, seed=2024):
    rng = np.random.default_rng(seed)
    base = default_truth(0.0)
    for _ in range(n):
        yield base.scaled({sid: tuple(rng.uniform(0.8, 1.2, 2)) for sid in base.services})


def test_criterion_3_solver_vs_oracle(criterion):
    specs = default_specs()
    rows, ok = [], True
    t_oracle = t_solve = 0.0
    for i, truth in enumerate(itertools.chain([default_truth(0.0)], perturbed_truths())):
        t0 = time.perf_counter()
        _, best = oracle_solve(truth=truth, specs=specs)
        t1 = time.perf_counter()
        obj = ObjectiveSpec(specs, truth_predictors(truth, specs), 8.0)
        value = obj.evaluate(solve(obj, np.random.default_rng(i)))
        t2 = time.perf_counter()
        need = 0.97 if i == 0 else 0.95
        ok &= value >= need * best and t2 - t1 < 1.0 and t1 - t0 <= 120.0
        t_oracle, t_solve = max(t_oracle, t1 - t0), max(t_solve, t2 - t1)
        rows.append(value / best)
    criterion("3 solver vs oracle", ok,
              f"default ratio={rows[0]:.4f}, perturbed min ratio={min(rows[1:]):.4f}, "
              f"max oracle {t_oracle:.1f}s, max solve {t_solve:.3f}s")
    assert ok


def test_criterion_4_learning_arc(criterion):
    t0 = time.perf_counter()
    _, oracle = oracle_solve(truth=default_truth(0.0), specs=default_specs())
    hits, rising, last10 = 0, 0, []
    for seed in range(20):
        trace = run_experiment(ExperimentConfig(seed=seed))
        tail = float(trace.globals()[-10:].mean())
        last10.append(tail)
        hits += tail >= 0.95 * oracle
        rising += trace.phase_mean(EXPLOIT) > trace.phase_mean(EXPLORE)
    elapsed = time.perf_counter() - t0
    ok = hits >= 18 and rising == 20 and elapsed < 120.0
    criterion("4 learning arc", ok,
              f"{hits}/20 seeds at >=95% of oracle {oracle:.4f} (last-10 min {min(last10):.4f}, "
              f"mean {np.mean(last10):.4f}); exploit>explore {rising}/20; {elapsed:.1f}s")
    assert ok


def test_criterion_5_invariants(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    specs = default_specs()
    cycles, invalid = 0, 0
    while cycles < 1000:
        # each episode draws its own scenario, noise, budget, solver settings and phase mix
        budget = float(rng.uniform(1.0, 16.0))
        truth = default_truth(float(rng.uniform(0.0, 0.1))).scaled(
            {sid: tuple(rng.uniform(0.5, 1.5, 2)) for sid in ("qr", "cv", "pc")})
        env = Environment(specs, truth, seed=int(rng.integers(2**31)), budget=budget)
        settings = SolverSettings(restarts=int(rng.integers(0, 9)), sweep_cap=int(rng.integers(1, 21)))
        window = None if rng.random() < 0.5 else int(rng.integers(10, 40))
        agent = Agent(specs, budget=budget, rng=int(rng.integers(2**31)), settings=settings, window=window)
        store = MetricStore()
        p_exploit = rng.uniform(0.2, 0.8)
        for c in range(int(rng.integers(10, 40))):
            phase = EXPLOIT if rng.random() < p_exploit else EXPLORE
            a = agent.cycle(store, phase)
            bad = validate_assignment(a, specs, budget)
            invalid += bool(bad) or a.total_cores() > budget + 1e-9
            assert env.apply(a) == []
            for r in env.step(c):
                store.append(r)
            cycles += 1
    t_cycles = time.perf_counter() - t0

    n = 100_000
    thr = rng.uniform(1e-3, 1e3, n)
    x, y = rng.uniform(-2e3, 2e3, n), rng.uniform(-2e3, 2e3, n)
    lo, hi = np.minimum(x, y), np.maximum(x, y)
    slo = SloSpec(DATA_QUALITY, 1.0, 1.0)
    f_lo, f_hi = slo_fulfillment(lo / thr, slo), slo_fulfillment(hi / thr, slo)
    monotone = bool(np.all((0 <= f_lo) & (f_lo <= f_hi) & (f_hi <= 1)))
    # scalar path cross-check on a sample
    for i in rng.integers(0, n, 200):
        s = SloSpec(DATA_QUALITY, float(thr[i]), 1.0)
        monotone &= slo_fulfillment(float(lo[i]), s) == pytest.approx(float(f_lo[i]), abs=1e-12)
    k = 3
    vals = rng.uniform(0, 2, (n, k))
    w = rng.uniform(1e-3, 10, (n, k))
    scale = rng.uniform(1e-3, 1e3, (n, 1))
    f = np.clip(vals, 0, 1)
    a_ = (f * w).sum(1) / w.sum(1)
    b_ = (f * w * scale).sum(1) / (w * scale).sum(1)
    invariant = bool(np.max(np.abs(a_ - b_)) <= 1e-12)
    for i in rng.integers(0, n, 200):
        slos = [SloSpec(f"v{j}", 1.0, float(w[i, j])) for j in range(k)]
        slos2 = [SloSpec(f"v{j}", 1.0, float(w[i, j] * scale[i, 0])) for j in range(k)]
        m = {f"v{j}": float(vals[i, j]) for j in range(k)}
        invariant &= abs(service_fulfillment(m, slos) - service_fulfillment(m, slos2)) <= 1e-12
        invariant &= abs(service_fulfillment(m, slos) - a_[i]) <= 1e-12
    elapsed = time.perf_counter() - t0
    ok = invalid == 0 and monotone and invariant and elapsed < 30.0
    criterion("5 invariant suite", ok,
              f"{cycles} fuzzed cycles, {invalid} invalid ({t_cycles:.1f}s); monotone={monotone}, "
              f"rescaling-invariant={invariant} on 1e5 inputs; {elapsed:.1f}s")
    assert ok


def test_criterion_6_local_non_dominance(criterion):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(seed=0)
    trace = run_experiment(cfg)
    last = trace.entries[-1]
    models = {sid: RegressionModel.from_dict(d) for sid, d in last.diagnostics["models"].items()}
    obj = assemble_objective(models, cfg.specs, cfg.budget, cfg.solver)
    from slo_autoscale.core import Assignment
    a = Assignment.from_dict(last.assignment, cfg.budget)
    moves = improving_moves(obj, a)
    elapsed = time.perf_counter() - t0
    ok = last.phase == EXPLOIT and moves == [] and elapsed < 10.0
    criterion("6 local non-dominance", ok, f"improving single moves={moves} in {elapsed:.2f}s")
    assert ok


def test_criterion_7_determinism_and_persistence(criterion, tmp_path):
    import json
    import threading
    import urllib.error
    import urllib.request

    t0 = time.perf_counter()
    paths = [tmp_path / f"trace{i}.jsonl" for i in range(2)]
    stores = [tmp_path / f"store{i}.jsonl" for i in range(2)]
    for p, s in zip(paths, stores):
        run_experiment(ExperimentConfig(seed=11, trace_path=str(p), store_path=str(s)))
    identical = paths[0].read_bytes() == paths[1].read_bytes() and stores[0].read_bytes() == stores[1].read_bytes()
    trace = Trace.load(paths[0])
    trace_rt = trace.dumps() == paths[0].read_text()
    store = MetricStore.load(stores[0])
    store.persist(tmp_path / "again.jsonl")
    store_rt = (tmp_path / "again.jsonl").read_bytes() == stores[0].read_bytes() and len(store) == 180

    plane = ControlPlane(Environment(default_specs(), default_truth(), seed=0))
    server = make_server(plane, "127.0.0.1", 0)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        url = f"http://127.0.0.1:{server.server_address[1]}/services/cv/parameters"
        req = urllib.request.Request(url, data=json.dumps({"data_quality": 300}).encode(), method="POST")
        try:
            urllib.request.urlopen(req, timeout=5)
            status, body = 200, {}
        except urllib.error.HTTPError as exc:
            status, body = exc.code, json.loads(exc.read())
    finally:
        server.shutdown()
        server.server_close()
    http_ok = status == 400 and [v["kind"] for v in body.get("violations", [])] == ["off-lattice"]
    elapsed = time.perf_counter() - t0
    ok = identical and trace_rt and store_rt and http_ok and elapsed < 10.0
    criterion("7 determinism and persistence", ok,
              f"identical={identical}, trace_rt={trace_rt}, store_rt={store_rt}, "
              f"http_off_lattice={status}; {elapsed:.2f}s")
    assert ok
