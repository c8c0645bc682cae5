import numpy as np
import pytest

from slo_autoscale.core import default_specs
from slo_autoscale.env import Environment, default_truth
from slo_autoscale.metrics import MetricStore
from slo_autoscale.agent import explore_action

CRITERIA: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def criterion():
    def record(name: str, ok: bool, detail: str) -> bool:
        CRITERIA.append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok
    return record


@pytest.fixture
def specs():
    return default_specs()


@pytest.fixture
def by_id(specs):
    return {s.id: s for s in specs}


def explored_store(n: int, seed: int = 0, sigma: float = 0.0, specs=None) -> tuple[MetricStore, Environment]:
    """Store filled with ``n`` random exploration cycles."""
    specs = specs or default_specs()
    env = Environment(specs, default_truth(sigma), seed=seed)
    rng = np.random.default_rng(seed + 1000)
    store = MetricStore()
    for cycle in range(n):
        assert env.apply(explore_action(specs, rng)) == []
        for r in env.step(cycle):
            store.append(r)
    return store, env
