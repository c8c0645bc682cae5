"""Scaling agent: regression world models plus the explore/exploit policy."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    COMPLETION, CORES, DATA_QUALITY, MIN_CORES, MODEL_SIZE, Assignment,
    IncompleteMetricsError, ServiceSpec,
)
from .metrics import MetricStore, MetricTable

log = logging.getLogger(__name__)

RIDGE = 1e-8
EXPLORE = "explore"
EXPLOIT = "exploit"


class InsufficientSamplesError(ValueError):
    def __init__(self, rows: int, required: int):
        super().__init__(f"{rows} rows cannot determine {required} coefficients")
        self.rows = rows
        self.required = required


@dataclass(frozen=True)
class StructuralKnowledge:
    """Which variables drive completion, per service (declared, not learned)."""

    parents: Mapping[str, tuple[str, ...]]
    target: str = COMPLETION

    @classmethod
    def from_specs(cls, specs: Sequence[ServiceSpec]) -> "StructuralKnowledge":
        return cls({s.id: tuple(s.completion_parents) for s in specs})


def default_knowledge() -> StructuralKnowledge:
    return StructuralKnowledge({
        "qr": (CORES, DATA_QUALITY),
        "cv": (CORES, DATA_QUALITY, MODEL_SIZE),
        "pc": (CORES, DATA_QUALITY),
    })


def n_features(p: int) -> int:
    return 1 + p + p * (p + 1) // 2


@functools.lru_cache(maxsize=None)
def _pairs(p: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(p)


def poly_features(z: np.ndarray) -> np.ndarray:
    """[1, z_i..., z_i*z_j for i <= j] for each row of ``z``."""
    z = np.atleast_2d(z)
    i, j = _pairs(z.shape[1])
    return np.hstack([np.ones((z.shape[0], 1)), z, z[:, i] * z[:, j]])


@dataclass
class RegressionModel:
    parents: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    coefficients: np.ndarray
    n_samples: int = 0
    r2: float = float("nan")

    def features(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        cols = []
        for name in self.parents:
            if name not in columns:
                raise IncompleteMetricsError(name)
            cols.append(np.asarray(columns[name], dtype=float))
        x = np.stack(np.broadcast_arrays(*cols), axis=1) if cols else np.zeros((1, 0))
        z = (x - self.lower) / (self.upper - self.lower)
        return poly_features(z)

    def raw(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        return self.features(columns) @ self.coefficients

    def predict_batch(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.clip(self.raw(columns), 0.0, 1.0)

    def predict_one(self, values: Mapping[str, float]) -> float:
        """Scalar fast path of ``predict_batch``; the solver calls this in its inner loop."""
        z = []
        for name, lo, hi in zip(self.parents, self.lower.tolist(), self.upper.tolist()):
            if name not in values:
                raise IncompleteMetricsError(name)
            z.append((values[name] - lo) / (hi - lo))
        c = self.coefficients.tolist()
        p = len(z)
        out = c[0]
        for i in range(p):
            out += c[1 + i] * z[i]
        k = 1 + p
        for i in range(p):
            for j in range(i, p):
                out += c[k] * z[i] * z[j]
                k += 1
        return min(1.0, max(0.0, out))

    def to_dict(self) -> dict:
        return {"parents": list(self.parents), "lower": [float(x) for x in self.lower],
                "upper": [float(x) for x in self.upper],
                "coefficients": [float(c) for c in self.coefficients],
                "n_samples": self.n_samples, "r2": self.r2}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegressionModel":
        return cls(tuple(d["parents"]), np.array(d["lower"], dtype=float), np.array(d["upper"], dtype=float),
                   np.array(d["coefficients"], dtype=float), int(d.get("n_samples", 0)),
                   float(d.get("r2", float("nan"))))


def predict(model: RegressionModel, params: Mapping[str, float]) -> float:
    for k in model.parents:
        if k not in params:
            raise IncompleteMetricsError(k)
    return model.predict_one(params)


def _censored_lstsq(F: np.ndarray, y: np.ndarray, ridge: float = RIDGE, max_iter: int = 100) -> np.ndarray:
    """Least squares of clamp(F @ w, 0, 1) against y.

    Rows observed at a bound only penalize predictions on the wrong side of it,
    which is exactly the loss of the clamped prediction there. Solved by
    active-set Newton steps with backtracking; the intercept is not damped.
    """
    k = F.shape[1]
    damp = np.full(k, ridge)
    damp[0] = 0.0
    hi = y >= 1.0
    lo = y <= 0.0

    def loss(w):
        f = F @ w
        r = f - y
        r = np.where(hi, np.minimum(r, 0.0), r)
        r = np.where(lo, np.maximum(r, 0.0), r)
        return float(r @ r + damp @ (w * w))

    def solve_active(active):
        Fa = F[active]
        A = Fa.T @ Fa + np.diag(damp)
        # tiny floor keeps the system solvable when rows are scarce
        A[0, 0] += ridge
        return np.linalg.solve(A, Fa.T @ y[active])

    w = solve_active(np.ones(len(y), dtype=bool))
    cur = loss(w)
    for _ in range(max_iter):
        f = F @ w
        active = ~((hi & (f >= 1.0)) | (lo & (f <= 0.0)))
        target = solve_active(active)
        t = 1.0
        while True:
            cand = w + t * (target - w)
            val = loss(cand)
            if val <= cur or t < 1e-6:
                break
            t *= 0.5
        if val > cur or np.allclose(cand, w, rtol=0.0, atol=1e-13):
            break
        w, cur = cand, val
    return w


def fit(table: MetricTable, parents: Sequence[str], lower: Sequence[float], upper: Sequence[float],
        target: str = COMPLETION) -> RegressionModel:
    """Fit a degree-2 polynomial with interactions over min-max normalized parents."""
    parents = tuple(parents)
    required = n_features(len(parents))
    if len(table) < required:
        raise InsufficientSamplesError(len(table), required)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    y = table.column(target)
    model = RegressionModel(parents, lower, upper, np.zeros(required), len(table))
    F = model.features({p: table.column(p) for p in parents})
    model.coefficients = _censored_lstsq(F, y)
    pred = np.clip(F @ model.coefficients, 0.0, 1.0)
    sse = float(np.sum((pred - y) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        model.r2 = 1.0 if sse <= 1e-12 * len(y) else 0.0
    else:
        model.r2 = 1.0 - sse / sst
    return model


def fit_service(store: MetricStore, spec: ServiceSpec, parents: Sequence[str],
                window: int | None = None) -> RegressionModel:
    table = store.to_table(spec.id, tuple(parents) + (COMPLETION,), last=window)
    lower = [spec.param(p).lower for p in parents]
    upper = [spec.param(p).upper for p in parents]
    return fit(table, parents, lower, upper)


def random_cores(n: int, budget: float, rng: np.random.Generator, floor: float = MIN_CORES) -> np.ndarray:
    """Uniform point on {c_i >= floor, sum c = budget}."""
    share = rng.dirichlet(np.ones(n))
    return floor + share * (budget - n * floor)


def explore_action(specs: Sequence[ServiceSpec], rng: np.random.Generator, budget: float = 8.0) -> Assignment:
    values = {}
    for spec in specs:
        v = {}
        for p in spec.discrete:
            lat = p.lattice()
            v[p.name] = float(lat[rng.integers(len(lat))])
        values[spec.id] = v
    cores = random_cores(len(specs), budget, rng)
    upper = min(s.param(CORES).upper for s in specs)
    if cores.max() > upper:
        # only reachable when the budget exceeds what one service may hold
        cores = _cap(cores, upper)
    for spec, c in zip(specs, cores):
        values[spec.id][CORES] = float(c)
    return Assignment(values, budget)


def _cap(cores: np.ndarray, upper: float) -> np.ndarray:
    cores = cores.copy()
    while cores.max() > upper:
        over = cores > upper
        excess = float(np.sum(cores[over] - upper))
        cores[over] = upper
        room = ~over & (cores < upper)
        cores[room] += excess / room.sum()
    return cores


@dataclass
class CycleDiagnostics:
    phase: str
    fit_count: int = 0
    fallback: bool = False
    models: dict[str, dict] = field(default_factory=dict)
    predicted_global: float | None = None

    def to_dict(self) -> dict:
        return {"phase": self.phase, "fit_count": self.fit_count, "fallback": self.fallback,
                "predicted_global": self.predicted_global, "models": self.models}


class Agent:
    """Advanced one cycle at a time by a single caller."""

    def __init__(self, specs: Sequence[ServiceSpec], knowledge: StructuralKnowledge | None = None,
                 budget: float = 8.0, rng: np.random.Generator | int | None = None,
                 settings=None, window: int | None = None):
        from .solver import SolverSettings

        self.specs = list(specs)
        self.knowledge = knowledge if knowledge is not None else StructuralKnowledge.from_specs(self.specs)
        self.budget = budget
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.settings = settings if settings is not None else SolverSettings()
        self.window = window
        self.incumbent: Assignment | None = None
        self.models: dict[str, RegressionModel] = {}
        self.last = CycleDiagnostics(EXPLORE)

    def fit_models(self, store: MetricStore) -> dict[str, RegressionModel]:
        models = {}
        for spec in self.specs:
            models[spec.id] = fit_service(store, spec, self.knowledge.parents[spec.id], self.window)
            self.last.fit_count += 1
        return models

    def cycle(self, store: MetricStore, phase: str) -> Assignment:
        from .solver import assemble_objective, solve

        if phase not in (EXPLORE, EXPLOIT):
            raise ValueError(f"unknown phase {phase!r}")
        self.last = CycleDiagnostics(phase)
        if phase == EXPLORE:
            action = explore_action(self.specs, self.rng, self.budget)
            self.incumbent = None
            return action
        try:
            models = self.fit_models(store)
        except InsufficientSamplesError as exc:
            log.info("exploit fallback to exploration: %s", exc)
            self.last.fallback = True
            return explore_action(self.specs, self.rng, self.budget)
        self.models = models
        self.last.models = {k: m.to_dict() for k, m in models.items()}
        obj = assemble_objective(models, self.specs, self.budget, self.settings)
        action = solve(obj, self.rng, incumbent=self.incumbent)
        self.last.predicted_global = obj.evaluate(action)
        self.incumbent = action
        return action


def agent_cycle(store: MetricStore, specs: Sequence[ServiceSpec], knowledge: StructuralKnowledge,
                phase: str, rng: np.random.Generator, budget: float = 8.0) -> Assignment:
    """Stateless single cycle (no incumbent)."""
    return Agent(specs, knowledge, budget, rng).cycle(store, phase)
