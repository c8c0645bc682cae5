"""Global objective over all services and its numerical maximization.

``solve`` runs restarted block coordinate ascent: each block is one service's
discrete lattice crossed with nearby core values, other services held fixed,
followed by pairwise core transfers. ``oracle_solve`` enumerates a coarsened
joint lattice exhaustively against the noise-free ground truth.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import (
    COMPLETION, CORES, DATA_QUALITY, MIN_CORES, MODEL_SIZE, Assignment, InvalidAssignmentError,
    ServiceSpec, SpecError, service_fulfillment, validate_assignment,
)
from .env import Environment, GroundTruthModel, ServiceTruth

TIE_TOL = 1e-12


class CompletionPredictor(Protocol):
    """``predict_batch`` is required; an optional ``predict_one`` speeds up scalar calls."""

    def predict_batch(self, columns: Mapping[str, np.ndarray]) -> np.ndarray: ...


@dataclass(frozen=True)
class TruthPredictor:
    """Noise-free ground truth behind the same interface as a fitted model."""

    truth: ServiceTruth
    parents: tuple[str, ...] = (CORES, DATA_QUALITY)

    def predict_batch(self, columns):
        return self.truth.completion(columns[CORES], columns[DATA_QUALITY], columns.get(MODEL_SIZE))

    def predict_one(self, values):
        return float(self.predict_batch(values))


def truth_predictors(truth: GroundTruthModel, specs: Sequence[ServiceSpec]) -> dict[str, TruthPredictor]:
    return {s.id: TruthPredictor(truth.services[s.id], tuple(s.completion_parents)) for s in specs}


@dataclass
class SolverSettings:
    sweep_cap: int = 20
    core_step: float = 0.25
    restarts: int = 8
    tolerance: float = 1e-4
    # lattices longer than coarse_above are scanned every coarse_stride
    # points, then refined within +-fine_radius points of the best
    coarse_above: int = 100
    coarse_stride: int = 25
    fine_radius: int = 25

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SolverSettings":
        known = cls().__dict__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown solver settings {sorted(unknown)}")
        return cls(**{k: type(known[k])(v) for k, v in d.items()})


@dataclass
class ObjectiveSpec:
    specs: list[ServiceSpec]
    predictors: dict[str, CompletionPredictor]
    budget: float = 8.0
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.budget <= len(self.specs) * MIN_CORES:
            raise SpecError(f"budget {self.budget} cannot give every service {MIN_CORES} cores")

    def spec(self, sid: str) -> ServiceSpec:
        for s in self.specs:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def service_scores(self, spec: ServiceSpec, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        metrics = dict(columns)
        metrics[COMPLETION] = self.predictors[spec.id].predict_batch(columns)
        return np.asarray(service_fulfillment(metrics, spec.slos), dtype=float)

    def service_value(self, spec: ServiceSpec, values: Mapping[str, float]) -> float:
        predictor = self.predictors[spec.id]
        one = getattr(predictor, "predict_one", None)
        if one is None:
            cols = {k: np.atleast_1d(float(v)) for k, v in values.items()}
            return float(self.service_scores(spec, cols)[0])
        metrics = dict(values)
        metrics[COMPLETION] = one(values)
        return float(service_fulfillment(metrics, spec.slos))

    def evaluate(self, a: Assignment) -> float:
        """Predicted global fulfillment of a valid assignment."""
        violations = validate_assignment(a, self.specs, self.budget)
        if violations:
            raise InvalidAssignmentError(violations)
        return float(np.mean([self.service_value(s, a.values[s.id]) for s in self.specs]))


def assemble_objective(models: Mapping[str, CompletionPredictor], specs: Sequence[ServiceSpec],
                       budget: float = 8.0, settings: SolverSettings | None = None) -> ObjectiveSpec:
    specs = list(specs)
    for spec in specs:
        if spec.id not in models:
            raise SpecError(f"no model for service {spec.id!r}")
        adjustable = {p.name for p in spec.adjustable}
        parents = getattr(models[spec.id], "parents", ())
        stray = [p for p in parents if p not in adjustable]
        if stray:
            raise SpecError(f"{spec.id}: model parents {stray} are not adjustable parameters")
    extra = set(models) - {s.id for s in specs}
    if extra:
        raise SpecError(f"models for unknown services {sorted(extra)}")
    return ObjectiveSpec(specs, dict(models), budget, settings or SolverSettings())


def _tiebreak(values: Mapping[str, float]) -> tuple[float, float, float]:
    return (values.get(CORES, 0.0), values.get(MODEL_SIZE, 0.0), values.get(DATA_QUALITY, 0.0))


def _assignment_key(obj: ObjectiveSpec, a: Assignment) -> tuple[float, float, float]:
    tot = [0.0, 0.0, 0.0]
    for v in a.values.values():
        for i, x in enumerate(_tiebreak(v)):
            tot[i] += x
    return tuple(tot)


def _pick(scores: np.ndarray, keys: np.ndarray) -> int:
    """Index of the best score; near-ties go to the lexicographically smallest key row."""
    best = scores.max()
    tied = np.flatnonzero(scores >= best - TIE_TOL)
    if len(tied) == 1:
        return int(tied[0])
    order = np.lexsort(keys[tied].T[::-1])
    return int(tied[order[0]])


def _core_candidates(current: float, lo: float, hi: float, step: float) -> np.ndarray:
    k_lo = int(np.ceil((lo - current) / step - 1e-9))
    k_hi = int(np.floor((hi - current) / step + 1e-9))
    ks = np.arange(k_lo, k_hi + 1)
    c = current + ks * step
    c = c[(c >= lo - 1e-9) & (c <= hi + 1e-9)]
    if not np.any(np.isclose(c, current, rtol=0.0, atol=1e-12)):
        c = np.append(c, current)
    return c


def _lattice_values(spec_param, settings: SolverSettings, current: float, coarse: bool) -> np.ndarray:
    lat = spec_param.lattice()
    if coarse and len(lat) > settings.coarse_above:
        idx = np.arange(0, len(lat), settings.coarse_stride)
        lat = np.union1d(lat[idx], [lat[-1], current])
    return lat


def _scan(obj: ObjectiveSpec, spec: ServiceSpec, grids: dict[str, np.ndarray], cores: np.ndarray):
    names = list(grids) + [CORES]
    mesh = np.meshgrid(*[grids[n] for n in grids], cores, indexing="ij")
    cols = {n: m.ravel() for n, m in zip(names, mesh)}
    scores = obj.service_scores(spec, cols)
    keys = np.column_stack([cols[CORES], cols.get(MODEL_SIZE, np.zeros_like(scores)),
                            cols.get(DATA_QUALITY, np.zeros_like(scores))])
    i = _pick(scores, keys)
    return float(scores[i]), {n: float(cols[n][i]) for n in names}


def _optimize_block(obj: ObjectiveSpec, a: Assignment, spec: ServiceSpec) -> float:
    """Improve one service in place; returns its new score."""
    s = obj.settings
    cur = a.values[spec.id]
    others = sum(a.values[o.id][CORES] for o in obj.specs if o.id != spec.id)
    hi = min(obj.budget - others, spec.param(CORES).upper)
    cores = _core_candidates(cur[CORES], MIN_CORES, hi, s.core_step)
    discrete = spec.discrete
    grids = {p.name: _lattice_values(p, s, cur[p.name], coarse=True) for p in discrete}
    best_score, best = _scan(obj, spec, grids, cores)
    refine = [p for p in discrete if len(p.lattice()) > s.coarse_above]
    if refine:
        fine = {}
        for p in discrete:
            if p in refine:
                lo = best[p.name] - s.fine_radius * p.step
                hi_q = best[p.name] + s.fine_radius * p.step
                lat = p.lattice()
                fine[p.name] = lat[(lat >= lo - 1e-9) & (lat <= hi_q + 1e-9)]
            else:
                fine[p.name] = np.array([best[p.name]])
        score, cand = _scan(obj, spec, fine, cores)
        if score > best_score + TIE_TOL or (score >= best_score - TIE_TOL and _tiebreak(cand) < _tiebreak(best)):
            best_score, best = score, cand
    # the coarse grid always contains the current point, so this never regresses
    for name, v in best.items():
        p = spec.param(name)
        cur[name] = p.snap(v) if p.discrete else v
    return best_score


def _transfer_cores(obj: ObjectiveSpec, a: Assignment, scores: dict[str, float]) -> None:
    step = obj.settings.core_step
    shifted: dict[tuple[str, float], float] = {}

    def value_at(spec, delta):
        key = (spec.id, delta)
        if key not in shifted:
            shifted[key] = obj.service_value(spec, {**a.values[spec.id], CORES: a.values[spec.id][CORES] + delta})
        return shifted[key]

    for src, dst in itertools.permutations(obj.specs, 2):
        cs, cd = a.values[src.id][CORES], a.values[dst.id][CORES]
        if cs - step < MIN_CORES - 1e-9 or cd + step > dst.param(CORES).upper + 1e-9:
            continue
        vs, vd = value_at(src, -step), value_at(dst, step)
        if vs + vd > scores[src.id] + scores[dst.id] + TIE_TOL:
            a.values[src.id][CORES] = cs - step
            a.values[dst.id][CORES] = cd + step
            scores[src.id], scores[dst.id] = vs, vd
            shifted = {k: v for k, v in shifted.items() if k[0] not in (src.id, dst.id)}


def _ascend(obj: ObjectiveSpec, start: Assignment) -> tuple[Assignment, float]:
    a = start.copy()
    a.budget = obj.budget
    scores = {s.id: obj.service_value(s, a.values[s.id]) for s in obj.specs}
    value = float(np.mean(list(scores.values())))
    for _ in range(obj.settings.sweep_cap):
        before = value
        for spec in obj.specs:
            scores[spec.id] = _optimize_block(obj, a, spec)
        _transfer_cores(obj, a, scores)
        value = float(np.mean(list(scores.values())))
        if value - before < obj.settings.tolerance:
            break
    return a, value


def solve(obj: ObjectiveSpec, rng: np.random.Generator, incumbent: Assignment | None = None) -> Assignment:
    """Best valid assignment found; never worse than a valid ``incumbent``."""
    from .agent import explore_action

    starts = []
    if incumbent is not None and not validate_assignment(incumbent, obj.specs, obj.budget):
        starts.append(incumbent)
    for _ in range(obj.settings.restarts):
        starts.append(explore_action(obj.specs, rng, obj.budget))
    if not starts:
        starts.append(explore_action(obj.specs, rng, obj.budget))
    best, best_value = None, -np.inf
    for start in starts:
        a, _ = _ascend(obj, start)
        value = obj.evaluate(a)
        if best is None or value > best_value + TIE_TOL or (
                value >= best_value - TIE_TOL and _assignment_key(obj, a) < _assignment_key(obj, best)):
            best, best_value = a, value
    return best


@dataclass
class Coarsening:
    strides: dict[str, dict[str, int]] = field(
        default_factory=lambda: {"qr": {DATA_QUALITY: 50}, "pc": {DATA_QUALITY: 3}})
    core_step: float = 0.25


def _best_by_core_level(obj: ObjectiveSpec, spec: ServiceSpec, coarsening: Coarsening, levels: np.ndarray):
    strides = coarsening.strides.get(spec.id, {})
    grids = {}
    for p in spec.discrete:
        stride = strides.get(p.name, 1)
        # stride is in value units; lattice points stay on the original grid
        lat = p.lattice()
        grids[p.name] = lat[::max(1, int(round(stride / p.step)))]
    table = []
    for c in levels:
        table.append(_scan(obj, spec, grids, np.array([c])))
    return table


def oracle_solve(env: Environment | None = None, coarsening: Coarsening | None = None, *,
                 truth: GroundTruthModel | None = None, specs: Sequence[ServiceSpec] | None = None,
                 budget: float | None = None) -> tuple[Assignment, float]:
    """Exhaustive optimum of the true global fulfillment over a coarsened joint lattice.

    Core splits are all compositions of the budget into multiples of the core
    step. Since global fulfillment is a mean of per-service terms, the best
    lattice point for each (service, core level) is tabulated first and every
    composition is then scored exactly.
    """
    coarsening = coarsening or Coarsening()
    truth = truth if truth is not None else env.truth
    specs = list(specs if specs is not None else env.specs)
    budget = budget if budget is not None else (env.budget if env is not None else 8.0)
    obj = ObjectiveSpec(specs, truth_predictors(truth, specs), budget)
    step = coarsening.core_step
    total = int(round(budget / step))
    caps = [int(np.floor(s.param(CORES).upper / step + 1e-9)) for s in specs]
    first = int(np.ceil(MIN_CORES / step - 1e-9))
    tables = []
    for spec, cap in zip(specs, caps):
        levels = np.arange(first, cap + 1)
        tables.append({int(k): entry for k, entry in zip(levels, _best_by_core_level(obj, spec, coarsening, levels * step))})

    best, best_val, best_key = None, -np.inf, None
    n = len(specs)

    def compositions(i, remaining):
        if i == n - 1:
            if first <= remaining <= caps[i]:
                yield (remaining,)
            return
        for k in range(first, min(caps[i], remaining - first * (n - 1 - i)) + 1):
            for rest in compositions(i + 1, remaining - k):
                yield (k,) + rest

    for ks in compositions(0, total):
        val = sum(tables[i][k][0] for i, k in enumerate(ks)) / n
        key = tuple(sum(t) for t in zip(*(_tiebreak(tables[i][k][1]) for i, k in enumerate(ks))))
        if best is None or val > best_val + TIE_TOL or (val >= best_val - TIE_TOL and key < best_key):
            best, best_val, best_key = ks, val, key
    if best is None:
        raise ValueError(f"budget {budget} cannot be split into core steps of {step}")
    values = {}
    for spec, tab, k in zip(specs, tables, best):
        v = dict(tab[k][1])
        v[CORES] = k * step
        values[spec.id] = v
    a = Assignment(values, budget)
    return a, obj.evaluate(a)


def single_moves(a: Assignment, specs: Sequence[ServiceSpec], core_step: float = 0.25, budget: float | None = None):
    """Valid neighbours differing from ``a`` in one variable by one step."""
    budget = a.budget if budget is None else budget
    for spec in specs:
        for p in spec.adjustable:
            step = core_step if p.name == CORES else p.step
            for sign in (-1.0, 1.0):
                b = a.copy()
                b.values[spec.id][p.name] = a.values[spec.id][p.name] + sign * step
                if not validate_assignment(b, specs, budget):
                    yield spec.id, p.name, b


def improving_moves(obj: ObjectiveSpec, a: Assignment, tol: float = TIE_TOL) -> list[tuple[str, str, float, float]]:
    """Single-variable moves that raise the evaluator: (service, variable, new value, gain)."""
    base = obj.evaluate(a)
    out = []
    for sid, name, b in single_moves(a, obj.specs, obj.settings.core_step, obj.budget):
        gain = obj.evaluate(b) - base
        if gain > tol:
            out.append((sid, name, b.values[sid][name], gain))
    return out
