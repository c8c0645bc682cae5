"""Shared vocabulary: parameter and SLO specs, assignments, fulfillment scoring.

Scoring lives here and only here. An at-least SLO scores ``clamp(value /
threshold, 0, 1)``; a service scores the weighted mean of its SLO scores; the
device scores the unweighted mean of its services.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

CORES = "cores"
DATA_QUALITY = "data_quality"
MODEL_SIZE = "model_size"
COMPLETION = "completion"

DEFAULT_BUDGET = 8.0
# Table bounds for cores are open at 0; anything below this is rejected so
# throughput never divides by ~0.
MIN_CORES = 0.1
LATTICE_TOL = 1e-9
BUDGET_TOL = 1e-9


class InvalidSloError(ValueError):
    pass


class IncompleteMetricsError(ValueError):
    def __init__(self, variable: str):
        super().__init__(f"missing variable {variable!r}")
        self.variable = variable


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    lower: float
    upper: float
    step: float | None = None  # None means continuous
    adjustable: bool = True

    def __post_init__(self):
        if not self.lower < self.upper:
            raise SpecError(f"{self.name}: lower {self.lower} must be < upper {self.upper}")
        if self.step is not None:
            if self.step <= 0:
                raise SpecError(f"{self.name}: step must be positive")
            n = (self.upper - self.lower) / self.step
            if abs(n - round(n)) > LATTICE_TOL * max(1.0, n):
                raise SpecError(f"{self.name}: range is not a multiple of step {self.step}")

    @property
    def discrete(self) -> bool:
        return self.step is not None

    def lattice(self) -> np.ndarray:
        if self.step is None:
            raise SpecError(f"{self.name} is continuous")
        n = int(round((self.upper - self.lower) / self.step))
        return self.lower + self.step * np.arange(n + 1)

    def on_lattice(self, value: float) -> bool:
        if self.step is None:
            return True
        k = (value - self.lower) / self.step
        return abs(k - round(k)) <= LATTICE_TOL * max(1.0, abs(k))

    def snap(self, value: float) -> float:
        """Nearest in-bounds value (lattice point for discrete parameters)."""
        v = min(max(value, self.lower), self.upper)
        if self.step is None:
            return v
        k = round((v - self.lower) / self.step)
        return float(self.lower + k * self.step)

    def to_dict(self) -> dict:
        return {"name": self.name, "lower": self.lower, "upper": self.upper,
                "step": self.step, "adjustable": self.adjustable}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParameterSpec":
        step = d.get("step")
        return cls(d["name"], float(d["lower"]), float(d["upper"]),
                   None if step is None else float(step), bool(d.get("adjustable", True)))


@dataclass(frozen=True)
class SloSpec:
    variable: str
    threshold: float
    weight: float
    comparator: str = "at_least"

    def __post_init__(self):
        if self.comparator != "at_least":
            raise SpecError(f"unsupported comparator {self.comparator!r}")
        if not self.weight > 0:
            raise SpecError(f"SLO on {self.variable}: weight must be positive")

    def to_dict(self) -> dict:
        return {"variable": self.variable, "comparator": self.comparator,
                "threshold": self.threshold, "weight": self.weight}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SloSpec":
        return cls(d["variable"], float(d["threshold"]), float(d["weight"]),
                   d.get("comparator", "at_least"))


@dataclass(frozen=True)
class ServiceSpec:
    id: str
    kind: str
    parameters: tuple[ParameterSpec, ...]
    slos: tuple[SloSpec, ...]
    completion_parents: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ("QR", "CV", "PC"):
            raise SpecError(f"unknown service kind {self.kind!r}")
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise SpecError(f"{self.id}: duplicate parameter names")
        comp = self.param(COMPLETION)
        if comp is None or comp.adjustable or comp.step is not None or (comp.lower, comp.upper) != (0.0, 1.0):
            raise SpecError(f"{self.id}: completion must be observed-only, continuous, bounds [0, 1]")
        core = self.param(CORES)
        if core is None or not core.adjustable:
            raise SpecError(f"{self.id}: an adjustable cores parameter is required")
        for slo in self.slos:
            p = self.param(slo.variable)
            if p is None:
                raise SpecError(f"{self.id}: SLO on undeclared variable {slo.variable!r}")
            if not p.lower <= slo.threshold <= p.upper:
                raise SpecError(f"{self.id}: SLO threshold {slo.threshold} outside bounds of {p.name}")
        adjustable = {p.name for p in self.parameters if p.adjustable}
        for name in self.completion_parents:
            if name not in adjustable:
                raise SpecError(f"{self.id}: completion parent {name!r} is not adjustable")

    def param(self, name: str) -> ParameterSpec | None:
        for p in self.parameters:
            if p.name == name:
                return p
        return None

    @property
    def adjustable(self) -> tuple[ParameterSpec, ...]:
        return tuple(p for p in self.parameters if p.adjustable)

    @property
    def discrete(self) -> tuple[ParameterSpec, ...]:
        return tuple(p for p in self.parameters if p.adjustable and p.discrete)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind,
                "parameters": [p.to_dict() for p in self.parameters],
                "slos": [s.to_dict() for s in self.slos],
                "completion_parents": list(self.completion_parents)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ServiceSpec":
        return cls(d["id"], d["kind"],
                   tuple(ParameterSpec.from_dict(p) for p in d["parameters"]),
                   tuple(SloSpec.from_dict(s) for s in d["slos"]),
                   tuple(d["completion_parents"]))


def _cores() -> ParameterSpec:
    return ParameterSpec(CORES, 0.0, 8.0)


def _completion() -> ParameterSpec:
    return ParameterSpec(COMPLETION, 0.0, 1.0, adjustable=False)


def default_specs() -> list[ServiceSpec]:
    """QR reader, YOLO detector and point-cloud mapper with their SLOs and weights."""
    qr = ServiceSpec(
        "qr", "QR",
        (_cores(), ParameterSpec(DATA_QUALITY, 100.0, 1000.0, 1.0), _completion()),
        (SloSpec(DATA_QUALITY, 800.0, 0.5), SloSpec(COMPLETION, 1.0, 1.0)),
        (CORES, DATA_QUALITY),
    )
    # model_size 1..4 indexes the YOLO variant (n, s, m, l)
    cv = ServiceSpec(
        "cv", "CV",
        (_cores(), ParameterSpec(DATA_QUALITY, 128.0, 320.0, 32.0),
         ParameterSpec(MODEL_SIZE, 1.0, 4.0, 1.0), _completion()),
        (SloSpec(DATA_QUALITY, 288.0, 0.2), SloSpec(MODEL_SIZE, 3.0, 0.2),
         SloSpec(COMPLETION, 1.0, 1.0)),
        (CORES, DATA_QUALITY, MODEL_SIZE),
    )
    pc = ServiceSpec(
        "pc", "PC",
        (_cores(), ParameterSpec(DATA_QUALITY, 6.0, 60.0, 1.0), _completion()),
        (SloSpec(DATA_QUALITY, 40.0, 0.5), SloSpec(COMPLETION, 1.0, 1.0)),
        (CORES, DATA_QUALITY),
    )
    return [qr, cv, pc]


def slo_fulfillment(value, slo: SloSpec):
    """Score of one at-least SLO; works elementwise on arrays."""
    if not slo.threshold > 0:
        raise InvalidSloError(f"SLO on {slo.variable}: threshold must be positive, got {slo.threshold}")
    if isinstance(value, (int, float)):
        return min(1.0, max(0.0, value / slo.threshold))
    score = np.clip(np.asarray(value, dtype=float) / slo.threshold, 0.0, 1.0)
    return float(score) if score.ndim == 0 else score


def service_fulfillment(metrics: Mapping[str, float], slos: Sequence[SloSpec]):
    total = 0.0
    wsum = 0.0
    for slo in slos:
        if slo.variable not in metrics:
            raise IncompleteMetricsError(slo.variable)
        total = total + slo.weight * slo_fulfillment(metrics[slo.variable], slo)
        wsum += slo.weight
    return total / wsum


def global_fulfillment(per_service: Sequence[float]) -> float:
    if len(per_service) == 0:
        raise ValueError("global fulfillment of zero services is undefined")
    return float(sum(per_service) / len(per_service))


@dataclass
class Assignment:
    values: dict[str, dict[str, float]]
    budget: float = DEFAULT_BUDGET

    def cores(self, service: str) -> float:
        return self.values[service][CORES]

    def total_cores(self) -> float:
        return math.fsum(v.get(CORES, 0.0) for v in self.values.values())

    def copy(self) -> "Assignment":
        return Assignment({s: dict(v) for s, v in self.values.items()}, self.budget)

    def to_dict(self) -> dict:
        return {s: dict(v) for s, v in self.values.items()}

    @classmethod
    def from_dict(cls, d: Mapping, budget: float = DEFAULT_BUDGET) -> "Assignment":
        return cls({s: {k: float(x) for k, x in v.items()} for s, v in d.items()}, budget)


@dataclass(frozen=True)
class Violation:
    kind: str
    service: str
    variable: str | None = None
    value: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "service": self.service, "variable": self.variable,
                "value": self.value, "detail": self.detail}

    def __str__(self):
        where = self.service if self.variable is None else f"{self.service}.{self.variable}"
        return f"{self.kind} at {where} ({self.value}): {self.detail}"


class InvalidAssignmentError(ValueError):
    def __init__(self, violations: list[Violation]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


def validate_assignment(a: Assignment, specs: Iterable[ServiceSpec], budget: float | None = None) -> list[Violation]:
    """Every reason ``a`` is not a legal joint configuration; empty when valid."""
    budget = a.budget if budget is None else budget
    specs = list(specs)
    by_id = {s.id: s for s in specs}
    out: list[Violation] = []
    for sid in a.values:
        if sid not in by_id:
            out.append(Violation("unknown-service", sid, detail="no such service"))
    for spec in specs:
        vals = a.values.get(spec.id)
        if vals is None:
            out.append(Violation("missing-service", spec.id, detail="service has no values"))
            continue
        for name, value in vals.items():
            p = spec.param(name)
            if p is None:
                out.append(Violation("unknown-parameter", spec.id, name, value, "not declared"))
            elif not p.adjustable:
                out.append(Violation("observed-only", spec.id, name, value, "cannot be set directly"))
        for p in spec.adjustable:
            if p.name not in vals:
                out.append(Violation("missing-parameter", spec.id, p.name, None, "no value"))
                continue
            v = vals[p.name]
            if not math.isfinite(v):
                out.append(Violation("out-of-bounds", spec.id, p.name, v, "not finite"))
            elif p.name == CORES:
                if v <= 0:
                    out.append(Violation("non-positive-cores", spec.id, p.name, v, "cores must be > 0"))
                elif v < MIN_CORES - BUDGET_TOL:
                    out.append(Violation("out-of-bounds", spec.id, p.name, v, f"below operational minimum {MIN_CORES}"))
                elif v > p.upper + BUDGET_TOL:
                    out.append(Violation("out-of-bounds", spec.id, p.name, v, f"above {p.upper}"))
            elif v < p.lower or v > p.upper:
                out.append(Violation("out-of-bounds", spec.id, p.name, v, f"outside [{p.lower}, {p.upper}]"))
            elif not p.on_lattice(v):
                out.append(Violation("off-lattice", spec.id, p.name, v, f"not on {p.lower} + k*{p.step}"))
    total = a.total_cores()
    if total > budget + BUDGET_TOL:
        out.append(Violation("budget-exceeded", "*", CORES, total, f"sum {total} > budget {budget}"))
    return out


@dataclass
class MetricRecord:
    cycle: int
    service: str
    metrics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"cycle": self.cycle, "service": self.service, "metrics": dict(self.metrics)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricRecord":
        return cls(int(d["cycle"]), str(d["service"]), {k: float(v) for k, v in d["metrics"].items()})


def check_record(record: MetricRecord, spec: ServiceSpec) -> None:
    expected = set(spec.variables)
    got = set(record.metrics)
    if got != expected:
        missing = sorted(expected - got)
        if missing:
            raise IncompleteMetricsError(missing[0])
        raise SpecError(f"unexpected variables {sorted(got - expected)} for {spec.id}")


def baseline_assignment(specs: Sequence[ServiceSpec], budget: float = DEFAULT_BUDGET) -> Assignment:
    """Equal core split with every discrete knob at its minimum."""
    share = budget / len(specs)
    values = {}
    for spec in specs:
        v = {CORES: min(share, spec.param(CORES).upper)}
        for p in spec.discrete:
            v[p.name] = p.lower
        values[spec.id] = v
    return Assignment(values, budget)
