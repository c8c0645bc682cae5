"""Simulated co-located services.

Each service needs ``base * (q / q_ref) ** alpha * model_factor[m]`` core-seconds
per item. With ``cores`` allocated it processes ``cores / demand`` items per
second against an arrival rate ``lam``; completion is that ratio clamped to
[0, 1], plus Gaussian noise on observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .core import (
    CORES, COMPLETION, DATA_QUALITY, MODEL_SIZE, Assignment, IncompleteMetricsError,
    MetricRecord, ServiceSpec, Violation, baseline_assignment, default_specs, validate_assignment,
)
from .metrics import OrderingError


@dataclass(frozen=True)
class ServiceTruth:
    base_demand: float
    quality_exponent: float
    quality_reference: float
    arrival_rate: float = 1.0
    model_factor: Mapping[int, float] | None = None
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.base_demand <= 0 or self.arrival_rate <= 0 or self.quality_reference <= 0:
            raise ValueError("base_demand, arrival_rate and quality_reference must be positive")
        if self.quality_exponent < 0 or self.noise_sigma < 0:
            raise ValueError("quality_exponent and noise_sigma must be non-negative")
        if self.model_factor is not None:
            factors = [self.model_factor[k] for k in sorted(self.model_factor)]
            if any(f < 1 for f in factors) or any(b < a for a, b in zip(factors, factors[1:])):
                raise ValueError("model factors must be >= 1 and non-decreasing in model size")

    def demand(self, quality, model=None):
        d = self.base_demand * (np.asarray(quality, dtype=float) / self.quality_reference) ** self.quality_exponent
        if self.model_factor is not None:
            if model is None:
                raise IncompleteMetricsError(MODEL_SIZE)
            keys = np.array(sorted(self.model_factor))
            factors = np.array([self.model_factor[k] for k in keys])
            m = np.rint(np.asarray(model, dtype=float)).astype(int)
            idx = np.searchsorted(keys, m)
            if np.any(idx >= len(keys)) or np.any(keys[np.minimum(idx, len(keys) - 1)] != m):
                raise ValueError(f"model size outside {list(keys)}")
            d = d * factors[idx]
        return d

    def completion(self, cores, quality, model=None):
        rate = np.asarray(cores, dtype=float) / self.demand(quality, model)
        return np.clip(rate / self.arrival_rate, 0.0, 1.0)

    def to_dict(self) -> dict:
        d = {"base_demand": self.base_demand, "quality_exponent": self.quality_exponent,
             "quality_reference": self.quality_reference, "arrival_rate": self.arrival_rate,
             "noise_sigma": self.noise_sigma}
        if self.model_factor is not None:
            d["model_factor"] = {str(k): v for k, v in sorted(self.model_factor.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ServiceTruth":
        mf = d.get("model_factor")
        return cls(float(d["base_demand"]), float(d["quality_exponent"]), float(d["quality_reference"]),
                   float(d.get("arrival_rate", 1.0)),
                   None if mf is None else {int(k): float(v) for k, v in mf.items()},
                   float(d.get("noise_sigma", 0.02)))


@dataclass
class GroundTruthModel:
    services: dict[str, ServiceTruth] = field(default_factory=dict)

    def true_completion(self, service: str, params: Mapping[str, float]) -> float:
        t = self.services[service]
        for name in (CORES, DATA_QUALITY):
            if name not in params:
                raise IncompleteMetricsError(name)
        return float(t.completion(params[CORES], params[DATA_QUALITY], params.get(MODEL_SIZE)))

    def with_sigma(self, sigma: float) -> "GroundTruthModel":
        return GroundTruthModel({k: replace(v, noise_sigma=sigma) for k, v in self.services.items()})

    def scaled(self, factors: Mapping[str, tuple[float, float]]) -> "GroundTruthModel":
        """Copy with (base_demand, arrival_rate) multiplied per service."""
        out = dict(self.services)
        for k, (fb, fl) in factors.items():
            t = out[k]
            out[k] = replace(t, base_demand=t.base_demand * fb, arrival_rate=t.arrival_rate * fl)
        return GroundTruthModel(out)

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in self.services.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundTruthModel":
        return cls({k: ServiceTruth.from_dict(v) for k, v in d.items()})


def default_truth(sigma: float = 0.02) -> GroundTruthModel:
    return GroundTruthModel({
        "qr": ServiceTruth(2.0, 2.0, 1000.0, 1.0, None, sigma),
        "cv": ServiceTruth(1.2, 2.0, 320.0, 1.0, {1: 1.0, 2: 1.6, 3: 2.4, 4: 3.4}, sigma),
        "pc": ServiceTruth(1.5, 2.0, 60.0, 1.0, None, sigma),
    })


class Environment:
    def __init__(self, specs: Sequence[ServiceSpec] | None = None, truth: GroundTruthModel | None = None,
                 seed: int = 0, budget: float = 8.0, initial: Assignment | None = None):
        self.specs = list(specs) if specs is not None else default_specs()
        self.truth = truth if truth is not None else default_truth()
        missing = [s.id for s in self.specs if s.id not in self.truth.services]
        if missing:
            raise ValueError(f"no ground truth for services {missing}")
        self.budget = budget
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._last_cycle: int | None = None
        self.current = initial.copy() if initial is not None else baseline_assignment(self.specs, budget)
        bad = validate_assignment(self.current, self.specs, budget)
        if bad:
            raise ValueError(f"invalid initial assignment: {bad}")

    def apply(self, a: Assignment) -> list[Violation]:
        violations = validate_assignment(a, self.specs, self.budget)
        if not violations:
            self.current = a.copy()
            self.current.budget = self.budget
        return violations

    def true_completion(self, service: str, params: Mapping[str, float]) -> float:
        return self.truth.true_completion(service, params)

    def step(self, cycle: int) -> list[MetricRecord]:
        if self._last_cycle is not None and cycle <= self._last_cycle:
            raise OrderingError(f"cycle {cycle} does not follow {self._last_cycle}")
        self._last_cycle = cycle
        out = []
        for spec in self.specs:
            params = dict(self.current.values[spec.id])
            sigma = self.truth.services[spec.id].noise_sigma
            # always draw, so the noise stream does not depend on sigma
            eps = self._rng.normal(0.0, 1.0) * sigma
            observed = min(1.0, max(0.0, self.true_completion(spec.id, params) + eps))
            metrics = {p.name: params[p.name] for p in spec.adjustable}
            metrics[COMPLETION] = observed
            out.append(MetricRecord(cycle, spec.id, metrics))
        return out
