"""Experiment loop: 30 random exploration cycles, then 30 solver-driven cycles."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .agent import EXPLOIT, EXPLORE, Agent, StructuralKnowledge
from .core import (
    CORES, DATA_QUALITY, MODEL_SIZE, Assignment, MetricRecord, ServiceSpec,
    default_specs, global_fulfillment, service_fulfillment, validate_assignment,
)
from .env import Environment, GroundTruthModel, default_truth
from .metrics import MetricStore
from .solver import SolverSettings

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    cycles_explore: int = 30
    cycles_exploit: int = 30
    budget: float = 8.0
    specs: list[ServiceSpec] = field(default_factory=default_specs)
    truth: GroundTruthModel = field(default_factory=default_truth)
    solver: SolverSettings = field(default_factory=SolverSettings)
    window: int | None = None
    trace_path: str | None = None
    store_path: str | None = None
    csv_path: str | None = None
    summary_path: str | None = None

    def validate(self) -> None:
        if self.cycles_explore < 0 or self.cycles_exploit < 0:
            raise ConfigError("cycle counts must be non-negative")
        if not self.budget > 0:
            raise ConfigError("budget must be positive")
        if self.window is not None and self.window <= 0:
            raise ConfigError("window must be positive")
        ids = [s.id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate service ids")
        missing = [i for i in ids if i not in self.truth.services]
        if missing:
            raise ConfigError(f"no truth constants for {missing}")

    @property
    def cycles(self) -> int:
        return self.cycles_explore + self.cycles_exploit

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "cycles_explore": self.cycles_explore, "cycles_exploit": self.cycles_exploit,
            "budget": self.budget, "services": [s.to_dict() for s in self.specs],
            "truth": self.truth.to_dict(), "solver": self.solver.to_dict(), "window": self.window,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {"seed", "cycles_explore", "cycles_exploit", "budget", "services", "truth", "solver",
                 "window", "trace_path", "store_path", "csv_path", "summary_path"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = cls()
        try:
            for key in ("seed", "cycles_explore", "cycles_exploit"):
                if key in d:
                    setattr(cfg, key, int(d[key]))
            if "budget" in d:
                cfg.budget = float(d["budget"])
            if "window" in d:
                cfg.window = None if d["window"] is None else int(d["window"])
            if "services" in d:
                cfg.specs = [ServiceSpec.from_dict(s) for s in d["services"]]
            if "truth" in d:
                # partial overrides merge into the defaults per service
                merged = cfg.truth.to_dict()
                for sid, consts in d["truth"].items():
                    merged.setdefault(sid, {}).update(consts)
                cfg.truth = GroundTruthModel.from_dict(merged)
            if "solver" in d:
                cfg.solver = SolverSettings.from_dict(d["solver"])
            for key in ("trace_path", "store_path", "csv_path", "summary_path"):
                if key in d:
                    setattr(cfg, key, d[key])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class TraceEntry:
    cycle: int
    phase: str
    assignment: dict[str, dict[str, float]]
    metrics: dict[str, dict[str, float]]
    fulfillment: dict[str, float]
    global_fulfillment: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"cycle": self.cycle, "phase": self.phase, "assignment": self.assignment,
                "metrics": self.metrics, "fulfillment": self.fulfillment,
                "global": self.global_fulfillment, "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TraceEntry":
        return cls(int(d["cycle"]), d["phase"], d["assignment"], d["metrics"], d["fulfillment"],
                   float(d["global"]), d.get("diagnostics", {}))


@dataclass
class Trace:
    entries: list[TraceEntry] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def globals(self) -> np.ndarray:
        return np.array([e.global_fulfillment for e in self.entries])

    def phase_mean(self, phase: str) -> float | None:
        vals = [e.global_fulfillment for e in self.entries if e.phase == phase]
        return float(np.mean(vals)) if vals else None

    def dumps(self) -> str:
        """JSON Lines; the first line carries the config."""
        lines = [json.dumps({"config": self.config})]
        lines += [json.dumps(e.to_dict()) for e in self.entries]
        return "".join(line + "\n" for line in lines)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Trace":
        trace = cls()
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    if "config" in d and "cycle" not in d:
                        trace.config = d["config"]
                    else:
                        trace.entries.append(TraceEntry.from_dict(d))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from exc
        return trace


def score_records(records: Sequence[MetricRecord], specs: Sequence[ServiceSpec]) -> tuple[dict[str, float], float]:
    by_id = {r.service: r for r in records}
    per = {s.id: float(service_fulfillment(by_id[s.id].metrics, s.slos)) for s in specs}
    return per, global_fulfillment(list(per.values()))


def run_experiment(cfg: ExperimentConfig) -> Trace:
    cfg.validate()
    env_seq, agent_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    env = Environment(cfg.specs, cfg.truth, seed=int(env_seq.generate_state(1)[0]), budget=cfg.budget)
    store = MetricStore()
    knowledge = StructuralKnowledge.from_specs(cfg.specs)
    agent = Agent(cfg.specs, knowledge, cfg.budget, np.random.default_rng(agent_seq), cfg.solver, cfg.window)
    trace = Trace(config=cfg.to_dict())
    for cycle in range(cfg.cycles):
        phase = EXPLORE if cycle < cfg.cycles_explore else EXPLOIT
        action = agent.cycle(store, phase)
        violations = env.apply(action)
        if violations:
            raise RuntimeError(f"agent produced an invalid assignment: {violations}")
        records = env.step(cycle)
        for r in records:
            store.append(r)
        per, glob = score_records(records, cfg.specs)
        log.debug("cycle %d %s global=%.4f", cycle, phase, glob)
        trace.entries.append(TraceEntry(
            cycle, phase, action.to_dict(), {r.service: dict(r.metrics) for r in records},
            per, glob, agent.last.to_dict()))
    if cfg.trace_path:
        trace.save(cfg.trace_path)
    if cfg.store_path:
        store.persist(cfg.store_path)
    return trace


def rescore(trace: Trace, specs: Sequence[ServiceSpec]) -> list[tuple[dict[str, float], float]]:
    """Fulfillment recomputed from each entry's own metrics."""
    out = []
    for e in trace.entries:
        recs = [MetricRecord(e.cycle, sid, m) for sid, m in e.metrics.items()]
        out.append(score_records(recs, specs))
    return out


def validate_trace(trace: Trace, specs: Sequence[ServiceSpec], budget: float) -> list:
    bad = []
    for e in trace.entries:
        bad += validate_assignment(Assignment.from_dict(e.assignment, budget), specs, budget)
    return bad


@dataclass
class Summary:
    cycles: int
    first5_mean: float
    last10_mean: float
    explore_mean: float | None
    exploit_mean: float | None
    oracle_value: float | None = None
    cycles_to_95: int | None = None

    def text(self) -> str:
        lines = [f"cycles: {self.cycles}",
                 f"mean global fulfillment, first 5 cycles: {self.first5_mean:.4f}",
                 f"mean global fulfillment, last 10 cycles: {self.last10_mean:.4f}"]
        if self.explore_mean is not None:
            lines.append(f"exploration mean: {self.explore_mean:.4f}")
        if self.exploit_mean is not None:
            lines.append(f"exploitation mean: {self.exploit_mean:.4f}")
        if self.oracle_value is not None:
            lines.append(f"oracle value: {self.oracle_value:.4f}")
            lines.append(f"last-10 / oracle: {self.last10_mean / self.oracle_value:.4f}")
            hit = "never" if self.cycles_to_95 is None else str(self.cycles_to_95)
            lines.append(f"first cycle at >= 95% of oracle: {hit}")
        return "\n".join(lines) + "\n"


def _csv_columns(trace: Trace) -> list[str]:
    cols = ["cycle", "phase", "global"]
    first = trace.entries[0]
    for sid in first.fulfillment:
        cols.append(f"{sid}_fulfillment")
        for var in (CORES, DATA_QUALITY, MODEL_SIZE):
            if var in first.assignment[sid]:
                cols.append(f"{sid}_{var}")
        cols.append(f"{sid}_r2")
    return cols


def report(trace: Trace, oracle_value: float | None = None, csv_path=None,
           summary_path=None) -> tuple[Summary, str]:
    if not trace.entries:
        raise ValueError("cannot report on an empty trace")
    g = trace.globals()
    hit = None
    if oracle_value is not None:
        idx = np.flatnonzero(g >= 0.95 * oracle_value)
        hit = int(trace.entries[idx[0]].cycle) if len(idx) else None
    summary = Summary(len(trace), float(g[:5].mean()), float(g[-10:].mean()),
                      trace.phase_mean(EXPLORE), trace.phase_mean(EXPLOIT), oracle_value, hit)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = _csv_columns(trace)
    writer.writerow(cols)
    for e in trace.entries:
        models = e.diagnostics.get("models", {})
        row = {"cycle": e.cycle, "phase": e.phase, "global": repr(e.global_fulfillment)}
        for sid, f in e.fulfillment.items():
            row[f"{sid}_fulfillment"] = repr(f)
            for var, v in e.assignment[sid].items():
                row[f"{sid}_{var}"] = repr(v)
            r2 = models.get(sid, {}).get("r2")
            row[f"{sid}_r2"] = "" if r2 is None else repr(r2)
        writer.writerow([row.get(c, "") for c in cols])
    text = buf.getvalue()
    if csv_path:
        Path(csv_path).write_text(text)
    if summary_path:
        Path(summary_path).write_text(summary.text())
    return summary, text
