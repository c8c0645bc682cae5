"""Append-only time-series store for per-service metric records.

Records persist as JSON Lines, one record per line::

    {"cycle": 3, "service": "qr", "metrics": {"cores": 2.0, "data_quality": 700.0, "completion": 0.9}}
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import MetricRecord


class OrderingError(ValueError):
    pass


class UnknownColumnError(KeyError):
    def __init__(self, column: str):
        super().__init__(column)
        self.column = column

    def __str__(self):
        return f"unknown column {self.column!r}"


class MalformedLineError(ValueError):
    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno


@dataclass
class MetricTable:
    columns: tuple[str, ...]
    cycles: np.ndarray  # int, ascending
    values: np.ndarray  # shape (rows, len(columns))

    def __len__(self):
        return len(self.cycles)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise UnknownColumnError(name) from None

    @property
    def rows(self) -> list[tuple[int, tuple[float, ...]]]:
        return [(int(c), tuple(float(x) for x in row)) for c, row in zip(self.cycles, self.values)]


class MetricStore:
    """In-memory, unbounded, append-only. Writes are serialized; reads copy under the lock."""

    def __init__(self, records: Sequence[MetricRecord] = ()):
        self._lock = threading.RLock()
        self._records: list[MetricRecord] = []
        self._by_service: dict[str, list[MetricRecord]] = {}
        for r in records:
            self.append(r)

    def append(self, record: MetricRecord) -> None:
        with self._lock:
            series = self._by_service.setdefault(record.service, [])
            if series and record.cycle < series[-1].cycle:
                raise OrderingError(
                    f"{record.service}: cycle {record.cycle} precedes stored cycle {series[-1].cycle}")
            rec = MetricRecord(record.cycle, record.service, dict(record.metrics))
            series.append(rec)
            self._records.append(rec)

    def __len__(self):
        with self._lock:
            return len(self._records)

    def __eq__(self, other):
        if not isinstance(other, MetricStore):
            return NotImplemented
        return self.snapshot() == other.snapshot()

    def services(self) -> list[str]:
        with self._lock:
            return list(self._by_service)

    def snapshot(self) -> list[MetricRecord]:
        with self._lock:
            return [MetricRecord(r.cycle, r.service, dict(r.metrics)) for r in self._records]

    def records(self, service: str, last: int | None = None) -> list[MetricRecord]:
        with self._lock:
            series = self._by_service.get(service, [])
            if last is not None:
                series = series[-last:] if last > 0 else []
            return [MetricRecord(r.cycle, r.service, dict(r.metrics)) for r in series]

    def latest(self, service: str) -> MetricRecord | None:
        recs = self.records(service, last=1)
        return recs[0] if recs else None

    def to_table(self, service: str, columns: Sequence[str], last: int | None = None) -> MetricTable:
        columns = tuple(columns)
        recs = self.records(service, last)
        if recs:
            for c in columns:
                if any(c not in r.metrics for r in recs):
                    raise UnknownColumnError(c)
        values = np.array([[r.metrics[c] for c in columns] for r in recs], dtype=float).reshape(len(recs), len(columns))
        cycles = np.array([r.cycle for r in recs], dtype=int)
        return MetricTable(columns, cycles, values)

    def persist(self, path) -> None:
        lines = [json.dumps(r.to_dict()) for r in self.snapshot()]
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, path) -> "MetricStore":
        store = cls()
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = MetricRecord.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
                    raise MalformedLineError(lineno, str(exc)) from exc
                store.append(rec)
        return store
