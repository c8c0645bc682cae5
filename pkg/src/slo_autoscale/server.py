"""HTTP/JSON control surface over a running environment.

    GET  /services                      specs with their current parameter values
    GET  /metrics?service=<id>&last=<n> stored records, oldest first
    GET  /fulfillment                   scores of the latest cycle
    POST /services/<id>/parameters      partial update, e.g. {"data_quality": 192, "cores": 2.5}
    POST /step                          advance the simulation by one cycle

Writes go through one lock; reads work on store snapshots.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .core import ServiceSpec, Violation, global_fulfillment, service_fulfillment
from .env import Environment
from .metrics import MetricStore

log = logging.getLogger(__name__)


class ControlPlane:
    def __init__(self, env: Environment, store: MetricStore | None = None):
        self.env = env
        self.store = store if store is not None else MetricStore()
        self.specs: dict[str, ServiceSpec] = {s.id: s for s in env.specs}
        self._write = threading.Lock()
        cycles = [r.cycle for r in self.store.snapshot()]
        self._next_cycle = max(cycles) + 1 if cycles else 0

    def services(self) -> list[dict]:
        with self._write:
            current = self.env.current.to_dict()
        return [{**spec.to_dict(), "current": current[sid]} for sid, spec in self.specs.items()]

    def metrics(self, service: str | None, last: int | None) -> list[dict]:
        if service is None:
            recs = self.store.snapshot()
            if last is not None:
                recs = recs[-last:] if last > 0 else []
        else:
            recs = self.store.records(service, last)
        return [r.to_dict() for r in recs]

    def set_parameters(self, service: str, params: dict) -> list[Violation]:
        with self._write:
            proposal = self.env.current.copy()
            proposal.values[service].update(params)
            return self.env.apply(proposal)

    def step(self) -> list[dict]:
        with self._write:
            records = self.env.step(self._next_cycle)
            self._next_cycle += 1
            for r in records:
                self.store.append(r)
        return [r.to_dict() for r in records]

    def fulfillment(self) -> dict:
        latest = {sid: self.store.latest(sid) for sid in self.specs}
        if any(r is None for r in latest.values()):
            return {"cycle": None, "services": {}, "global": None}
        per = {sid: float(service_fulfillment(r.metrics, self.specs[sid].slos)) for sid, r in latest.items()}
        return {"cycle": max(r.cycle for r in latest.values()), "services": per,
                "global": global_fulfillment(list(per.values()))}


class _Handler(BaseHTTPRequestHandler):
    plane: ControlPlane

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, payload) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str, violations=()) -> None:
        self._send(status, {"error": message, "violations": [v.to_dict() for v in violations]})

    def do_GET(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        if parts == ["services"]:
            return self._send(HTTPStatus.OK, self.plane.services())
        if parts == ["fulfillment"]:
            return self._send(HTTPStatus.OK, self.plane.fulfillment())
        if parts == ["metrics"]:
            q = parse_qs(url.query)
            service = q.get("service", [None])[0]
            if service is not None and service not in self.plane.specs:
                return self._error(HTTPStatus.NOT_FOUND, f"unknown service {service!r}")
            try:
                last = int(q["last"][0]) if "last" in q else None
            except ValueError:
                return self._error(HTTPStatus.BAD_REQUEST, "last must be an integer")
            return self._send(HTTPStatus.OK, self.plane.metrics(service, last))
        self._error(HTTPStatus.NOT_FOUND, f"no route for {url.path}")

    def do_POST(self):
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if parts == ["step"]:
            return self._send(HTTPStatus.OK, self.plane.step())
        if len(parts) == 3 and parts[0] == "services" and parts[2] == "parameters":
            service = parts[1]
            if service not in self.plane.specs:
                return self._error(HTTPStatus.NOT_FOUND, f"unknown service {service!r}")
            try:
                body = json.loads(raw or b"null")
            except json.JSONDecodeError as exc:
                return self._error(HTTPStatus.BAD_REQUEST, f"malformed JSON: {exc}")
            if not isinstance(body, dict) or not body:
                return self._error(HTTPStatus.BAD_REQUEST, "body must be a non-empty JSON object")
            bad = [Violation("not-a-number", service, k, None, repr(v)) for k, v in body.items()
                   if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v)]
            if bad:
                return self._error(HTTPStatus.BAD_REQUEST, "parameter values must be finite numbers", bad)
            violations = self.plane.set_parameters(service, {k: float(v) for k, v in body.items()})
            if violations:
                return self._error(HTTPStatus.BAD_REQUEST, "assignment rejected", violations)
            current = next(s for s in self.plane.services() if s["id"] == service)["current"]
            return self._send(HTTPStatus.OK, {"service": service, "parameters": current})
        self._error(HTTPStatus.NOT_FOUND, f"no route for {self.path}")


def make_server(plane: ControlPlane, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"plane": plane})
    return ThreadingHTTPServer((host, port), handler)


def serve(env: Environment, store: MetricStore | None = None, host: str = "127.0.0.1", port: int = 8080,
          tick: float | None = None) -> None:
    """Block serving requests; with ``tick`` seconds set, the environment steps on its own."""
    plane = ControlPlane(env, store)
    server = make_server(plane, host, port)
    stop = threading.Event()
    if tick:
        def ticker():
            while not stop.wait(tick):
                plane.step()
        threading.Thread(target=ticker, daemon=True).start()
    log.info("serving on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        stop.set()
        server.server_close()
