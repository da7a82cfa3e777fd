"""Deterministic synthetic incidents with a known injected root cause.

A case is 600 s of baseline followed by a 300 s incident window. Every
service runs one pod reporting ``cpu`` (%), ``memory`` (MB), ``disk_io``
(MB/s) and ``network`` (errors/s) once per second as AR(1) noise around a
service-specific level. Requests enter at the topology's entry service once
per second and fan out along the call graph; each span's duration is its own
processing time plus the durations of its (sequential) child calls.

Fault signatures on the target, from onset on (``magnitude`` in brackets,
defaults in ``DEFAULT_MAGNITUDE``):

* CPU    cpu rises by [percentage points]; processing time x1.5
* MEM    memory ramps linearly by [MB per second], strictly increasing
* DISK   disk_io rises by [MB/s]; processing time x1.3
* DELAY  processing time grows by [ms] plus half-normal jitter of 10 % of it
* LOSS   each span retransmits with probability [p] (+200 ms); network errors
         rise; ERROR log bursts about timeouts
* SOCKET each span fails to connect with probability [p] (+50 ms retry);
         network errors rise; ERROR log bursts about connection failures
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import FaultType

BASE_TIME_US = 1_700_000_000_000_000
BASELINE_S = 600
INCIDENT_S = 300
SECOND = 1_000_000

DEFAULT_MAGNITUDE = {
    FaultType.CPU: 60.0,
    FaultType.MEM: 2.0,
    FaultType.DISK: 40.0,
    FaultType.DELAY: 200.0,
    FaultType.LOSS: 0.3,
    FaultType.SOCKET: 0.3,
}

DEFAULT_TOPOLOGY = {
    "entry": "frontend",
    "services": {
        "frontend": {"latency_ms": 4.0},
        "checkout": {"latency_ms": 6.0},
        "productcatalog": {"latency_ms": 3.0},
        "recommendation": {"latency_ms": 5.0},
        "currency": {"latency_ms": 2.0},
        "cart": {"latency_ms": 3.0},
        "email": {"latency_ms": 4.0},
        "payment": {"latency_ms": 5.0},
    },
    "calls": {
        "frontend": {"productcatalog": 1.0, "currency": 0.8, "recommendation": 0.5, "cart": 0.4, "checkout": 0.2},
        "checkout": {"cart": 1.0, "productcatalog": 1.0, "currency": 1.0, "payment": 1.0, "email": 1.0},
        "recommendation": {"productcatalog": 1.0},
    },
}

METRICS = ("cpu", "memory", "disk_io", "network")

_INFO_MESSAGES = (
    "request handled",
    "served request in time",
    "cache hit for key",
    "health check ok",
    "refreshing configuration",
)
_LOSS_ERRORS = (
    "rpc error: code = DeadlineExceeded desc = context deadline exceeded",
    "upstream request timeout after retransmission",
    "read tcp: i/o timeout",
)
_SOCKET_ERRORS = (
    "dial tcp: connect: connection refused",
    "socket error: connection reset by peer",
    "java.net.SocketException: Too many open files",
)


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    target: str
    fault_type: FaultType
    magnitude: float | None = None
    onset: int | None = None  # microseconds; defaults to the incident window start
    seed: int = 0
    case_id: str | None = None

    @property
    def effective_magnitude(self) -> float:
        return DEFAULT_MAGNITUDE[self.fault_type] if self.magnitude is None else float(self.magnitude)

    @classmethod
    def from_json(cls, obj: dict) -> "FaultSpec":
        return cls(
            target=str(obj["target"]),
            fault_type=FaultType.parse(obj["fault_type"]),
            magnitude=obj.get("magnitude"),
            onset=obj.get("onset_us"),
            seed=int(obj.get("seed", 0)),
            case_id=obj.get("case_id"),
        )


@dataclass
class Topology:
    entry: str
    latency_ms: dict[str, float]
    calls: dict[str, dict[str, float]] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "Topology":
        if not isinstance(obj, dict) or "services" not in obj or "entry" not in obj:
            raise TopologyError("topology needs 'entry' and 'services'")
        services = obj["services"]
        if isinstance(services, list):
            latency = {s: 3.0 for s in services}
        else:
            latency = {s: float(v.get("latency_ms", 3.0)) for s, v in services.items()}
        topo = cls(obj["entry"], latency, {k: dict(v) for k, v in obj.get("calls", {}).items()})
        topo.validate()
        return topo

    @classmethod
    def default(cls) -> "Topology":
        return cls.from_json(DEFAULT_TOPOLOGY)

    @property
    def services(self) -> list[str]:
        return list(self.latency_ms)

    def validate(self) -> None:
        if self.entry not in self.latency_ms:
            raise TopologyError(f"entry {self.entry!r} is not a service")
        for src, dsts in self.calls.items():
            for dst, rate in dsts.items():
                if src not in self.latency_ms or dst not in self.latency_ms:
                    raise TopologyError(f"call {src}->{dst} references an unknown service")
                if rate < 0:
                    raise TopologyError(f"negative call rate on {src}->{dst}")
        state: dict[str, int] = {}

        def visit(node: str) -> None:
            state[node] = 1
            for nxt in self.calls.get(node, {}):
                if state.get(nxt) == 1:
                    raise TopologyError(f"topology has a cycle through {nxt!r}")
                if nxt not in state:
                    visit(nxt)
            state[node] = 2

        for s in self.latency_ms:
            if s not in state:
                visit(s)

    def ancestors(self, service: str) -> set[str]:
        out: set[str] = set()
        frontier = [service]
        while frontier:
            node = frontier.pop()
            for src, dsts in self.calls.items():
                if node in dsts and src not in out:
                    out.add(src)
                    frontier.append(src)
        return out


def pod_name(service: str) -> str:
    digest = hashlib.sha1(service.encode()).hexdigest()
    return f"{service}-{int(digest[:8], 16) % 10}{digest[8:17]}-{int(digest[17:20], 16) % 10}{digest[20:24]}"


def _ar1(rng: np.random.Generator, n: int, level: float, sigma: float, phi: float = 0.6) -> np.ndarray:
    eps = rng.normal(0.0, sigma * math.sqrt(1 - phi * phi), n)
    out = np.empty(n)
    prev = 0.0
    for i in range(n):
        prev = phi * prev + eps[i]
        out[i] = level + prev
    return out


@dataclass
class _Generated:
    metrics: list[tuple[int, str, str, float]]
    logs: list[dict]
    spans: list[tuple]


def _generate(spec: FaultSpec, topo: Topology) -> _Generated:
    if spec.target not in topo.latency_ms:
        raise TopologyError(f"target {spec.target!r} not in topology")
    rng = np.random.default_rng(spec.seed)
    window_start = BASE_TIME_US + BASELINE_S * SECOND
    onset = window_start if spec.onset is None else int(spec.onset)
    window_end = window_start + INCIDENT_S * SECOND
    if not window_start <= onset < window_end:
        raise ValueError("fault onset must lie inside the incident window")
    mag = spec.effective_magnitude
    fault = spec.fault_type
    n = BASELINE_S + INCIDENT_S
    onset_idx = (onset - BASE_TIME_US) // SECOND

    metrics: list[tuple[int, str, str, float]] = []
    for k, svc in enumerate(topo.services):
        pod = pod_name(svc)
        levels = {
            "cpu": (20.0 + 3 * k, 2.0),
            "memory": (300.0 + 40 * k, 5.0),
            "disk_io": (5.0 + k, 0.8),
            "network": (0.5, 0.2),
        }
        for metric in METRICS:
            level, sigma = levels[metric]
            values = _ar1(rng, n, level, sigma)
            if svc == spec.target:
                post = slice(onset_idx, n)
                if fault == FaultType.CPU and metric == "cpu":
                    values[post] += mag
                elif fault == FaultType.MEM and metric == "memory":
                    start = values[onset_idx]
                    values[post] = start + mag * np.arange(n - onset_idx)
                elif fault == FaultType.DISK and metric == "disk_io":
                    values[post] += mag
                elif fault in (FaultType.LOSS, FaultType.SOCKET) and metric == "network":
                    values[post] += 20 * mag
            if metric in ("cpu", "disk_io", "network"):
                values = np.maximum(values, 0.0)
            for i in range(n):
                metrics.append((BASE_TIME_US + i * SECOND, pod, metric, round(float(values[i]), 6)))

    spans: list[tuple] = []
    bursts: list[tuple[int, str]] = []  # (time, service) of fault-induced errors

    def processing_us(svc: str, t: int) -> tuple[int, bool]:
        base = topo.latency_ms[svc] * 1000 * math.exp(rng.normal(0.0, 0.1))
        hit = False
        if svc == spec.target and t >= onset:
            if fault == FaultType.CPU:
                base *= 1.5
            elif fault == FaultType.DISK:
                base *= 1.3
            elif fault == FaultType.DELAY:
                base += mag * 1000 * (1 + abs(rng.normal(0.0, 0.1)))
            elif fault == FaultType.LOSS and rng.random() < mag:
                base += 200_000
                hit = True
            elif fault == FaultType.SOCKET and rng.random() < mag:
                base += 50_000
                hit = True
        return int(round(base)), hit

    counter = 0

    def call(trace_id: str, svc: str, parent: str | None, start: int) -> int:
        nonlocal counter
        counter += 1
        span_id = f"s{counter:05d}"
        row_index = len(spans)
        spans.append(None)
        own, hit = processing_us(svc, start)
        if hit:
            bursts.append((start, svc))
        half = own // 2
        cursor = start + half
        for child, rate in topo.calls.get(svc, {}).items():
            times = int(rate) + (1 if rng.random() < rate - int(rate) else 0)
            for _ in range(times):
                cursor += call(trace_id, child, span_id, cursor)
        duration = cursor - start + (own - half)
        spans[row_index] = (trace_id, span_id, parent or "", svc, f"{svc}/handle", start, duration)
        return duration

    for i in range(n):
        counter = 0
        start = BASE_TIME_US + i * SECOND + int(rng.integers(0, SECOND // 2))
        call(f"t{i:05d}", topo.entry, None, start)

    logs: list[dict] = []
    for svc in topo.services:
        pod = pod_name(svc)
        for i in range(0, n, 5):
            t = BASE_TIME_US + i * SECOND + int(rng.integers(0, SECOND))
            msg = _INFO_MESSAGES[int(rng.integers(0, len(_INFO_MESSAGES)))]
            logs.append({"time": t, "pod": pod, "severity": "INFO", "message": f"{msg} id={int(rng.integers(0, 50))}"})
        for i in range(0, n, 97):
            t = BASE_TIME_US + i * SECOND + int(rng.integers(0, SECOND))
            logs.append({"time": t, "pod": pod, "severity": "WARN", "message": "slow downstream response"})
    if fault in (FaultType.LOSS, FaultType.SOCKET):
        messages = _LOSS_ERRORS if fault == FaultType.LOSS else _SOCKET_ERRORS
        pod = pod_name(spec.target)
        for t, svc in bursts:
            msg = messages[int(rng.integers(0, len(messages)))]
            stamp = _iso(t)
            logs.append({"time": t, "pod": pod, "severity": "ERROR", "message": f"{stamp} {msg}"})
    logs.sort(key=lambda e: (e["time"], e["pod"], e["message"]))
    return _Generated(metrics, logs, spans)


def _iso(t_us: int) -> str:
    import datetime as dt

    return dt.datetime.fromtimestamp(t_us / 1e6, tz=dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def gen_case(spec: FaultSpec, topology: Topology | dict | None = None, out_dir: str | Path = ".") -> Path:
    """Write a complete case directory and return the manifest path."""
    topo = topology if isinstance(topology, Topology) else (
        Topology.from_json(topology) if topology is not None else Topology.default()
    )
    generated = _generate(spec, topo)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    window_start = BASE_TIME_US + BASELINE_S * SECOND
    case_id = spec.case_id or f"{spec.target}-{spec.fault_type.value.lower()}-s{spec.seed}"

    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", "pod", "metric", "value"])
        writer.writerows(generated.metrics)
    with (out / "logs.jsonl").open("w", encoding="utf-8") as fh:
        for entry in generated.logs:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    with (out / "traces.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trace_id", "span_id", "parent_span_id", "service", "operation", "start_us", "duration_us"])
        writer.writerows(generated.spans)
    manifest = {
        "case_id": case_id,
        "window_start_us": window_start,
        "window_end_us": window_start + INCIDENT_S * SECOND,
        "metrics": "metrics.csv",
        "logs": "logs.jsonl",
        "traces": "traces.csv",
        "ground_truth_service": spec.target,
        "ground_truth_fault": spec.fault_type.value,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    fault = {**asdict(spec), "fault_type": spec.fault_type.value, "magnitude": spec.effective_magnitude}
    (out / "fault.json").write_text(json.dumps(fault, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out / "manifest.json"
