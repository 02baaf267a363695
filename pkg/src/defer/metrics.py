"""Run metrics: throughput, formatting overhead, payload, modeled energy.

Energy model: compute seconds times a nominal package power (TDP),
plus a per-bit network cost (Ethernet figure, 10 pJ/bit by default).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

PAYLOAD_CLASSES = ("architecture", "weights", "data")


@dataclass(frozen=True)
class EnergyParams:
    tdp_watts: float = 15.0
    joules_per_bit: float = 1.0e-11

    def __post_init__(self):
        if not (math.isfinite(self.tdp_watts) and self.tdp_watts > 0):
            raise ValueError("tdp_watts must be finite and > 0")
        if not (math.isfinite(self.joules_per_bit) and self.joules_per_bit >= 0):
            raise ValueError("joules_per_bit must be finite and >= 0")


def energy_estimate(cpu_seconds: float, payload_bits: int,
                    params: EnergyParams = EnergyParams()) -> float:
    """cpu_seconds x TDP plus payload_bits x joules-per-bit, exactly."""
    if cpu_seconds < 0 or payload_bits < 0:
        raise ValueError("energy inputs must be >= 0")
    return cpu_seconds * params.tdp_watts + payload_bits * params.joules_per_bit


def measure_throughput(cycles_completed: int, window_seconds: float) -> float:
    """Inference cycles fully received per second of window."""
    if window_seconds <= 0:
        raise ValueError("window must be positive")
    return cycles_completed / window_seconds


@dataclass
class NodeMetrics:
    """One compute node's own counters, reported at shutdown."""

    index: int
    cycles: int = 0
    compute_seconds: float = 0.0
    overhead_seconds: float = 0.0
    payload_bytes: dict[str, int] = field(default_factory=dict)

    def sent_bits(self) -> int:
        return 8 * sum(self.payload_bytes.values())

    def to_json(self) -> str:
        # fixed-width seconds keep the teardown frame size independent of
        # the measured values, so payload accounting stays reproducible
        return json.dumps(
            {
                "cycles": self.cycles,
                "compute_seconds": f"{self.compute_seconds:.12e}",
                "overhead_seconds": f"{self.overhead_seconds:.12e}",
                "payload_bytes": self.payload_bytes,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str, index: int) -> "NodeMetrics":
        doc = json.loads(text)
        return cls(
            index=index,
            cycles=int(doc["cycles"]),
            compute_seconds=float(doc["compute_seconds"]),
            overhead_seconds=float(doc["overhead_seconds"]),
            payload_bytes={str(k): int(v) for k, v in doc["payload_bytes"].items()},
        )


@dataclass
class MetricsReport:
    """Whole-run record; throughput is cycles over the window by definition."""

    cycles_completed: int
    window_seconds: float
    overhead_by_class: dict[str, float]
    payload_bytes: dict[str, int]
    nodes: list[NodeMetrics]
    dispatcher_compute_seconds: float = 0.0

    @property
    def throughput(self) -> float:
        if self.window_seconds <= 0:
            return 0.0
        return self.cycles_completed / self.window_seconds

    @property
    def overhead_seconds(self) -> float:
        return sum(self.overhead_by_class.values())

    def total_payload(self) -> int:
        return sum(self.payload_bytes.values())

    def class_energy(self, msg_class: str,
                     params: EnergyParams = EnergyParams()) -> float:
        return energy_estimate(
            self.overhead_by_class.get(msg_class, 0.0),
            8 * self.payload_bytes.get(msg_class, 0),
            params,
        )


def per_node_energy(report: MetricsReport,
                    params: EnergyParams = EnergyParams()) -> list[float]:
    """Joules attributed to each compute node from its own counters."""
    return [
        energy_estimate(n.compute_seconds, n.sent_bits(), params)
        for n in sorted(report.nodes, key=lambda n: n.index)
    ]


def per_node_compute_energy(report: MetricsReport,
                            params: EnergyParams = EnergyParams()) -> list[float]:
    return [
        n.compute_seconds * params.tdp_watts
        for n in sorted(report.nodes, key=lambda n: n.index)
    ]


CSV_HEADER = ("model,nodes,serialization,compression,msg_class,"
              "energy_j,overhead_s,payload_mb,throughput_cps")


def csv_rows(model: str, nodes: int, serialization: str, compression: str,
             report: MetricsReport,
             params: EnergyParams = EnergyParams()) -> list[str]:
    """One CSV row per message class for a finished run."""
    rows = []
    for msg_class in PAYLOAD_CLASSES:
        payload = report.payload_bytes.get(msg_class, 0)
        rows.append(
            f"{model},{nodes},{serialization},{compression},{msg_class},"
            f"{report.class_energy(msg_class, params):.9g},"
            f"{report.overhead_by_class.get(msg_class, 0.0):.9g},"
            f"{payload / 1e6:.9g},"
            f"{report.throughput:.9g}"
        )
    return rows
