"""RunReport: what one distributed inference did, as a JSON artifact."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import LayerStepTrace, merge_traces
from .planner import PartitionPlan

SCHEMA_VERSION = 1


def checksum(arr: np.ndarray) -> str:
    """sha256 over dtype, shape and the little-endian bytes of ``arr``."""
    a = np.ascontiguousarray(arr)
    a = a.astype(a.dtype.newbyteorder("<"), copy=False)
    h = hashlib.sha256(f"{a.dtype.str}{a.shape}".encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class RunReport:
    latency: float                                  # seconds, coordinator send to last reply
    traces: list[LayerStepTrace]
    collective_bytes: dict[str, int]                # primitive -> bytes sent, summed over ranks
    plan: PartitionPlan
    env: dict                                       # throttles, limits, budgets, overlap, mode
    checksum: str
    model: dict = field(default_factory=dict)
    transport_bytes: int = 0                        # tensor payload bytes on the ring links
    peak_memory: list[int] = field(default_factory=list)
    max_rel_error: float | None = None

    def total_bytes(self) -> int:
        return sum(self.collective_bytes.values())

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "latency": self.latency,
            "plan": self.plan.to_dict(),
            "model": self.model,
            "env": self.env,
            "checksum": self.checksum,
            "collective_bytes": dict(sorted(self.collective_bytes.items())),
            "transport_bytes": self.transport_bytes,
            "peak_memory": self.peak_memory,
            "max_rel_error": self.max_rel_error,
            "traces": [t.to_dict() for t in self.traces],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported run report schema {d.get('schema_version')}")
        return cls(
            latency=float(d["latency"]),
            traces=[LayerStepTrace.from_dict(t) for t in d["traces"]],
            collective_bytes={k: int(v) for k, v in d["collective_bytes"].items()},
            plan=PartitionPlan.from_dict(d["plan"]),
            env=d["env"],
            checksum=d["checksum"],
            model=d.get("model", {}),
            transport_bytes=int(d.get("transport_bytes", 0)),
            peak_memory=list(d.get("peak_memory", [])),
            max_rel_error=d.get("max_rel_error"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def from_replies(result, plan: PartitionPlan, env: dict, model: dict | None = None) -> RunReport:
    """Assemble a report from a coordinator ``RunResult``."""
    replies = result.replies
    coll_bytes: dict[str, int] = {}
    for rep in replies:
        for prim, n in rep["counters"]["sent"].items():
            coll_bytes[prim] = coll_bytes.get(prim, 0) + int(n)
    return RunReport(
        latency=result.latency,
        traces=merge_traces([rep["records"] for rep in replies]),
        collective_bytes=coll_bytes,
        plan=plan,
        env=env,
        checksum=checksum(result.output),
        model=model or {},
        transport_bytes=sum(int(rep["transport"]["sent"]) for rep in replies),
        peak_memory=[int(rep["peak"]) for rep in replies],
    )
