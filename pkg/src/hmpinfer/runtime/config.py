"""Cluster description shared by the coordinator and the workers."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .transport import DEFAULT_TIMEOUT, parse_address

SCHEMA_VERSION = 1
ENV_PORT_BASE = "HMPINFER_PORT_BASE"    # worker r listens on base + r
ENV_HOST = "HMPINFER_HOST"              # overrides every worker host
ENV_LISTEN = "HMPINFER_LISTEN"          # overrides one worker's own listen address


@dataclass
class WorkerSpec:
    device_id: str
    address: str
    compute_throttle: float = 1.0
    bandwidth_limit: float | None = None   # bits/s, None = unlimited
    memory_budget: int | None = None       # bytes, None = unlimited

    def __post_init__(self):
        parse_address(self.address)
        if not self.compute_throttle >= 1:
            raise ValueError(f"{self.device_id}: compute_throttle must be >= 1")
        if self.bandwidth_limit is not None and not self.bandwidth_limit > 0:
            raise ValueError(f"{self.device_id}: bandwidth_limit must be positive or null")
        if self.memory_budget is not None and not self.memory_budget > 0:
            raise ValueError(f"{self.device_id}: memory_budget must be positive or null")


@dataclass
class ClusterConfig:
    workers: list[WorkerSpec]
    coordinator: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    run: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.workers:
            raise ValueError("cluster has no workers")
        ids = [w.device_id for w in self.workers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate device ids in {ids}")

    @property
    def world(self) -> int:
        return len(self.workers)

    def addresses(self) -> list[str]:
        return [w.address for w in self.workers]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "workers": [asdict(w) for w in self.workers],
            "coordinator": self.coordinator,
            "timeout": self.timeout,
            "run": self.run,
        }

    @classmethod
    def from_dict(cls, d: dict, env: bool = True) -> "ClusterConfig":
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported cluster schema {d.get('schema_version')}")
        workers = [WorkerSpec(**w) for w in d["workers"]]
        cfg = cls(workers, d.get("coordinator"), float(d.get("timeout", DEFAULT_TIMEOUT)), d.get("run", {}))
        if env:
            cfg.apply_env()
        return cfg

    def apply_env(self, environ=os.environ) -> None:
        base = environ.get(ENV_PORT_BASE)
        host = environ.get(ENV_HOST)
        for r, w in enumerate(self.workers):
            h, p = parse_address(w.address)
            if host:
                h = host
            if base:
                p = int(base) + r
            w.address = f"{h}:{p}"

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, env: bool = True) -> "ClusterConfig":
        return cls.from_dict(json.loads(Path(path).read_text()), env=env)


def loopback_cluster(world: int, throttles=None, bandwidth_limit=None, budgets=None,
                     ports=None, timeout: float = DEFAULT_TIMEOUT) -> ClusterConfig:
    """A loopback cluster with free ports picked by the OS."""
    from .cluster import free_ports

    ports = ports or free_ports(world)
    throttles = throttles or [1.0] * world
    budgets = budgets or [None] * world
    limits = bandwidth_limit if isinstance(bandwidth_limit, (list, tuple)) else [bandwidth_limit] * world
    workers = [
        WorkerSpec(f"dev{r}", f"127.0.0.1:{ports[r]}", throttles[r], limits[r], budgets[r]) for r in range(world)
    ]
    return ClusterConfig(workers, timeout=timeout)
