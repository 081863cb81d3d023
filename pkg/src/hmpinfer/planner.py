"""Heterogeneity- and memory-aware workload planning.

Planning runs in two steps:

1. ``balanced_partition`` splits each tensor-parallel block (MHA heads, MLP
   columns) in proportion to device capacity, with largest-remainder
   rounding (ties go to the lower device index).
2. ``memory_aware_balancing`` moves the overflowing units off devices whose
   resident weights would exceed their budget onto devices with free memory,
   again in proportion to capacity. MLP is rebalanced before MHA because
   columns are a finer unit than heads.

The sequence dimension is always split evenly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .model import ModelConfig, block_weight_bytes

log = logging.getLogger(__name__)

MHA = "MHA"
MLP = "MLP"
CON = "CON"
BLOCKS = (MHA, MLP, CON)


class ProfileError(ValueError):
    pass


class PlanInfeasible(RuntimeError):
    """No allocation keeps every device under its memory budget.

    ``deficits`` maps device index to bytes over budget.
    """

    def __init__(self, deficits: dict[int, float], device_ids: Sequence[str] | None = None):
        self.deficits = deficits
        self.device_ids = list(device_ids) if device_ids else None
        parts = []
        for d, deficit in sorted(deficits.items()):
            label = self.device_ids[d] if self.device_ids else f"device {d}"
            parts.append(f"{label}: {deficit:.0f} bytes over budget")
        super().__init__("infeasible plan; " + "; ".join(parts))


@dataclass(frozen=True)
class PartitionPlan:
    A: tuple[int, ...]
    B: tuple[int, ...]
    S: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "A", tuple(int(x) for x in self.A))
        object.__setattr__(self, "B", tuple(int(x) for x in self.B))
        object.__setattr__(self, "S", tuple(int(x) for x in self.S))
        if not (len(self.A) == len(self.B) == len(self.S)) or not self.A:
            raise ValueError(f"plan lists must have equal nonzero length: {self}")
        if min(self.A + self.B + self.S) < 0:
            raise ValueError(f"negative allocation in {self}")

    @property
    def world(self) -> int:
        return len(self.A)

    @property
    def seq(self) -> int:
        return sum(self.S)

    def validate(self, config: ModelConfig, seq: int | None = None) -> None:
        if sum(self.A) != config.num_heads:
            raise ValueError(f"plan A sums to {sum(self.A)}, model has {config.num_heads} heads")
        if sum(self.B) != config.intermediate:
            raise ValueError(f"plan B sums to {sum(self.B)}, model has {config.intermediate} MLP columns")
        if seq is not None and sum(self.S) != seq:
            raise ValueError(f"plan S sums to {sum(self.S)}, input has {seq} rows")

    def with_seq(self, seq: int) -> "PartitionPlan":
        return PartitionPlan(self.A, self.B, tuple(equal_partition(seq, self.world)))

    def to_dict(self) -> dict:
        return {"A": list(self.A), "B": list(self.B), "S": list(self.S)}

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(d["A"], d["B"], d["S"])

    @classmethod
    def even(cls, config: ModelConfig, world: int, seq: int) -> "PartitionPlan":
        return cls(
            equal_partition(config.num_heads, world),
            equal_partition(config.intermediate, world),
            equal_partition(seq, world),
        )


@dataclass
class DeviceProfile:
    device_id: str
    capacity: float
    memory_budget: float
    latency: dict[str, dict[int, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.capacity > 0:
            raise ProfileError(f"{self.device_id}: capacity must be positive")
        if self.memory_budget < 0:
            raise ProfileError(f"{self.device_id}: negative memory budget")

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "capacity": self.capacity,
            "memory_budget": None if math.isinf(self.memory_budget) else self.memory_budget,
            "latency": {blk: {str(k): v for k, v in sorted(tab.items())} for blk, tab in self.latency.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        latency = {blk: {int(k): float(v) for k, v in tab.items()} for blk, tab in d.get("latency", {}).items()}
        budget = d.get("memory_budget")
        return cls(d["device_id"], float(d["capacity"]), math.inf if budget is None else float(budget), latency)


def compute_capacity(mha_latency: float, mlp_latency: float) -> float:
    """Capacity = 1 / (full MHA block latency + full MLP block latency)."""
    if not (mha_latency > 0 and mlp_latency > 0):
        raise ProfileError(f"latencies must be positive, got MHA={mha_latency} MLP={mlp_latency}")
    return 1.0 / (mha_latency + mlp_latency)


def _largest_remainder(weights: Sequence, total: int) -> list[int]:
    wsum = sum(weights)
    quotas = [Fraction(w) * total / wsum for w in weights]
    alloc = [int(q) for q in quotas]
    left = total - sum(alloc)
    # larger remainder first, lower index breaks ties
    order = sorted(range(len(weights)), key=lambda d: (-(quotas[d] - alloc[d]), d))
    for d in order[:left]:
        alloc[d] += 1
    return alloc


def equal_partition(total: int, world: int) -> list[int]:
    return _largest_remainder([1] * world, total)


def balanced_partition(capacities: Sequence[float], total: int) -> list[int]:
    """Integer allocation of ``total`` units proportional to ``capacities``."""
    if not capacities:
        raise ValueError("balanced_partition: empty device list")
    if any(not v > 0 for v in capacities):
        raise ValueError(f"balanced_partition: capacities must be positive, got {list(capacities)}")
    if total < 0:
        raise ValueError("balanced_partition: negative total")
    return _largest_remainder([Fraction(v) for v in capacities], total)


def _resident(config: ModelConfig, a: int, sum_a: int, b: int, sum_b: int) -> Fraction:
    m_att, m_mlp = block_weight_bytes(config)
    return config.num_layers * (Fraction(m_att * a, sum_a) + Fraction(m_mlp * b, sum_b))


def memory_aware_balancing(
    block: str,
    alloc: Sequence[int],
    capacities: Sequence[float],
    budgets: Sequence[float],
    config: ModelConfig,
    other: Sequence[int],
    candidates: list[int] | None = None,
) -> list[int]:
    """Shift overflowing units of ``block`` from over-budget devices to free ones.

    ``other`` is the current allocation of the other tensor-parallel block,
    needed to evaluate each device's memory use. ``candidates`` is the list
    of devices still eligible; over-budget devices are removed from it each
    round, and the caller may share the list between the MLP and MHA passes.
    """
    if block not in (MHA, MLP):
        raise ValueError(f"block must be MHA or MLP, got {block!r}")
    alloc = list(alloc)
    total = sum(alloc)
    world = len(alloc)
    if candidates is None:
        candidates = list(range(world))
    sum_other = sum(other)

    def usage(d: int, units: int) -> Fraction:
        if block == MHA:
            return _resident(config, units, total, other[d], sum_other)
        return _resident(config, other[d], sum_other, units, total)

    def over(d: int) -> bool:
        return not usage(d, alloc[d]) < budgets[d]

    rounds = 0
    while True:
        oom = [d for d in candidates if over(d)]
        if not oom:
            return alloc
        free = [d for d in candidates if d not in oom]
        rounds += 1
        for o in oom:
            # fewest units whose removal brings o under budget
            keep = alloc[o]
            while keep > 0 and not usage(o, keep) < budgets[o]:
                keep -= 1
            waiting = alloc[o] - keep
            if free and waiting:
                shares = _largest_remainder([Fraction(capacities[f]) for f in free], waiting)
                for f, s in zip(free, shares):
                    alloc[f] += s
                alloc[o] -= waiting
                log.debug("%s: shifted %d units from device %d to %s", block, waiting, o, dict(zip(free, shares)))
            candidates.remove(o)
        assert rounds <= world


def plan(profiles: Sequence[DeviceProfile], config: ModelConfig, seq: int) -> PartitionPlan:
    if not profiles:
        raise ValueError("plan: no device profiles")
    caps = [p.capacity for p in profiles]
    budgets = [p.memory_budget for p in profiles]
    a = balanced_partition(caps, config.num_heads)
    b = balanced_partition(caps, config.intermediate)
    candidates = list(range(len(profiles)))
    b = memory_aware_balancing(MLP, b, caps, budgets, config, other=a, candidates=candidates)
    a = memory_aware_balancing(MHA, a, caps, budgets, config, other=b, candidates=candidates)
    result = PartitionPlan(a, b, equal_partition(seq, len(profiles)))
    deficits = {}
    for d in range(len(profiles)):
        used = _resident(config, a[d], config.num_heads, b[d], config.intermediate)
        if not used < budgets[d]:
            deficits[d] = float(used) - budgets[d]
    if deficits:
        raise PlanInfeasible(deficits, [p.device_id for p in profiles])
    return result
