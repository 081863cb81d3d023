"""Calibration runs that measure per-device block latencies and model memory constants."""
from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import isotonic_regression

from . import engine
from . import tensor_core as tc
from .model import ModelConfig, block_weight_bytes
from .planner import BLOCKS, CON, MHA, MLP, DeviceProfile, compute_capacity

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_SEQ = 284
DEFAULT_REPS = 5
DEFAULT_WARMUP = 2
GRID_FRACTIONS = (1 / 8, 1 / 4, 3 / 8, 1 / 2, 5 / 8, 3 / 4, 7 / 8, 1)


def block_total(config: ModelConfig, block: str, seq: int) -> int:
    return {MHA: config.num_heads, MLP: config.intermediate, CON: seq}[block]


def size_grid(total: int, fractions=GRID_FRACTIONS) -> list[int]:
    return sorted({max(1, round(total * f)) for f in fractions})


def default_sizes(config: ModelConfig, seq: int, fractions=GRID_FRACTIONS) -> dict[str, list[int]]:
    return {blk: size_grid(block_total(config, blk, seq), fractions) for blk in BLOCKS}


def profile_model(config: ModelConfig) -> tuple[int, int]:
    """Bytes of one MHA block and one MLP block (weights and biases)."""
    return block_weight_bytes(config)


def _samples(fn, reps: int, warmup: int) -> list[float]:
    # device clock, not wall time: other processes sharing the host must not leak in
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = tc.device_clock()
        fn()
        times.append(tc.device_clock() - t0)
    return times


def _shard(config: ModelConfig, rng, heads: int, cols: int) -> engine.LayerShard:
    h, dt = config.hidden, config.dtype
    w = heads * config.head_dim

    def mat(*shape):
        return (rng.standard_normal(shape, dtype=np.float32) * np.float32(0.02)).astype(dt)

    return engine.LayerShard(
        heads=(0, heads), cols=(0, cols),
        wqkv=mat(h, 3 * w), wb=mat(w, h), wd=mat(h, cols), we=mat(cols, h),
        ln1_gamma=np.ones(h, dt), ln1_beta=np.zeros(h, dt),
        ln2_gamma=np.ones(h, dt), ln2_beta=np.zeros(h, dt),
        bqkv=mat(3 * w), bd=mat(cols), bb=mat(h), be=mat(h),
    )


def monotone(table: dict[int, float], label: str = "") -> dict[int, float]:
    """Isotonic (nondecreasing) fit of a size -> latency table."""
    sizes = sorted(table)
    raw = np.array([table[s] for s in sizes])
    violations = int(np.sum(np.diff(raw) < 0))
    if violations:
        log.info("%s: %d monotonicity violation(s) smoothed", label, violations)
    fitted = isotonic_regression(raw, increasing=True).x
    return {s: float(v) for s, v in zip(sizes, fitted)}


def sample_blocks(config: ModelConfig, sizes: dict[str, list[int]] | None = None, seq: int = DEFAULT_SEQ,
                  reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP,
                  seed: int = 0) -> dict[str, dict[int, list[float]]]:
    """Raw latencies of each block shard, in isolation, for every requested partition size.

    Runs in the calling process, so the caller's compute throttle applies.
    """
    if reps < 1:
        raise ValueError("need at least one repetition")
    sizes = sizes or default_sizes(config, seq)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((seq, config.hidden), dtype=np.float32).astype(config.dtype)
    samples: dict[str, dict[int, list[float]]] = {}
    for blk in BLOCKS:
        table = {}
        for size in sizes.get(blk, []):
            if not 0 < size <= block_total(config, blk, seq):
                raise ValueError(f"{blk} partition size {size} out of range")
            if blk == MHA:
                shard = _shard(config, rng, size, 1)
                fn = lambda: engine.run_mha_tp(shard, x, config.head_dim)  # noqa: E731
            elif blk == MLP:
                shard = _shard(config, rng, 1, size)
                fn = lambda: engine.run_mlp_tp(shard, x)  # noqa: E731
            else:
                shard = _shard(config, rng, 1, 1)
                g, res = x[:size].copy(), x[:size][::-1].copy()
                fn = lambda: engine.run_connective_sp(g, res, shard.bb, shard.ln1_gamma, shard.ln1_beta)  # noqa: E731
            table[size] = _samples(fn, reps, warmup)
        samples[blk] = table
    return samples


def summarize(samples: dict[str, dict[int, list[float]]]) -> dict[str, dict[int, float]]:
    """Median per entry, then a monotone fit per block."""
    tables = {}
    for blk, table in samples.items():
        if any(len(v) < 3 for v in table.values()):
            raise ValueError("profiling needs at least 3 repetitions per entry")
        med = {size: statistics.median(v) for size, v in table.items()}
        tables[blk] = monotone(med, blk) if med else med
    return tables


def profile_blocks(config: ModelConfig, sizes: dict[str, list[int]] | None = None, seq: int = DEFAULT_SEQ,
                   reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP, seed: int = 0) -> dict[str, dict[int, float]]:
    """Median latency of each block shard for every requested partition size."""
    if reps < 3:
        raise ValueError("profiling needs at least 3 repetitions per entry")
    return summarize(sample_blocks(config, sizes, seq, reps, warmup, seed))


def interpolate(table: dict[int, float], size: float) -> float:
    """Piecewise-linear latency estimate; (0, 0) anchors the low end, the top segment extrapolates."""
    xs = np.array([0] + sorted(table), dtype=float)
    ys = np.array([0.0] + [table[s] for s in sorted(table)])
    if size <= xs[-1]:
        return float(np.interp(size, xs, ys))
    slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
    return float(ys[-1] + slope * (size - xs[-1]))


def capacity_from_tables(tables: dict[str, dict[int, float]], config: ModelConfig) -> float:
    return compute_capacity(interpolate(tables[MHA], config.num_heads), interpolate(tables[MLP], config.intermediate))


@dataclass
class ProfileReport:
    model: ModelConfig
    devices: list[DeviceProfile]
    m_att: int
    m_mlp: int
    calibration: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "M_att": self.m_att,
            "M_mlp": self.m_mlp,
            "calibration": self.calibration,
            "devices": [d.to_dict() for d in self.devices],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported profile schema {d.get('schema_version')}")
        return cls(ModelConfig.from_dict(d["model"]), [DeviceProfile.from_dict(x) for x in d["devices"]],
                   int(d["M_att"]), int(d["M_mlp"]), d.get("calibration", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ProfileReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_report(config: ModelConfig, device_ids, budgets, tables_per_device, seq, reps, warmup) -> ProfileReport:
    m_att, m_mlp = profile_model(config)
    devices = [
        DeviceProfile(dev, capacity_from_tables(tables, config), budget, tables)
        for dev, budget, tables in zip(device_ids, budgets, tables_per_device)
    ]
    calib = {"seq": seq, "reps": reps, "warmup": warmup, "dtype": config.dtype}
    return ProfileReport(config, devices, m_att, m_mlp, calib)
