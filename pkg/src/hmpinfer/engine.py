"""Per-layer hybrid tensor/sequence parallel dataflow.

One transformer layer on rank ``i`` (``S`` is the sequence split)::

    ag2   A   = AllGather(H_i)                      # layer input, S-partitioned
    mha   C_i = attention over this rank's heads    # additive partial
    rs1   G_i = ReduceScatter(C)                    # lands on the segment owner
    con1  H_i = LayerNorm(H_i + G_i + b_out)
    ag1   D   = AllGather(H_i)
    mlp   F_i = GELU(D @ Wd_i) @ We_i               # additive partial
    rs2   G_i = ReduceScatter(F)
    con2  H_i = LayerNorm(H_i + G_i + b_down)

With ``overlap=True`` each AllGather is fused with the GEMM that consumes it
and each ReduceScatter with the GEMM that produces it; the fused time is
recorded under the collective's phase name.

Two baselines share the same shards and tracing: ``tp-allreduce`` (full
activations on every rank, an AllReduce after each TP block) and
``sp-only`` (full weights on every rank, sequence split throughout, K and V
gathered inside attention).
"""
from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import collectives as coll
from . import tensor_core as tc
from .errors import CollectiveError
from .model import LayerWeights, Model, ModelConfig, connective_block
from .planner import PartitionPlan

MODES = ("hmp", "tp-allreduce", "sp-only")
HMP_PHASES = ("ag2", "mha", "rs1", "con1", "ag1", "mlp", "rs2", "con2")


@dataclass
class LayerShard:
    heads: tuple[int, int]            # [start, stop) head indices
    cols: tuple[int, int]             # [start, stop) MLP columns
    wqkv: np.ndarray                  # h x 3*a_d*head_dim, [Wq_i | Wk_i | Wv_i]
    wb: np.ndarray                    # a_d*head_dim x h
    wd: np.ndarray                    # h x b_d
    we: np.ndarray                    # b_d x h
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    bqkv: np.ndarray | None = None
    bd: np.ndarray | None = None
    # row-sharded projections: bias added once, after the reduction
    bb: np.ndarray | None = None
    be: np.ndarray | None = None

    @property
    def qkv_width(self) -> int:
        return self.wqkv.shape[1] // 3

    @property
    def wq(self) -> np.ndarray:
        return self.wqkv[:, : self.qkv_width]

    @property
    def wk(self) -> np.ndarray:
        w = self.qkv_width
        return self.wqkv[:, w : 2 * w]

    @property
    def wv(self) -> np.ndarray:
        return self.wqkv[:, 2 * self.qkv_width :]

    def named_tensors(self):
        for name in ("wqkv", "wb", "wd", "we", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
                     "bqkv", "bd", "bb", "be"):
            value = getattr(self, name)
            if value is not None:
                yield name, value

    @property
    def nbytes(self) -> int:
        return sum(v.nbytes for _, v in self.named_tensors())


@dataclass
class DeviceShards:
    rank: int
    config: ModelConfig
    layers: list[LayerShard]

    @property
    def nbytes(self) -> int:
        return sum(s.nbytes for s in self.layers)


def _shard_layer(lw: LayerWeights, hd: int, heads: tuple[int, int], cols: tuple[int, int]) -> LayerShard:
    c0, c1 = heads[0] * hd, heads[1] * hd
    b0, b1 = cols

    def cut(v, lo, hi):
        return None if v is None else np.ascontiguousarray(v[lo:hi])

    bqkv = None
    if lw.bq is not None:
        bqkv = np.concatenate([lw.bq[c0:c1], lw.bk[c0:c1], lw.bv[c0:c1]])
    return LayerShard(
        heads=heads,
        cols=cols,
        wqkv=tc.concat_cols([lw.wq[:, c0:c1], lw.wk[:, c0:c1], lw.wv[:, c0:c1]]),
        wb=np.ascontiguousarray(lw.wb[c0:c1, :]),
        wd=np.ascontiguousarray(lw.wd[:, b0:b1]),
        we=np.ascontiguousarray(lw.we[b0:b1, :]),
        ln1_gamma=lw.ln1_gamma, ln1_beta=lw.ln1_beta,
        ln2_gamma=lw.ln2_gamma, ln2_beta=lw.ln2_beta,
        bqkv=bqkv, bd=cut(lw.bd, b0, b1), bb=lw.bb, be=lw.be,
    )


def shard_weights(model: Model, plan: PartitionPlan, rank: int) -> DeviceShards:
    """This rank's weights: a contiguous run of heads and of MLP columns."""
    cfg = model.config
    plan.validate(cfg)
    if not 0 <= rank < plan.world:
        raise ValueError(f"rank {rank} outside plan of {plan.world} devices")
    h0 = sum(plan.A[:rank])
    b0 = sum(plan.B[:rank])
    heads = (h0, h0 + plan.A[rank])
    cols = (b0, b0 + plan.B[rank])
    return DeviceShards(rank, cfg, [_shard_layer(lw, cfg.head_dim, heads, cols) for lw in model.layers])


def replicate_weights(model: Model, rank: int = 0) -> DeviceShards:
    """Full weights on one rank (the sp-only baseline)."""
    cfg = model.config
    full = (0, cfg.num_heads), (0, cfg.intermediate)
    return DeviceShards(rank, cfg, [_shard_layer(lw, cfg.head_dim, *full) for lw in model.layers])


# --------------------------------------------------------------------------
# block kernels


def _attend(qkv: np.ndarray, head_dim: int) -> np.ndarray:
    w = qkv.shape[1] // 3
    q, k, v = tc.split_cols(qkv, [w, w, w])
    return tc.self_attention(q, k, v, head_dim)


def run_mha_tp(shard: LayerShard, a_full: np.ndarray, head_dim: int) -> np.ndarray:
    """Additive partial of the MHA output from this rank's heads (output bias excluded)."""
    if a_full.shape[1] != shard.wqkv.shape[0]:
        raise tc.ShapeError(f"run_mha_tp: input {a_full.shape} vs wqkv {shard.wqkv.shape}")
    qkv = tc.add_bias(tc.gemm(a_full, shard.wqkv), shard.bqkv)
    return tc.gemm(_attend(qkv, head_dim), shard.wb)


def run_mlp_tp(shard: LayerShard, d_full: np.ndarray) -> np.ndarray:
    """Additive partial of the MLP output from this rank's columns (down bias excluded)."""
    if d_full.shape[1] != shard.wd.shape[0]:
        raise tc.ShapeError(f"run_mlp_tp: input {d_full.shape} vs wd {shard.wd.shape}")
    e = tc.gelu(tc.add_bias(tc.gemm(d_full, shard.wd), shard.bd))
    return tc.gemm(e, shard.we)


def run_connective_sp(g: np.ndarray, residual: np.ndarray, bias, gamma, beta) -> np.ndarray:
    """Dropout -> residual add -> layer norm on this rank's rows."""
    if g.shape != residual.shape:
        raise tc.ShapeError(f"run_connective_sp: {g.shape} vs residual {residual.shape}")
    if g.shape[0] == 0:
        return g.copy()
    return connective_block(tc.add_bias(g, bias), residual, gamma, beta)


# --------------------------------------------------------------------------
# tracing


class PhaseTimer:
    """Per-rank wall and device-clock time per phase, plus collective byte deltas."""

    def __init__(self, group: coll.RingGroup):
        self.group = group
        self.wall: dict[str, float] = defaultdict(float)
        self.device: dict[str, float] = defaultdict(float)
        self._t0 = time.perf_counter()
        self._sent0 = dict(group.bytes_sent)
        self._recv0 = dict(group.bytes_recv)

    def phase(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.w = time.perf_counter()
                self.d = tc.device_clock()

            def __exit__(self, et, ev, tb):
                timer.wall[name] += time.perf_counter() - self.w
                timer.device[name] += tc.device_clock() - self.d
                if isinstance(ev, CollectiveError) and ev.phase is None:
                    raise ev.with_phase(name) from ev.__cause__
                return False

        return _Ctx()

    def record(self, layer: int) -> dict:
        g = self.group
        return {
            "layer": layer,
            "rank": g.rank,
            "wall": time.perf_counter() - self._t0,
            "phases": {k: {"wall": self.wall[k], "device": self.device[k]} for k in self.wall},
            "bytes_sent": {k: v - self._sent0.get(k, 0) for k, v in g.bytes_sent.items() if v - self._sent0.get(k, 0)},
            "bytes_recv": {k: v - self._recv0.get(k, 0) for k, v in g.bytes_recv.items() if v - self._recv0.get(k, 0)},
        }


@dataclass
class LayerStepTrace:
    """Merged per-layer record across ranks.

    ``phases[name]["wall"|"device"]`` are per-rank lists of seconds.
    ``device`` is emulated compute time (see ``tensor_core`` throttling) and is
    the clock to use for straggler analysis when devices share a core.
    """

    layer: int
    phases: dict[str, dict[str, list[float]]]
    bytes_sent: dict[str, list[int]]
    bytes_recv: dict[str, list[int]]
    layer_wall: list[float]

    def phase_time(self, phase: str, clock: str = "wall") -> float:
        return max(self.phases[phase][clock])

    def straggler(self, phase: str, clock: str = "device") -> int:
        times = self.phases[phase][clock]
        return int(np.argmax(times))

    def straggler_gap(self, phase: str, clock: str = "device") -> float:
        """Idle share of the fastest rank: (slowest - fastest) / fastest."""
        times = self.phases[phase][clock]
        fastest = min(times)
        return (max(times) - fastest) / fastest if fastest > 0 else math.inf

    def total_bytes(self, primitive: str) -> int:
        return sum(self.bytes_sent.get(primitive, []))

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "phases": self.phases,
            "bytes_sent": self.bytes_sent,
            "bytes_recv": self.bytes_recv,
            "layer_wall": self.layer_wall,
            "straggler": {p: self.straggler(p) for p in self.phases},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerStepTrace":
        return cls(d["layer"], d["phases"], d["bytes_sent"], d["bytes_recv"], d["layer_wall"])


def merge_traces(per_rank: list[list[dict]]) -> list[LayerStepTrace]:
    """Combine each rank's per-layer records into one trace per layer."""
    world = len(per_rank)
    out = []
    for layer_recs in zip(*per_rank):
        phases: dict = {}
        sent: dict = {}
        recv: dict = {}
        for rec in layer_recs:
            r = rec["rank"]
            for name, t in rec["phases"].items():
                slot = phases.setdefault(name, {"wall": [0.0] * world, "device": [0.0] * world})
                slot["wall"][r] = t["wall"]
                slot["device"][r] = t["device"]
            for name, n in rec["bytes_sent"].items():
                sent.setdefault(name, [0] * world)[r] = n
            for name, n in rec["bytes_recv"].items():
                recv.setdefault(name, [0] * world)[r] = n
        walls = [0.0] * world
        for rec in layer_recs:
            walls[rec["rank"]] = rec["wall"]
        out.append(LayerStepTrace(layer_recs[0]["layer"], phases, sent, recv, walls))
    return out


# --------------------------------------------------------------------------
# layers


def _activation_bytes(rows: int, cols: int, dtype) -> int:
    return rows * cols * np.dtype(dtype).itemsize


def run_layer(group: coll.RingGroup, shard: LayerShard, plan: PartitionPlan, h_part: np.ndarray,
              config: ModelConfig, overlap: bool = True, timer: PhaseTimer | None = None,
              memory=None, layer: int = 0) -> np.ndarray:
    """One hybrid-parallel layer; ``h_part`` is this rank's row segment of the layer input."""
    timer = timer or PhaseTimer(group)
    S = list(plan.S)
    seq = sum(S)
    hd = config.head_dim
    dt = h_part.dtype
    if h_part.shape != (S[group.rank], config.hidden):
        raise tc.ShapeError(f"rank {group.rank}: layer input {h_part.shape}, expected {(S[group.rank], config.hidden)}")
    transient = memory.transient if memory is not None else _no_accounting

    with transient(f"layer{layer}.mha", _activation_bytes(seq, shard.wqkv.shape[1] + config.hidden + seq, dt)):
        if overlap:
            with timer.phase("ag2"):
                qkv = coll.overlapped_all_gather_gemm(group, h_part, shard.wqkv, S)
            with timer.phase("mha"):
                b = _attend(tc.add_bias(qkv, shard.bqkv), hd)
            with timer.phase("rs1"):
                g = coll.overlapped_gemm_reduce_scatter(group, b, shard.wb, S)
        else:
            with timer.phase("ag2"):
                a_full = coll.all_gather(group, h_part, S)
            with timer.phase("mha"):
                c = run_mha_tp(shard, a_full, hd)
            with timer.phase("rs1"):
                g = coll.reduce_scatter(group, c, S)
    with timer.phase("con1"):
        h1 = run_connective_sp(g, h_part, shard.bb, shard.ln1_gamma, shard.ln1_beta)

    with transient(f"layer{layer}.mlp", _activation_bytes(seq, shard.wd.shape[1] + 2 * config.hidden, dt)):
        if overlap:
            with timer.phase("ag1"):
                e = coll.overlapped_all_gather_gemm(group, h1, shard.wd, S)
            with timer.phase("mlp"):
                e = tc.gelu(tc.add_bias(e, shard.bd))
            with timer.phase("rs2"):
                g2 = coll.overlapped_gemm_reduce_scatter(group, e, shard.we, S)
        else:
            with timer.phase("ag1"):
                d_full = coll.all_gather(group, h1, S)
            with timer.phase("mlp"):
                f = run_mlp_tp(shard, d_full)
            with timer.phase("rs2"):
                g2 = coll.reduce_scatter(group, f, S)
    with timer.phase("con2"):
        return run_connective_sp(g2, h1, shard.be, shard.ln2_gamma, shard.ln2_beta)


def run_layer_tp_allreduce(group: coll.RingGroup, shard: LayerShard, x: np.ndarray, config: ModelConfig,
                           timer: PhaseTimer, memory=None, layer: int = 0) -> np.ndarray:
    """Megatron-style layer: replicated activations, AllReduce after each TP block."""
    seq = x.shape[0]
    transient = memory.transient if memory is not None else _no_accounting
    with transient(f"layer{layer}.mha", _activation_bytes(seq, shard.wqkv.shape[1] + config.hidden + seq, x.dtype)):
        with timer.phase("mha"):
            c = run_mha_tp(shard, x, config.head_dim)
        with timer.phase("ar1"):
            g = coll.all_reduce(group, c)
    with timer.phase("con1"):
        x1 = run_connective_sp(g, x, shard.bb, shard.ln1_gamma, shard.ln1_beta)
    with transient(f"layer{layer}.mlp", _activation_bytes(seq, shard.wd.shape[1] + 2 * config.hidden, x.dtype)):
        with timer.phase("mlp"):
            f = run_mlp_tp(shard, x1)
        with timer.phase("ar2"):
            g2 = coll.all_reduce(group, f)
    with timer.phase("con2"):
        return run_connective_sp(g2, x1, shard.be, shard.ln2_gamma, shard.ln2_beta)


def _attend_gathered(group, q, k_part, v_part, S, hd, timer):
    """Attention for local query rows; K is gathered before the scores, V before the weighting."""
    with timer.phase("ag_k"):
        k = coll.all_gather(group, k_part, S)
    with timer.phase("mha"):
        probs = []
        for c in range(0, q.shape[1], hd):
            qh = np.ascontiguousarray(q[:, c : c + hd])
            kt = np.ascontiguousarray(k[:, c : c + hd].T)
            scores = tc.gemm(qh, kt) * q.dtype.type(1.0 / math.sqrt(hd))
            probs.append(tc.softmax_rows(scores))
    with timer.phase("ag_v"):
        v = coll.all_gather(group, v_part, S)
    with timer.phase("mha"):
        out = np.empty_like(q)
        for i, c in enumerate(range(0, q.shape[1], hd)):
            out[:, c : c + hd] = tc.gemm(probs[i], np.ascontiguousarray(v[:, c : c + hd]))
    return out


def run_layer_sp_only(group: coll.RingGroup, shard: LayerShard, plan: PartitionPlan, x_part: np.ndarray,
                      config: ModelConfig, timer: PhaseTimer, memory=None, layer: int = 0) -> np.ndarray:
    S = list(plan.S)
    seq = sum(S)
    h = config.hidden
    transient = memory.transient if memory is not None else _no_accounting
    with transient(f"layer{layer}.mha", _activation_bytes(seq, 2 * h + seq, x_part.dtype)):
        with timer.phase("mha"):
            qkv = tc.add_bias(tc.gemm(x_part, shard.wqkv), shard.bqkv)
            q, k, v = tc.split_cols(qkv, [h, h, h])
        b = _attend_gathered(group, q, k, v, S, config.head_dim, timer)
        with timer.phase("mha"):
            c = tc.gemm(b, shard.wb)
    with timer.phase("con1"):
        x1 = run_connective_sp(c, x_part, shard.bb, shard.ln1_gamma, shard.ln1_beta)
    with transient(f"layer{layer}.mlp", _activation_bytes(x_part.shape[0], 4 * h, x_part.dtype)):
        with timer.phase("mlp"):
            f = run_mlp_tp(shard, x1)
    with timer.phase("con2"):
        return run_connective_sp(f, x1, shard.be, shard.ln2_gamma, shard.ln2_beta)


class _no_accounting:
    def __init__(self, *a):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


@dataclass
class ModelRun:
    output: np.ndarray                # full output (rank 0 always; every rank after the final gather)
    part: np.ndarray                  # this rank's final segment
    records: list[dict] = field(default_factory=list)


def input_part(x: np.ndarray, plan: PartitionPlan, rank: int, mode: str) -> np.ndarray:
    """What rank ``rank`` is handed at the start of a run in ``mode``."""
    if mode == "tp-allreduce":
        return x
    return tc.split_rows(x, plan.S)[rank]


def run_model(group: coll.RingGroup, shards: DeviceShards, plan: PartitionPlan, x_in: np.ndarray,
              mode: str = "hmp", overlap: bool = True, memory=None, gather: bool = True) -> ModelRun:
    """Fold the layers of ``mode`` over this rank's input (see :func:`input_part`)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = shards.config
    records = []
    x = x_in
    for i, shard in enumerate(shards.layers):
        timer = PhaseTimer(group)
        if mode == "hmp":
            x = run_layer(group, shard, plan, x, cfg, overlap, timer, memory, i)
        elif mode == "tp-allreduce":
            x = run_layer_tp_allreduce(group, shard, x, cfg, timer, memory, i)
        else:
            x = run_layer_sp_only(group, shard, plan, x, cfg, timer, memory, i)
        records.append(timer.record(i))
    if mode == "tp-allreduce":
        return ModelRun(x, tc.split_rows(x, plan.S)[group.rank], records)
    part = x
    full = coll.all_gather(group, part, plan.S) if gather else part
    return ModelRun(full, part, records)


def run_local(model: Model, plan: PartitionPlan, x: np.ndarray, mode: str = "hmp", overlap: bool = True,
              throttles=None, bandwidth_limit=None, step_hook=None, timeout: float = 30.0):
    """Run all ranks as threads of this process over socketpair rings.

    Returns ``(output, traces)``. Handy for tests and notebooks; the worker
    processes in :mod:`hmpinfer.runtime` run the same code over TCP.
    """
    world = plan.world
    groups = coll.local_ring(world, bandwidth_limit, timeout, step_hook)
    plan.validate(model.config, x.shape[0])

    def one(group, throttle):
        tc.set_compute_throttle(throttle, thread_only=True)
        shards = replicate_weights(model, group.rank) if mode == "sp-only" else shard_weights(model, plan, group.rank)
        return run_model(group, shards, plan, input_part(x, plan, group.rank, mode), mode, overlap)

    try:
        runs = coll.run_ranks(groups, one, throttles or [1.0] * world)
    finally:
        for g in groups:
            g.close()
    return runs[0].output, merge_traces([r.records for r in runs])
