"""Ring collectives and their GEMM-overlapped tile variants.

Every rank sends to its successor ``(rank + 1) % D`` and receives from its
predecessor ``(rank - 1) % D``. A collective takes ``D - 1`` ring steps.

The overlapped variants fuse a collective with the GEMM next to it:

* ``overlapped_all_gather_gemm`` computes ``gemm(all_gather(x), W)`` one row
  tile at a time; while tile ``k`` is multiplied, the same tile is already on
  its way to the successor.
* ``overlapped_gemm_reduce_scatter`` computes
  ``reduce_scatter(gemm(x, W))`` one row tile at a time; the partial sum
  from the previous step travels while the next tile is multiplied.

Both give the same result as the unfused composition (bitwise, in fact,
because ``gemm`` row tiling is exact and the reduction order is the same).
"""
from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc
from .errors import CollectiveError, ConnectivityError, HMPError, ProtocolError
from .planner import equal_partition
from .runtime.transport import DEFAULT_TIMEOUT, Frame, FrameKind, Link, link_pair

log = logging.getLogger(__name__)

PRIMITIVES = ("all_gather", "reduce_scatter", "all_reduce")


class RingGroup:
    """Ring membership and transport for one rank.

    ``step_hook(primitive, step)``, when set, runs at the start of every ring
    step; tests use it to inject random delays.
    """

    def __init__(self, rank: int, world: int, succ: Link | None = None, pred: Link | None = None,
                 timeout: float = DEFAULT_TIMEOUT, step_hook: Callable[[str, int], None] | None = None):
        if not 0 <= rank < world:
            raise ValueError(f"rank {rank} outside world of {world}")
        if world > 1 and (succ is None or pred is None):
            raise ValueError("a ring of more than one rank needs successor and predecessor links")
        self.rank = rank
        self.world = world
        self.succ = succ
        self.pred = pred
        self.timeout = timeout
        self.step_hook = step_hook
        self.bytes_sent: dict[str, int] = defaultdict(int)
        self.bytes_recv: dict[str, int] = defaultdict(int)
        self._next_id = 0
        self.aborted = False

    @property
    def succ_rank(self) -> int:
        return (self.rank + 1) % self.world

    @property
    def pred_rank(self) -> int:
        return (self.rank - 1) % self.world

    def reset_counters(self) -> None:
        self.bytes_sent.clear()
        self.bytes_recv.clear()

    def counters(self) -> dict[str, dict[str, int]]:
        return {"sent": dict(self.bytes_sent), "recv": dict(self.bytes_recv)}

    def abort(self) -> None:
        """Close both links so neighbours fail fast instead of waiting for a timeout."""
        self.aborted = True
        for link in (self.succ, self.pred):
            if link is not None:
                link.close()

    close = abort

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def _exchange(self, primitive: str, cid: int, step: int, arr: np.ndarray, origin: int,
                  compute: Callable[[], None] | None = None) -> Frame:
        """Post ``arr`` to the successor, run ``compute`` meanwhile, and return the predecessor's frame."""
        if self.aborted:
            raise CollectiveError(f"rank {self.rank}: ring already aborted", self.rank)
        if self.step_hook is not None:
            self.step_hook(primitive, step)
        out = Frame.tensor(arr, cid, origin, step)
        sent = self.succ.post_send(out)
        got = self.pred.post_recv()
        if compute is not None:
            compute()
        try:
            sent.result(timeout=self.timeout * 2)
            frame = got.result(timeout=self.timeout * 2)
        except FutureTimeout:
            raise CollectiveError(f"rank {self.rank}: {primitive} step {step} stalled", self.rank) from None
        if frame.kind != FrameKind.TENSOR or frame.collective_id != cid or frame.step != step:
            raise ProtocolError(
                f"rank {self.rank}: expected {primitive} #{cid} step {step}, got "
                f"{frame.kind.name} #{frame.collective_id} step {frame.step}"
            )
        self.bytes_sent[primitive] += len(out.payload)
        self.bytes_recv[primitive] += len(frame.payload)
        return frame

    def _guard(self, primitive: str, fn, *args):
        try:
            return fn(*args)
        except CollectiveError:
            self.abort()
            raise
        except ConnectivityError as e:
            self.abort()
            raise CollectiveError(f"rank {self.rank}: {primitive} failed: {e}", self.rank, e.rank) from e
        except HMPError as e:
            self.abort()
            raise CollectiveError(f"rank {self.rank}: {primitive} failed: {e}", self.rank) from e


def _check_sizes(group: RingGroup, sizes: Sequence[int]) -> list[int]:
    sizes = [int(s) for s in sizes]
    if len(sizes) != group.world:
        raise ValueError(f"sizes {sizes} do not match world {group.world}")
    if min(sizes) < 0:
        raise ValueError(f"negative segment size in {sizes}")
    return sizes


def all_gather(group: RingGroup, local: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    sizes = _check_sizes(group, sizes)
    if local.shape[0] != sizes[group.rank]:
        raise tc.ShapeError(f"rank {group.rank}: local has {local.shape[0]} rows, sizes say {sizes[group.rank]}")
    if group.world == 1:
        return local.copy()
    return group._guard("all_gather", _all_gather, group, local, sizes, "all_gather")


def _all_gather(group: RingGroup, local, sizes, primitive):
    d, rank = group.world, group.rank
    cid = group._new_id()
    parts: list = [None] * d
    parts[rank] = local
    origin = rank
    for step in range(d - 1):
        frame = group._exchange(primitive, cid, step, parts[origin], origin)
        origin = (rank - step - 1) % d
        if frame.origin != origin:
            raise ProtocolError(f"rank {rank}: fragment from origin {frame.origin}, expected {origin}")
        parts[origin] = frame.array(sizes[origin], local.shape[1], local.dtype)
    return tc.concat_rows(parts)


def reduce_scatter(group: RingGroup, local: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    sizes = _check_sizes(group, sizes)
    if local.shape[0] != sum(sizes):
        raise tc.ShapeError(f"rank {group.rank}: local has {local.shape[0]} rows, sizes sum to {sum(sizes)}")
    if group.world == 1:
        return local.copy()
    return group._guard("reduce_scatter", _reduce_scatter, group, local, sizes, "reduce_scatter")


def _reduce_scatter(group: RingGroup, local, sizes, primitive):
    d, rank = group.world, group.rank
    cid = group._new_id()
    segs = tc.split_rows(local, sizes)
    seg = (rank - 1) % d
    partial = segs[seg]
    for step in range(d - 1):
        frame = group._exchange(primitive, cid, step, partial, seg)
        seg = (rank - step - 2) % d
        if frame.origin != seg:
            raise ProtocolError(f"rank {rank}: partial for segment {frame.origin}, expected {seg}")
        incoming = frame.array(sizes[seg], local.shape[1], local.dtype)
        partial = incoming + segs[seg]
    return partial


def all_reduce(group: RingGroup, local: np.ndarray) -> np.ndarray:
    """Ring all-reduce as reduce-scatter over an even row split followed by all-gather."""
    if group.world == 1:
        return local.copy()
    sizes = equal_partition(local.shape[0], group.world)

    def run():
        part = _reduce_scatter(group, local, sizes, "all_reduce")
        return _all_gather(group, part, sizes, "all_reduce")

    return group._guard("all_reduce", run)


def overlapped_all_gather_gemm(group: RingGroup, local_rows: np.ndarray, weight: np.ndarray,
                               sizes: Sequence[int]) -> np.ndarray:
    sizes = _check_sizes(group, sizes)
    if local_rows.shape[0] != sizes[group.rank]:
        raise tc.ShapeError(f"rank {group.rank}: local has {local_rows.shape[0]} rows, sizes say {sizes[group.rank]}")
    if group.world == 1:
        return tc.gemm(local_rows, weight)
    return group._guard("all_gather", _ag_gemm, group, local_rows, weight, sizes)


def _ag_gemm(group: RingGroup, local, weight, sizes):
    d, rank = group.world, group.rank
    cid = group._new_id()
    outs: list = [None] * d
    cur, origin = local, rank
    for step in range(d):
        def tile(cur=cur, origin=origin):
            outs[origin] = tc.gemm(cur, weight)

        if step == d - 1:
            # last tile: nothing left to forward
            tile()
            break
        frame = group._exchange("all_gather", cid, step, cur, origin, compute=tile)
        origin = (rank - step - 1) % d
        if frame.origin != origin:
            raise ProtocolError(f"rank {rank}: fragment from origin {frame.origin}, expected {origin}")
        cur = frame.array(sizes[origin], local.shape[1], local.dtype)
    return tc.concat_rows(outs)


def overlapped_gemm_reduce_scatter(group: RingGroup, local_acts: np.ndarray, weight: np.ndarray,
                                   sizes: Sequence[int]) -> np.ndarray:
    sizes = _check_sizes(group, sizes)
    if local_acts.shape[0] != sum(sizes):
        raise tc.ShapeError(f"rank {group.rank}: local has {local_acts.shape[0]} rows, sizes sum to {sum(sizes)}")
    if group.world == 1:
        return tc.gemm(local_acts, weight)
    return group._guard("reduce_scatter", _gemm_rs, group, local_acts, weight, sizes)


def _gemm_rs(group: RingGroup, acts, weight, sizes):
    d, rank = group.world, group.rank
    cid = group._new_id()
    tiles = tc.split_rows(acts, sizes)
    seg = (rank - 1) % d
    partial = tc.gemm(tiles[seg], weight)
    cols = weight.shape[1]
    for step in range(d - 1):
        nxt = (rank - step - 2) % d
        local_out = {}

        def tile(nxt=nxt):
            local_out["o"] = tc.gemm(tiles[nxt], weight)

        frame = group._exchange("reduce_scatter", cid, step, partial, seg, compute=tile)
        if frame.origin != nxt:
            raise ProtocolError(f"rank {rank}: partial for segment {frame.origin}, expected {nxt}")
        incoming = frame.array(sizes[nxt], cols, acts.dtype)
        partial = incoming + local_out["o"]
        seg = nxt
    return partial


# --------------------------------------------------------------------------
# in-process rings for tests and notebooks


def local_ring(world: int, bandwidth_limit: float | None = None, timeout: float = DEFAULT_TIMEOUT,
               step_hook=None) -> list[RingGroup]:
    """``world`` RingGroups joined by socketpairs, for driving one rank per thread."""
    if world == 1:
        return [RingGroup(0, 1, timeout=timeout, step_hook=step_hook)]
    succ: list = [None] * world
    pred: list = [None] * world
    for r in range(world):
        nxt = (r + 1) % world
        a, b = link_pair(bandwidth_limit, bandwidth_limit, timeout, peers=(nxt, r))
        succ[r], pred[nxt] = a, b
    return [RingGroup(r, world, succ[r], pred[r], timeout, step_hook) for r in range(world)]


def run_ranks(groups: Sequence[RingGroup], fn: Callable, *per_rank_args, timeout: float = 120.0):
    """Run ``fn(group, *args[r])`` on one thread per rank; return results in rank order.

    The first exception raised by any rank is re-raised after all threads end.
    """
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(len(groups)) as pool:
        futs = [
            pool.submit(fn, g, *(a[g.rank] for a in per_rank_args)) for g in groups
        ]
        results, first_err = [], None
        for f in futs:
            try:
                results.append(f.result(timeout=timeout))
            except Exception as e:  # noqa: BLE001 -- re-raised below
                results.append(None)
                first_err = first_err or e
    if first_err is not None:
        raise first_err
    return results
