"""Worker process: one emulated edge device.

Run as ``python -m hmpinfer.runtime.worker --rank R --config cluster.json``.
The worker listens on its configured address and serves coordinator
sessions one at a time; each session builds its own ring.
"""
from __future__ import annotations

import argparse
import logging
import os
import queue
import socket
import sys
import threading
import time

import numpy as np

from .. import engine
from .. import tensor_core as tc
from ..collectives import RingGroup
from ..errors import BudgetExceeded, CollectiveError, ConnectivityError, PeerTimeout, ProtocolError
from ..model import ModelConfig, init_random, load_weights
from ..planner import PartitionPlan
from ..profiler import profile_blocks, sample_blocks
from .config import ENV_LISTEN, ClusterConfig
from .memory import MemoryAccountant
from .transport import Frame, FrameKind, Link, TokenBucket, parse_address

log = logging.getLogger("hmpinfer.worker")

HELLO_TIMEOUT = 5.0


def error_dict(exc: BaseException) -> dict:
    d = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("peer", "phase", "site"):
        if getattr(exc, attr, None) is not None:
            d[attr] = getattr(exc, attr)
    if isinstance(exc, ConnectivityError) and exc.rank is not None:
        d.setdefault("peer", exc.rank)
    return d


class Worker:
    def __init__(self, rank: int, cluster: ClusterConfig, listen: str | None = None):
        self.rank = rank
        self.cluster = cluster
        self.spec = cluster.workers[rank]
        self.world = cluster.world
        self.timeout = cluster.timeout
        self.listen = listen or self.spec.address
        tc.set_compute_throttle(self.spec.compute_throttle)
        self.memory = MemoryAccountant(self.spec.memory_budget, rank)
        self.group: RingGroup | None = None
        self.shards: engine.DeviceShards | None = None
        self.plan: PartitionPlan | None = None
        self.mode = "hmp"
        self._ring_in: queue.Queue = queue.Queue()
        self._coord_in: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        host, port = parse_address(self.listen)
        self.server = socket.create_server((host, port), reuse_port=False, backlog=16)

    # -- connection intake

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self.server.accept()
            except OSError:
                return
            threading.Thread(target=self._hello, args=(sock,), daemon=True).start()

    def _hello(self, sock: socket.socket) -> None:
        link = Link(sock, timeout=HELLO_TIMEOUT)
        try:
            msg = link.recv().json()
        except Exception:  # noqa: BLE001 -- probes and strays just get dropped
            link.close()
            return
        if msg.get("role") == "ring":
            link.peer = msg["rank"]
            self._ring_in.put((msg.get("token"), link))
        elif msg.get("role") == "coordinator":
            self._coord_in.put(link)
        else:
            link.close()

    # -- main loop

    def serve_forever(self) -> None:
        threading.Thread(target=self._accept_loop, daemon=True).start()
        while not self._stop.is_set():
            try:
                ctrl = self._coord_in.get(timeout=0.5)
            except queue.Empty:
                continue
            ctrl.sock.settimeout(None)
            ctrl.timeout = None
            try:
                self._session(ctrl)
            finally:
                ctrl.close()
                self._drop_ring()
        self.server.close()

    def _session(self, ctrl: Link) -> None:
        while not self._stop.is_set():
            try:
                frame = ctrl.recv()
            except ConnectivityError:
                return
            msg = frame.json()
            cmd = msg.get("cmd")
            handler = getattr(self, f"_cmd_{cmd}", None)
            if handler is None:
                ctrl.send(Frame.control({"ok": False, "error": {"type": "ProtocolError", "message": f"unknown command {cmd!r}"}}))
                continue
            try:
                handler(ctrl, msg)
            except ConnectivityError as e:
                if getattr(e, "rank", None) is None:
                    return  # the coordinator itself went away
                raise

    def _reply(self, ctrl: Link, ok: bool = True, **kw) -> None:
        ctrl.send(Frame.control({"ok": ok, "rank": self.rank, **kw}))

    def _fail(self, ctrl: Link, exc: BaseException) -> None:
        log.warning("rank %d: %s", self.rank, exc)
        try:
            self._reply(ctrl, False, error=error_dict(exc))
        except ConnectivityError:
            pass

    def _drop_ring(self) -> None:
        if self.group is not None:
            self.group.close()
            self.group = None

    # -- commands

    def _cmd_ping(self, ctrl, msg):
        self._reply(ctrl, pid=os.getpid())

    def _cmd_shutdown(self, ctrl, msg):
        self._reply(ctrl)
        self._stop.set()

    def _cmd_set(self, ctrl, msg):
        if "compute_throttle" in msg:
            self.spec.compute_throttle = float(msg["compute_throttle"])
            tc.set_compute_throttle(self.spec.compute_throttle)
        if "bandwidth_limit" in msg:
            limit = msg["bandwidth_limit"]
            self.spec.bandwidth_limit = limit
            if self.group is not None and self.group.succ is not None:
                self.group.succ.bandwidth_limit = limit
                self.group.succ.bucket = TokenBucket(limit / 8.0) if limit else None
        if "memory_budget" in msg:
            self.spec.memory_budget = msg["memory_budget"]
            self.memory.budget = msg["memory_budget"]
        self._reply(ctrl)

    def _cmd_ring(self, ctrl, msg):
        self._drop_ring()
        token = msg["token"]
        addresses = msg["addresses"]
        t0 = time.perf_counter()
        if self.world == 1:
            self.group = RingGroup(0, 1, timeout=self.timeout)
            self._reply(ctrl, elapsed=0.0)
            return
        succ_rank = (self.rank + 1) % self.world
        pred_rank = (self.rank - 1) % self.world
        succ = pred = None
        try:
            succ = self._connect_succ(addresses[succ_rank], succ_rank, token)
            pred = self._await_pred(pred_rank, token)
            succ.send(Frame.control({"health": self.rank, "token": token}))
            echo = pred.recv().json()
            if echo.get("health") != pred_rank or echo.get("token") != token:
                raise ProtocolError(f"bad health check from rank {pred_rank}: {echo}")
        except Exception as e:  # noqa: BLE001
            for link in (succ, pred):
                if link is not None:
                    link.close()
            self._fail(ctrl, e)
            return
        self.group = RingGroup(self.rank, self.world, succ, pred, timeout=self.timeout)
        self._reply(ctrl, elapsed=time.perf_counter() - t0)

    def _connect_succ(self, address: str, succ_rank: int, token) -> Link:
        host, port = parse_address(address)
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=self.timeout)
                break
            except OSError as e:
                if time.monotonic() > deadline:
                    raise PeerTimeout(f"rank {self.rank}: successor rank {succ_rank} at {address} unreachable: {e}",
                                      succ_rank) from e
                time.sleep(0.05)
        link = Link(sock, succ_rank, self.spec.bandwidth_limit, self.timeout)
        link.send(Frame.control({"role": "ring", "rank": self.rank, "token": token}))
        return link

    def _await_pred(self, pred_rank: int, token) -> Link:
        deadline = time.monotonic() + self.timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise PeerTimeout(f"rank {self.rank}: predecessor rank {pred_rank} never connected", pred_rank)
            try:
                tok, link = self._ring_in.get(timeout=remaining)
            except queue.Empty:
                continue
            if tok == token and link.peer == pred_rank:
                link.sock.settimeout(self.timeout)
                link.timeout = self.timeout
                return link
            link.close()

    def _cmd_load(self, ctrl, msg):
        self.shards = None
        self.memory.release_all()
        try:
            src = msg["model"]
            model = load_weights(src["path"]) if "path" in src else init_random(ModelConfig.from_dict(src["config"]), src.get("seed", 0))
            self.plan = PartitionPlan.from_dict(msg["plan"])
            self.mode = msg.get("mode", "hmp")
            if self.plan.world != self.world:
                raise ValueError(f"plan is for {self.plan.world} devices, cluster has {self.world}")
            if self.mode == "sp-only":
                shards = engine.replicate_weights(model, self.rank)
            else:
                shards = engine.shard_weights(model, self.plan, self.rank)
            del model
            for i, layer in enumerate(shards.layers):
                for name, arr in layer.named_tensors():
                    self.memory.reserve(f"load:layer{i}.{name}", arr.nbytes)
            self.shards = shards
        except Exception as e:  # noqa: BLE001
            self.memory.release_all()
            self._fail(ctrl, e)
            return
        self._reply(ctrl, resident_bytes=self.memory.resident)

    def _cmd_run(self, ctrl, msg):
        data = ctrl.recv()
        try:
            if self.shards is None or self.group is None:
                raise ProtocolError("run before load/ring")
            x = data.array(msg["rows"], msg["cols"], msg["dtype"])
            if msg.get("seq") is not None and msg["seq"] != self.plan.seq:
                self.plan = self.plan.with_seq(msg["seq"])
            self.memory.peak = self.memory.in_use
            self.group.reset_counters()
            succ, pred = self.group.succ, self.group.pred
            sent0 = succ.bytes_sent[FrameKind.TENSOR] if succ else 0
            recv0 = pred.bytes_recv[FrameKind.TENSOR] if pred else 0
            t0 = time.perf_counter()
            result = engine.run_model(self.group, self.shards, self.plan, x, self.mode,
                                      bool(msg.get("overlap", True)), self.memory)
            wall = time.perf_counter() - t0
        except (CollectiveError, ConnectivityError) as e:
            self._drop_ring()
            self._fail(ctrl, e)
            return
        except Exception as e:  # noqa: BLE001
            log.exception("run failed")
            self._drop_ring()
            self._fail(ctrl, e)
            return
        out = result.output if self.rank == 0 else None
        transport = {
            "sent": (succ.bytes_sent[FrameKind.TENSOR] - sent0) if succ else 0,
            "recv": (pred.bytes_recv[FrameKind.TENSOR] - recv0) if pred else 0,
        }
        self._reply(ctrl, records=result.records, counters=self.group.counters(), transport=transport,
                    peak=self.memory.peak, resident=self.memory.resident, wall=wall,
                    out=None if out is None else [out.shape[0], out.shape[1], out.dtype.name])
        if out is not None:
            ctrl.send(Frame.tensor(out))

    def _cmd_profile(self, ctrl, msg):
        try:
            cfg = ModelConfig.from_dict(msg["config"])
            sizes = {k: [int(s) for s in v] for k, v in msg["sizes"].items()} if msg.get("sizes") else None
            if msg.get("raw"):
                tables = sample_blocks(cfg, sizes, msg["seq"], msg["reps"], msg["warmup"], msg.get("seed", 0))
            else:
                tables = profile_blocks(cfg, sizes, msg["seq"], msg["reps"], msg["warmup"], msg.get("seed", 0))
        except Exception as e:  # noqa: BLE001
            self._fail(ctrl, e)
            return
        self._reply(ctrl, latency={b: {str(k): v for k, v in t.items()} for b, t in tables.items()})


def _warm_up() -> None:
    a = np.ones((2, 2), np.float32)
    tc.gemm.unthrottled(a, a)
    tc.gemm.unthrottled(a.astype(np.float64), a.astype(np.float64))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="hmpinfer-worker", description=__doc__)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--config", required=True, help="cluster config JSON")
    p.add_argument("--listen", default=None, help="host:port to bind (default: the config's address)")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format=f"%(asctime)s rank{args.rank} %(levelname)s %(message)s")
    cluster = ClusterConfig.load(args.config)
    if not 0 <= args.rank < cluster.world:
        p.error(f"rank {args.rank} outside cluster of {cluster.world}")
    listen = args.listen or os.environ.get(ENV_LISTEN)
    _warm_up()
    try:
        worker = Worker(args.rank, cluster, listen)
    except OSError as e:
        print(f"rank {args.rank}: cannot bind {listen or cluster.workers[args.rank].address}: {e}", file=sys.stderr)
        return 2
    print(f"READY {args.rank} {worker.listen}", flush=True)
    worker.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
