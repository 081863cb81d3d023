"""Coordinator side: connect to workers, build the ring, drive load/run/profile.

``LocalCluster`` additionally spawns the worker processes on loopback, which
is how tests and the demos stand up an emulated edge cluster on one host.
"""
from __future__ import annotations

import json
import os
import secrets
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConnectivityError, PeerTimeout, WorkerError
from ..planner import PartitionPlan
from .config import ClusterConfig
from .transport import Frame, Link, parse_address


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


@dataclass
class RunResult:
    output: np.ndarray
    latency: float
    replies: list[dict] = field(default_factory=list)

    @property
    def records(self) -> list[list[dict]]:
        return [r["records"] for r in self.replies]


class Coordinator:
    """Control-plane client for a running cluster.

    Every request is broadcast to all workers and every reply is awaited;
    if any worker reports an error (or disappears) a :class:`WorkerError`
    carrying each affected rank's error is raised.
    """

    def __init__(self, cluster: ClusterConfig, connect_timeout: float | None = None,
                 reply_timeout: float = 600.0):
        self.cluster = cluster
        self.connect_timeout = cluster.timeout if connect_timeout is None else connect_timeout
        self.reply_timeout = reply_timeout
        self.links: list[Link] = []
        self._pool = ThreadPoolExecutor(max(1, cluster.world), thread_name_prefix="coord")

    @property
    def world(self) -> int:
        return self.cluster.world

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def connect(self, ring: bool = True) -> "Coordinator":
        for r, w in enumerate(self.cluster.workers):
            host, port = parse_address(w.address)
            deadline = time.monotonic() + self.connect_timeout
            while True:
                try:
                    sock = socket.create_connection((host, port), timeout=self.connect_timeout)
                    break
                except OSError as e:
                    if time.monotonic() > deadline:
                        self.close()
                        raise ConnectivityError(
                            f"worker rank {r} ({w.device_id}) at {w.address} is unreachable: {e}", rank=r
                        ) from e
                    time.sleep(0.05)
            link = Link(sock, peer=r, timeout=None)
            link.send(Frame.control({"role": "coordinator"}))
            self.links.append(link)
        if ring:
            self.establish_ring()
        return self

    def close(self) -> None:
        for link in self.links:
            link.close()
        self.links = []
        self._pool.shutdown(wait=False, cancel_futures=True)

    # -- plumbing

    def _recv_reply(self, r: int, deadline: float, tensor: bool) -> dict:
        link = self.links[r]
        try:
            reply = link.recv(timeout=max(0.01, deadline - time.monotonic())).json()
            if tensor and reply.get("ok") and reply.get("out"):
                rows, cols, dtype = reply["out"]
                reply["_output"] = link.recv(timeout=max(0.01, deadline - time.monotonic())).array(rows, cols, dtype)
        except PeerTimeout as e:
            return {"ok": False, "rank": r, "error": {"type": "PeerTimeout", "message": f"rank {r}: no reply: {e}"}}
        except ConnectivityError as e:
            return {"ok": False, "rank": r,
                    "error": {"type": "WorkerLost", "message": f"rank {r} connection lost: {e}", "peer": r}}
        return reply

    def request(self, msgs, extra=None, timeout: float | None = None, tensor: bool = False) -> list[dict]:
        """Send ``msgs[r]`` (and optional frames ``extra[r]``) to each rank; return the replies."""
        if isinstance(msgs, dict):
            msgs = [msgs] * self.world
        deadline = time.monotonic() + (timeout or self.reply_timeout)
        errors = {}
        for r, link in enumerate(self.links):
            try:
                link.send(Frame.control(msgs[r]))
                if extra is not None and extra[r] is not None:
                    link.send(extra[r])
            except ConnectivityError as e:
                errors[r] = {"type": "WorkerLost", "message": f"rank {r}: {e}", "peer": r}
        futs = {r: self._pool.submit(self._recv_reply, r, deadline, tensor)
                for r in range(self.world) if r not in errors}
        replies: list = [None] * self.world
        for r, f in futs.items():
            replies[r] = f.result()
            if not replies[r].get("ok"):
                errors[r] = replies[r]["error"]
        if errors:
            raise WorkerError(errors)
        return replies

    # -- operations

    def establish_ring(self) -> float:
        token = secrets.token_hex(8)
        t0 = time.perf_counter()
        try:
            self.request({"cmd": "ring", "token": token, "addresses": self.cluster.addresses()},
                         timeout=self.cluster.timeout * 2 + 5)
        except WorkerError as e:
            peers = {err.get("peer") for err in e.errors.values() if err.get("peer") is not None}
            raise ConnectivityError(f"ring setup failed: {e}", rank=min(peers) if peers else None) from e
        return time.perf_counter() - t0

    def ping(self) -> list[dict]:
        return self.request({"cmd": "ping"}, timeout=self.cluster.timeout)

    def set(self, rank: int | None = None, **knobs) -> None:
        msgs = [{"cmd": "set", **(knobs if rank is None or r == rank else {})} for r in range(self.world)]
        self.request(msgs, timeout=self.cluster.timeout)

    def load(self, model_source: dict, plan: PartitionPlan, mode: str = "hmp") -> list[dict]:
        if plan.world != self.world:
            raise ValueError(f"plan is for {plan.world} devices, cluster has {self.world}")
        return self.request({"cmd": "load", "model": model_source, "plan": plan.to_dict(), "mode": mode})

    def run(self, x: np.ndarray, plan: PartitionPlan, mode: str = "hmp", overlap: bool = True) -> RunResult:
        from ..engine import input_part

        if plan.seq != x.shape[0]:
            plan = plan.with_seq(x.shape[0])
        msgs, frames = [], []
        for r in range(self.world):
            part = input_part(x, plan, r, mode)
            msgs.append({"cmd": "run", "rows": part.shape[0], "cols": part.shape[1], "dtype": part.dtype.name,
                         "overlap": overlap, "seq": x.shape[0]})
            frames.append(Frame.tensor(part))
        t0 = time.perf_counter()
        replies = self.request(msgs, frames, tensor=True)
        latency = time.perf_counter() - t0
        return RunResult(replies[0].pop("_output"), latency, replies)

    def profile(self, config_dict: dict, sizes, seq: int, reps: int, warmup: int,
                parallel: bool = False) -> list[dict[str, dict[int, float]]]:
        """Median block latency tables, one per worker.

        By default one device runs at a time, in ``reps`` rounds of one
        repetition each, so emulated devices sharing a host neither disturb
        each other nor see different phases of the host's background load.
        """
        from ..profiler import summarize

        if reps < 3:
            raise ValueError("profiling needs at least 3 repetitions per entry")
        msg = {"cmd": "profile", "config": config_dict, "sizes": sizes, "seq": seq}
        if parallel:
            replies = self.request({**msg, "reps": reps, "warmup": warmup})
            return [_tables(rep, float) for rep in replies]
        samples: list[dict] = [{} for _ in range(self.world)]
        for rnd in range(reps):
            for r in range(self.world):
                rep = self._request_one(r, {**msg, "reps": 1, "warmup": warmup if rnd == 0 else 0, "raw": True})
                for blk, table in _tables(rep, list).items():
                    for size, vals in table.items():
                        samples[r].setdefault(blk, {}).setdefault(size, []).extend(vals)
        return [summarize(s) for s in samples]

    def _request_one(self, r: int, msg: dict) -> dict:
        link = self.links[r]
        try:
            link.send(Frame.control(msg))
        except ConnectivityError as e:
            raise WorkerError({r: {"type": "WorkerLost", "message": str(e), "peer": r}}) from e
        reply = self._recv_reply(r, time.monotonic() + self.reply_timeout, False)
        if not reply.get("ok"):
            raise WorkerError({r: reply["error"]})
        return reply

    def shutdown_workers(self) -> None:
        for link in self.links:
            try:
                link.send(Frame.control({"cmd": "shutdown"}))
            except ConnectivityError:
                pass


class LocalCluster:
    """Spawn one worker process per configured device on this host.

    Use as a context manager; ``coordinator()`` opens a connected session.
    """

    def __init__(self, cluster: ClusterConfig, startup_timeout: float = 60.0, log_dir=None, verbose=False):
        self.cluster = cluster
        self.startup_timeout = startup_timeout
        self.verbose = verbose
        self.log_dir = Path(log_dir) if log_dir else None
        self.procs: list[subprocess.Popen] = []
        self._tmp = tempfile.TemporaryDirectory(prefix="hmpinfer-")
        self.config_path = Path(self._tmp.name) / "cluster.json"

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def start(self) -> None:
        self.cluster.save(self.config_path)
        env = {k: v for k, v in os.environ.items() if not k.startswith("HMPINFER_")}
        for r in range(self.cluster.world):
            cmd = [sys.executable, "-m", "hmpinfer.runtime.worker", "--rank", str(r), "--config", str(self.config_path)]
            if self.verbose:
                cmd.append("-v")
            stderr = subprocess.DEVNULL
            if self.log_dir:
                self.log_dir.mkdir(parents=True, exist_ok=True)
                stderr = open(self.log_dir / f"worker{r}.log", "w")
            self.procs.append(subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=stderr, env=env, text=True))
        for r, proc in enumerate(self.procs):
            line = _readline(proc, self.startup_timeout)
            if not line.startswith("READY"):
                self.stop()
                raise ConnectivityError(f"worker rank {r} failed to start (got {line!r})", rank=r)

    def coordinator(self, ring: bool = True, **kw) -> Coordinator:
        return Coordinator(self.cluster, **kw).connect(ring=ring)

    def kill(self, rank: int) -> None:
        proc = self.procs[rank]
        if proc.poll() is None:
            proc.send_signal(signal.SIGKILL)
            proc.wait()

    def stop(self) -> None:
        for proc in self.procs:
            if proc.poll() is None:
                proc.terminate()
        for proc in self.procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
            if proc.stdout:
                proc.stdout.close()
        self.procs = []
        self._tmp.cleanup()


def _readline(proc: subprocess.Popen, timeout: float) -> str:
    out: list[str] = []
    t = threading.Thread(target=lambda: out.append(proc.stdout.readline()), daemon=True)
    t.start()
    t.join(timeout)
    return out[0].strip() if out else ""


def _tables(reply: dict, kind) -> dict:
    return {b: {int(k): kind(v) for k, v in t.items()} for b, t in reply["latency"].items()}


def model_source(config=None, seed: int = 0, path=None) -> dict:
    """The ``model`` field of a load request: a checkpoint path or a synthesis recipe."""
    if path is not None:
        return {"path": str(path)}
    return {"config": config.to_dict(), "seed": seed}


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
