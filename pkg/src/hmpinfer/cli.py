"""Command-line driver: profile -> plan -> run / bench, with JSON artifacts between stages.

Subcommands::

    hmpinfer worker  --rank R --config cluster.json      serve one emulated device
    hmpinfer cluster --config cluster.json               spawn every worker of a config on this host
    hmpinfer profile --cluster cluster.json --out profile.json [model]
    hmpinfer plan    --profile profile.json --out plan.json [--seq N]
    hmpinfer run     --cluster cluster.json --plan plan.json [--seed S | --input x.npy] [--verify]
    hmpinfer bench   --cluster cluster.json --plan plan.json --sweep 50,125,500,1000 --repeat 5 --csv out.csv

``profile``, ``run`` and ``bench`` accept ``--spawn`` to start the workers of
the cluster config as local processes for the duration of the command.

Exit codes:

    0   success
    1   other failure
    2   connectivity (a worker unreachable or lost; the message names the rank)
    3   I/O (unreadable input, unwritable output)
    4   infeasible plan (deficits listed per device)
    5   verification failure (max relative error above tolerance)
    6   memory budget exceeded on a worker
    64  usage error

Artifact schemas (all JSON carry ``schema_version``):

    profile  {"schema_version", "model", "M_att", "M_mlp", "calibration",
              "devices": [{"device_id", "capacity", "memory_budget", "latency": {block: {size: s}}}]}
    plan     {"schema_version", "model", "plan": {"A", "B", "S"}, "devices", "estimated_memory", "budgets"}
    run      see :class:`hmpinfer.report.RunReport`
"""
from __future__ import annotations

import argparse
import csv
import contextlib
import json
import logging
import signal
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .engine import MODES
from .errors import BudgetExceeded, ConnectivityError, HMPError, WorkerError
from .model import ModelConfig, PRESETS, estimate_memory, init_random, load_weights, preset, random_input, reference_forward
from .planner import PartitionPlan, PlanInfeasible, ProfileError, plan as make_plan
from .profiler import DEFAULT_REPS, DEFAULT_SEQ, DEFAULT_WARMUP, ProfileReport, build_report, default_sizes
from .report import from_replies
from .runtime.cluster import Coordinator, LocalCluster, model_source
from .runtime.config import ClusterConfig
from .tensor_core import max_rel_error

log = logging.getLogger("hmpinfer")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONNECTIVITY = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_VERIFY = 5
EXIT_BUDGET = 6
EXIT_USAGE = 64

PLAN_SCHEMA_VERSION = 1
CSV_COLUMNS = ("bandwidth", "mode", "overlap", "latency_ms", "bytes")
DEFAULT_TOLERANCE = 1e-4

_CONNECTIVITY_TYPES = {"ConnectivityError", "PeerTimeout", "PeerDisconnected", "WorkerLost", "CollectiveError"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror or e}") from e


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _check_writable(path) -> None:
    """Fail before doing expensive work if ``path`` cannot be created."""
    p = Path(path)
    if p.is_dir() or not p.parent.is_dir():
        raise OSError(f"cannot write {path}: no such directory or is a directory")
    existed = p.exists()
    try:
        with open(p, "a"):
            pass
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    if not existed:
        p.unlink()


def _model_config(args, fallback: dict | None = None) -> ModelConfig:
    if args.weights:
        return None  # the checkpoint carries its own config
    base = preset(args.preset) if args.preset else (ModelConfig.from_dict(fallback) if fallback else None)
    overrides = {k: v for k, v in (("num_layers", args.layers), ("hidden", args.hidden),
                                   ("num_heads", args.heads), ("dtype", args.dtype)) if v is not None}
    if base is None:
        if not {"num_layers", "hidden", "num_heads"} <= overrides.keys():
            raise UsageError("model spec needs --preset, --weights, or all of --layers/--hidden/--heads")
        return ModelConfig(**overrides)
    return base.replace(**overrides) if overrides else base


def _load_cluster(path) -> ClusterConfig:
    try:
        return ClusterConfig.load(path)
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"invalid cluster config {path}: {e}") from e


@contextlib.contextmanager
def _session(args):
    cluster = _load_cluster(args.cluster)
    with contextlib.ExitStack() as stack:
        if args.spawn:
            stack.enter_context(LocalCluster(cluster))
        coord = Coordinator(cluster)
        stack.callback(coord.close)
        coord.connect()
        yield cluster, coord


def _load_plan(path) -> tuple[PartitionPlan, dict]:
    d = _read_json(path)
    if d.get("schema_version") != PLAN_SCHEMA_VERSION or "plan" not in d:
        raise UsageError(f"{path} is not a plan file (schema_version {PLAN_SCHEMA_VERSION})")
    return PartitionPlan.from_dict(d["plan"]), d


def _env_echo(cluster: ClusterConfig, mode: str, overlap: bool) -> dict:
    return {
        "mode": mode,
        "overlap": overlap,
        "devices": [w.device_id for w in cluster.workers],
        "throttles": [w.compute_throttle for w in cluster.workers],
        "bandwidth_limits": [w.bandwidth_limit for w in cluster.workers],
        "memory_budgets": [w.memory_budget for w in cluster.workers],
    }


def _worker_exit(e: WorkerError) -> int:
    types = e.types()
    if "BudgetExceeded" in types:
        return EXIT_BUDGET
    if types & _CONNECTIVITY_TYPES:
        return EXIT_CONNECTIVITY
    return EXIT_OTHER


# --------------------------------------------------------------------------
# subcommands


def cmd_worker(args) -> int:
    from .runtime import worker

    argv = ["--rank", str(args.rank), "--config", args.config]
    if args.listen:
        argv += ["--listen", args.listen]
    if args.verbose:
        argv.append("-v")
    return worker.main(argv)


def cmd_cluster(args) -> int:
    cluster = _load_cluster(args.config)
    with LocalCluster(cluster, log_dir=args.log_dir, verbose=args.verbose) as lc:
        for w in cluster.workers:
            print(f"{w.device_id} listening on {w.address}", flush=True)
        stop = {"flag": False}
        signal.signal(signal.SIGTERM, lambda *_: stop.update(flag=True))
        try:
            while not stop["flag"] and all(p.poll() is None for p in lc.procs):
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def cmd_profile(args) -> int:
    config = _model_config(args)
    if config is None:
        config = load_weights(args.weights).config
    _check_writable(args.out)
    seq = args.seq
    sizes = default_sizes(config, seq)
    with _session(args) as (cluster, coord):
        tables = coord.profile(config.to_dict(), sizes, seq, args.reps, args.warmup, parallel=args.parallel)
    budgets = [w.memory_budget if w.memory_budget is not None else float("inf") for w in cluster.workers]
    report = build_report(config, [w.device_id for w in cluster.workers], budgets, tables, seq, args.reps, args.warmup)
    _write_text(args.out, _dump(report.to_dict()))
    for d in report.devices:
        print(f"{d.device_id}: capacity {d.capacity:.4g} /s")
    return EXIT_OK


def cmd_plan(args) -> int:
    try:
        report = ProfileReport.from_dict(_read_json(args.profile))
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"invalid profile {args.profile}: {e}") from e
    config = _model_config(args, fallback=report.model.to_dict()) if not args.weights else load_weights(args.weights).config
    seq = args.seq or int(report.calibration.get("seq", DEFAULT_SEQ))
    _check_writable(args.out)
    try:
        result = make_plan(report.devices, config, seq)
    except PlanInfeasible as e:
        print(f"error: {e}", file=sys.stderr)
        for d, deficit in sorted(e.deficits.items()):
            print(f"  {report.devices[d].device_id}: {deficit:.0f} bytes over budget", file=sys.stderr)
        return EXIT_INFEASIBLE
    est = [estimate_memory(config, result, d) for d in range(result.world)]
    out = {
        "schema_version": PLAN_SCHEMA_VERSION,
        "model": config.to_dict(),
        "plan": result.to_dict(),
        "devices": [d.device_id for d in report.devices],
        "estimated_memory": [float(m) for m in est],
        "budgets": [None if d.memory_budget == float("inf") else d.memory_budget for d in report.devices],
    }
    _write_text(args.out, _dump(out))
    print(f"A={list(result.A)} B={list(result.B)} S={list(result.S)}")
    return EXIT_OK


def _run_inputs(args, plan_doc: dict):
    """Model source, config and input tensor for run/bench."""
    if args.weights:
        model = load_weights(args.weights)
        config, source = model.config, model_source(path=Path(args.weights).resolve())
    else:
        config = _model_config(args, fallback=plan_doc.get("model"))
        model = None
        source = model_source(config, args.seed)
    if args.input:
        try:
            x = np.load(args.input)
        except (OSError, ValueError) as e:
            raise OSError(f"cannot read {args.input}: {e}") from e
        x = np.asarray(x, dtype=config.np_dtype)
    else:
        x = random_input(config, args.seq or sum(plan_doc["plan"]["S"]), args.seed + 1)
    if x.ndim != 2 or x.shape[1] != config.hidden:
        raise UsageError(f"input must be seq x {config.hidden}, got {x.shape}")
    return config, source, model, x


def cmd_run(args) -> int:
    plan, plan_doc = _load_plan(args.plan)
    config, source, model, x = _run_inputs(args, plan_doc)
    plan = plan.with_seq(x.shape[0]) if plan.seq != x.shape[0] else plan
    plan.validate(config, x.shape[0])
    if args.report:
        _check_writable(args.report)
    overlap = args.overlap == "on"
    with _session(args) as (cluster, coord):
        coord.load(source, plan, args.mode)
        result = coord.run(x, plan, args.mode, overlap)
    report = from_replies(result, plan, _env_echo(cluster, args.mode, overlap), config.to_dict())
    status = EXIT_OK
    if args.verify:
        model = model or init_random(config, args.seed)
        err = max_rel_error(result.output, reference_forward(model, x))
        report.max_rel_error = err
        ok = err <= args.tolerance
        print(f"verify: max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
        status = EXIT_OK if ok else EXIT_VERIFY
    if args.output:
        np.save(args.output, result.output)
    if args.report:
        _write_text(args.report, report.dumps())
    print(f"latency {report.latency * 1e3:.2f} ms, {report.total_bytes()} collective bytes, checksum {report.checksum[:16]}")
    return status


def _csv_list(text: str, conv=float) -> list:
    try:
        return [conv(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise UsageError(f"bad list {text!r}: {e}") from e


def cmd_bench(args) -> int:
    plan, plan_doc = _load_plan(args.plan)
    config, source, _, x = _run_inputs(args, plan_doc)
    plan = plan.with_seq(x.shape[0]) if plan.seq != x.shape[0] else plan
    plan.validate(config, x.shape[0])
    sweep = _csv_list(args.sweep) if args.sweep else [None]
    modes = _csv_list(args.modes, str)
    overlaps = _csv_list(args.overlap, str)
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}")
    if any(o not in ("on", "off") for o in overlaps):
        raise UsageError("--overlap takes on/off values")
    _check_writable(args.csv)
    rows = []
    reports_dir = Path(args.reports_dir) if args.reports_dir else None
    if reports_dir:
        reports_dir.mkdir(parents=True, exist_ok=True)
    with _session(args) as (cluster, coord):
        for mode in modes:
            coord.load(source, plan, mode)
            for rep in range(args.repeat):
                for bw in sweep:
                    if bw is not None:
                        coord.set(bandwidth_limit=bw * 1e6)
                    for ov in overlaps:
                        result = coord.run(x, plan, mode, ov == "on")
                        env = _env_echo(cluster, mode, ov == "on")
                        if bw is not None:
                            env["bandwidth_limits"] = [bw * 1e6] * cluster.world
                        report = from_replies(result, plan, env, config.to_dict())
                        rows.append({"bandwidth": "unlimited" if bw is None else f"{bw:g}", "mode": mode, "overlap": ov,
                                     "latency_ms": f"{report.latency * 1e3:.3f}", "bytes": report.total_bytes()})
                        if reports_dir:
                            bw_tag = "inf" if bw is None else f"{bw:g}"
                            report.save(reports_dir / f"{mode}_bw{bw_tag}_overlap-{ov}_r{rep}.json")
    try:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    except OSError as e:
        raise OSError(f"cannot write {args.csv}: {e.strerror or e}") from e
    _print_summary(rows)
    return EXIT_OK


def _print_summary(rows: list[dict]) -> None:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["bandwidth"], r["mode"], r["overlap"]), []).append(float(r["latency_ms"]))
    print(f"{'bandwidth':>10} {'mode':>13} {'overlap':>7} {'median_ms':>10} {'p90_ms':>10}")
    for (bw, mode, ov), lat in groups.items():
        p90 = float(np.percentile(lat, 90))
        print(f"{bw:>10} {mode:>13} {ov:>7} {statistics.median(lat):>10.2f} {p90:>10.2f}")


# --------------------------------------------------------------------------
# argument parsing


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--layers", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--dtype", choices=["float16", "float32", "float64"])
    g.add_argument("--weights", help="checkpoint written by hmpinfer.model.save_weights")


def _add_cluster_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cluster", required=True, help="cluster config JSON")
    p.add_argument("--spawn", action="store_true", help="start the config's workers locally for this command")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plan", required=True, help="plan JSON from `hmpinfer plan`")
    p.add_argument("--seed", type=int, default=0, help="weight seed (input uses seed+1)")
    p.add_argument("--input", help=".npy input activations, seq x hidden")
    p.add_argument("--seq", type=int, help="sequence length of the synthetic input")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hmpinfer", description="Hybrid tensor/sequence parallel transformer inference on emulated edge clusters.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    w = sub.add_parser("worker", help="serve one device")
    w.add_argument("--rank", type=int, required=True)
    w.add_argument("--config", required=True)
    w.add_argument("--listen")
    w.set_defaults(func=cmd_worker)

    c = sub.add_parser("cluster", help="spawn all workers of a config on this host")
    c.add_argument("--config", required=True)
    c.add_argument("--log-dir")
    c.set_defaults(func=cmd_cluster)

    pr = sub.add_parser("profile", help="measure block latencies on every worker")
    _add_cluster_args(pr)
    _add_model_args(pr)
    pr.add_argument("--out", required=True)
    pr.add_argument("--seq", type=int, default=DEFAULT_SEQ)
    pr.add_argument("--reps", type=int, default=DEFAULT_REPS)
    pr.add_argument("--warmup", type=int, default=DEFAULT_WARMUP)
    pr.add_argument("--parallel", action="store_true", help="profile all workers at once")
    pr.set_defaults(func=cmd_profile)

    pl = sub.add_parser("plan", help="compute a partition plan from a profile")
    pl.add_argument("--profile", required=True)
    _add_model_args(pl)
    pl.add_argument("--out", required=True)
    pl.add_argument("--seq", type=int)
    pl.set_defaults(func=cmd_plan)

    r = sub.add_parser("run", help="one distributed forward pass")
    _add_cluster_args(r)
    _add_model_args(r)
    _add_run_args(r)
    r.add_argument("--overlap", choices=["on", "off"], default="on")
    r.add_argument("--mode", choices=MODES, default="hmp")
    r.add_argument("--verify", action="store_true", help="compare against the single-process reference")
    r.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    r.add_argument("--report", help="RunReport JSON path")
    r.add_argument("--output", help="save the output activations (.npy)")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="repeat runs across bandwidths, modes and overlap settings")
    _add_cluster_args(b)
    _add_model_args(b)
    _add_run_args(b)
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--sweep", help="comma-separated bandwidths in Mbit/s (default: the config's limits)")
    b.add_argument("--modes", default="hmp")
    b.add_argument("--overlap", default="on,off", help="comma-separated subset of on,off")
    b.add_argument("--csv", required=True)
    b.add_argument("--reports-dir", help="write one RunReport per run here")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PlanInfeasible as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except WorkerError as e:
        print(f"error: {e}", file=sys.stderr)
        return _worker_exit(e)
    except ConnectivityError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONNECTIVITY
    except BudgetExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ProfileError, HMPError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
