"""Latency of the three parallel modes across link speeds, on three worker processes."""
import argparse
import statistics

from hmpinfer.model import ModelConfig, preset, random_input
from hmpinfer.planner import PartitionPlan
from hmpinfer.report import from_replies
from hmpinfer.runtime.cluster import LocalCluster, model_source
from hmpinfer.runtime.config import loopback_cluster


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--full", action="store_true", help="GPT2-L sized layer at seq 284")
    ap.add_argument("--mbit", default="50,200,1000")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    cfg, seq = (preset("gpt2-l", num_layers=1), 284) if args.full else (ModelConfig(1, 8, 512), 128)
    p = PartitionPlan.even(cfg, 3, seq)
    x = random_input(cfg, seq, 1)
    rows = []
    with LocalCluster(loopback_cluster(3)) as lc:
        coord = lc.coordinator()
        for mode, overlap in (("hmp", True), ("hmp", False), ("tp-allreduce", True), ("sp-only", True)):
            coord.load(model_source(cfg, 0), p, mode)
            for mbit in (float(m) for m in args.mbit.split(",")):
                coord.set(bandwidth_limit=mbit * 1e6)
                coord.run(x, p, mode, overlap)
                runs = [coord.run(x, p, mode, overlap) for _ in range(args.repeat)]
                rep = from_replies(runs[-1], p, {})
                rows.append((mode, overlap, mbit, statistics.median(r.latency for r in runs), rep.total_bytes()))
        coord.close()
    print(f"{'mode':>13} {'overlap':>7} {'Mbit/s':>7} {'median ms':>10} {'bytes':>10}")
    for mode, ov, mbit, lat, nbytes in rows:
        print(f"{mode:>13} {'on' if ov else 'off':>7} {mbit:7g} {lat * 1e3:10.1f} {nbytes:10d}")


if __name__ == "__main__":
    main()
