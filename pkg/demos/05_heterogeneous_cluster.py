"""Profile, plan and run on two worker processes, one of them throttled to half speed.

The straggler gap of a phase is (slowest - fastest) / fastest on the
devices' emulated compute clocks. A capacity-proportional plan keeps it
small; an equal split leaves the fast device idle half the time.
"""
import argparse
import math

from hmpinfer import engine
from hmpinfer.model import ModelConfig, preset, random_input
from hmpinfer.planner import CON, MHA, MLP, DeviceProfile, PartitionPlan, plan
from hmpinfer.profiler import capacity_from_tables
from hmpinfer.runtime.cluster import LocalCluster, model_source
from hmpinfer.runtime.config import loopback_cluster


def gaps(coord, x, p):
    t = engine.merge_traces(coord.run(x, p, overlap=False).records)[0]
    return {ph: t.straggler_gap(ph) for ph in ("mha", "mlp")}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--full", action="store_true", help="use a GPT2-L sized layer (slower)")
    ap.add_argument("--seq", type=int, default=128)
    args = ap.parse_args()
    cfg = preset("gpt2-l", num_layers=1) if args.full else ModelConfig(1, 16, 1024)

    with LocalCluster(loopback_cluster(2, throttles=[1.0, 2.0])) as lc:
        coord = lc.coordinator()
        sizes = {MHA: [cfg.num_heads], MLP: [cfg.intermediate], CON: [args.seq]}
        tables = coord.profile(cfg.to_dict(), sizes, args.seq, 5, 2)
        caps = [capacity_from_tables(t, cfg) for t in tables]
        print(f"measured capacities: {caps[0]:.2f} and {caps[1]:.2f} blocks/s (ratio {caps[0] / caps[1]:.2f})")
        balanced = plan([DeviceProfile(f"dev{i}", c, math.inf) for i, c in enumerate(caps)], cfg, args.seq)
        print(f"balanced plan: heads {balanced.A}, columns {balanced.B}")

        x = random_input(cfg, args.seq, 1)
        for name, p in (("balanced", balanced), ("equal", PartitionPlan.even(cfg, 2, args.seq))):
            coord.load(model_source(cfg, 0), p)
            coord.run(x, p)
            g = gaps(coord, x, p)
            print(f"{name:>8} split: straggler gap mha {g['mha']:.2f}, mlp {g['mlp']:.2f}")
        coord.close()


if __name__ == "__main__":
    main()
