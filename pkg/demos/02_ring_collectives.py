"""Ring all-gather, reduce-scatter and all-reduce, and what they put on the wire."""
import argparse

import numpy as np

from hmpinfer import collectives as coll
from hmpinfer.planner import equal_partition
from hmpinfer.runtime.transport import FrameKind


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--world", type=int, default=4)
    ap.add_argument("--rows", type=int, default=64)
    ap.add_argument("--cols", type=int, default=32)
    args = ap.parse_args()
    d = args.world
    sizes = equal_partition(args.rows, d)
    full = np.random.default_rng(0).standard_normal((d, args.rows, args.cols)).astype(np.float32)

    def body(g):
        link = g.succ
        out = {}
        before = link.bytes_sent[FrameKind.TENSOR]
        out["all_reduce"] = coll.all_reduce(g, full[g.rank])
        mid = link.bytes_sent[FrameKind.TENSOR]
        part = coll.reduce_scatter(g, full[g.rank], sizes)
        out["all_gather"] = coll.all_gather(g, part, sizes)
        after = link.bytes_sent[FrameKind.TENSOR]
        return out, mid - before, after - mid

    groups = coll.local_ring(d)
    res = coll.run_ranks(groups, body)
    for g in groups:
        g.close()

    expected = full.sum(axis=0)
    for r, (out, ar_bytes, rs_ag_bytes) in enumerate(res):
        err = np.abs(out["all_reduce"] - expected).max()
        same = np.array_equal(out["all_gather"], out["all_reduce"])
        print(f"rank {r}: max abs error {err:.1e}, RS+AG equals AR bitwise {same}; "
              f"all-reduce sent {ar_bytes} B, reduce-scatter + all-gather sent {rs_ag_bytes} B")
    tensor = full[0].nbytes
    print(f"tensor {tensor} B; each rank sends 2(D-1)/D of it per all-reduce = {2 * (d - 1) / d * tensor:.0f} B")


if __name__ == "__main__":
    main()
