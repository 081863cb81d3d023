"""A transformer layer split across emulated devices, checked against one device.

Heads and MLP columns are split tensor-parallel; the connective blocks
(dropout, residual add, layer norm) run on row slices of the sequence.
Every rank is a thread here, joined by socketpair rings.
"""
import argparse

import numpy as np

from hmpinfer import engine
from hmpinfer.model import ModelConfig, init_random, random_input, reference_forward
from hmpinfer.planner import PartitionPlan, balanced_partition
from hmpinfer.tensor_core import max_rel_error


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--hidden", type=int, default=256)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--seq", type=int, default=64)
    args = ap.parse_args()

    cfg = ModelConfig(args.layers, args.heads, args.hidden)
    model = init_random(cfg, seed=0)
    x = random_input(cfg, args.seq, seed=1)
    y_ref = reference_forward(model, x)
    print(f"model: {cfg.num_layers} layers, h={cfg.hidden}, {cfg.num_heads} heads; input {x.shape}")

    # an uneven plan on purpose: the output must not depend on the split
    weights = [4, 3, 1]
    plan = PartitionPlan(balanced_partition(weights, cfg.num_heads), balanced_partition(weights, cfg.intermediate),
                         balanced_partition(weights[::-1], args.seq))
    print(f"plan: heads {plan.A}, MLP columns {plan.B}, rows {plan.S}")

    for mode in engine.MODES:
        y, traces = engine.run_local(model, plan, x, mode=mode)
        t = traces[0]
        moved = sum(sum(v) for v in t.bytes_sent.values())
        print(f"{mode:>13}: max rel error {max_rel_error(y, y_ref):.2e}, "
              f"layer 0 phases {list(t.phases)}, {moved} bytes sent")

    y, _ = engine.run_local(model, PartitionPlan.even(cfg, 1, args.seq), x)
    print(f"single rank reproduces the reference bitwise: {np.array_equal(y, y_ref)}")


if __name__ == "__main__":
    main()
