"""Splitting heads and MLP columns by device capacity, then fitting memory budgets."""
import math

from hmpinfer.model import estimate_memory, model_weight_bytes, preset
from hmpinfer.planner import DeviceProfile, PlanInfeasible, plan


def show(title, cfg, devices, seq=284):
    print(f"\n{title}")
    try:
        p = plan(devices, cfg, seq)
    except PlanInfeasible as e:
        print(f"  infeasible: {e}")
        return
    for d, dev in enumerate(devices):
        mem = float(estimate_memory(cfg, p, d))
        budget = "unlimited" if math.isinf(dev.memory_budget) else f"{dev.memory_budget / 1e6:.0f} MB"
        print(f"  {dev.device_id}: capacity {dev.capacity:g}, heads {p.A[d]:2d}, columns {p.B[d]:4d}, "
              f"rows {p.S[d]:3d}, weights {mem / 1e6:6.1f} MB of {budget}")


def main():
    cfg = preset("gpt2-l")
    total = model_weight_bytes(cfg)
    print(f"GPT2-L: {cfg.num_layers} layers, {cfg.num_heads} heads, {cfg.intermediate} MLP columns, "
          f"{total / 1e6:.0f} MB of fp32 weights")
    inf = math.inf
    show("two equal devices", cfg, [DeviceProfile("a", 1.0, inf), DeviceProfile("b", 1.0, inf)])
    show("one device twice as fast", cfg, [DeviceProfile("fast", 2.0, inf), DeviceProfile("slow", 1.0, inf)])
    show("the fast device only holds 45% of the weights", cfg,
         [DeviceProfile("fast", 2.0, 0.45 * total), DeviceProfile("slow", 1.0, inf)])
    show("three devices, none can hold a third", cfg,
         [DeviceProfile(n, 1.0, 0.3 * total) for n in ("a", "b", "c")])


if __name__ == "__main__":
    main()
