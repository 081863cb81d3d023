"""Killing a worker mid-inference: every rank reports what went wrong, nobody hangs."""
import threading
import time

from hmpinfer.errors import WorkerError
from hmpinfer.model import ModelConfig, random_input
from hmpinfer.planner import PartitionPlan
from hmpinfer.runtime.cluster import LocalCluster, model_source
from hmpinfer.runtime.config import loopback_cluster


def main():
    cfg = ModelConfig(2, 8, 512)
    p = PartitionPlan.even(cfg, 3, 192)
    x = random_input(cfg, 192, 0)
    cluster = loopback_cluster(3, bandwidth_limit=100e6, timeout=2.0)
    with LocalCluster(cluster) as lc:
        coord = lc.coordinator()
        coord.load(model_source(cfg, 0), p)
        clean = coord.run(x, p).latency
        print(f"clean run: {clean * 1e3:.0f} ms; killing rank 1 after {clean * 400:.0f} ms of the next one")
        threading.Timer(clean * 0.4, lc.kill, args=(1,)).start()
        t0 = time.perf_counter()
        try:
            coord.run(x, p)
        except WorkerError as e:
            print(f"run failed after {(time.perf_counter() - t0) * 1e3:.0f} ms (timeout is {cluster.timeout:g} s):")
            for rank, err in sorted(e.errors.items()):
                where = f" in phase {err['phase']}" if err.get("phase") else ""
                print(f"  rank {rank}: {err['type']}{where}: {err['message']}")
        coord.close()


if __name__ == "__main__":
    main()
