"""The operator workflow through the command line: profile, plan, run, bench.

Writes its artifacts to a scratch directory and prints each command.
"""
import subprocess
import sys
import tempfile
from pathlib import Path

from hmpinfer.runtime.config import loopback_cluster


def hmpinfer(*args):
    cmd = [sys.executable, "-m", "hmpinfer", *map(str, args)]
    print("$ hmpinfer " + " ".join(map(str, args)))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    print(proc.stdout + proc.stderr, end="")
    print(f"(exit {proc.returncode})\n")
    return proc.returncode


def main():
    work = Path(tempfile.mkdtemp(prefix="hmpinfer-demo-"))
    cluster = work / "cluster.json"
    loopback_cluster(2, throttles=[1.0, 2.0]).save(cluster)
    model = ["--layers", "2", "--hidden", "256", "--heads", "8"]
    hmpinfer("profile", "--cluster", cluster, "--spawn", *model, "--seq", 64, "--out", work / "profile.json")
    hmpinfer("plan", "--profile", work / "profile.json", "--out", work / "plan.json")
    hmpinfer("run", "--cluster", cluster, "--spawn", "--plan", work / "plan.json", "--verify",
             "--report", work / "report.json")
    hmpinfer("bench", "--cluster", cluster, "--spawn", "--plan", work / "plan.json", "--repeat", 2,
             "--sweep", "50,500", "--modes", "hmp,tp-allreduce", "--csv", work / "bench.csv")
    # a config whose workers are not running: connectivity error, exit 2
    loopback_cluster(2, timeout=0.5).save(work / "nobody.json")
    hmpinfer("run", "--cluster", work / "nobody.json", "--plan", work / "plan.json")
    print(f"artifacts in {work}")


if __name__ == "__main__":
    main()
