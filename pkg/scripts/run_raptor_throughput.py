#!/usr/bin/env python3
"""Master/worker throughput demo: N noop calls through two masters with
four single-core workers each, on an oversubscribed local pilot.

Usage: python3 scripts/run_raptor_throughput.py [N_CALLS] [WORKDIR]
"""

import sys
import time

from pilotkit.client import create_session
from pilotkit.core import Fabric, PilotDescription
from pilotkit.raptor import MasterConfig, launch_master, launch_workers


def main() -> int:
    n_calls = int(sys.argv[1]) if len(sys.argv) > 1 else 20000
    workdir = sys.argv[2] if len(sys.argv) > 2 else "./raptor_demo"
    session = create_session(workdir, seed=0)
    pd = PilotDescription(uid="pl", fabric=Fabric.LOCAL, nodes=1,
                          cores_per_node=12, oversubscribe=True)
    session.create_pilot_manager().submit_pilot(pd)
    tm = session.create_task_manager()
    cfg = MasterConfig(workers_per_master=4, cores_per_worker=1)
    handles = [launch_master(session, tm, cfg, muid=f"m{m}", pilot_pd=pd)
               for m in range(2)]
    for h in handles:
        launch_workers(h)
    half = n_calls // 2
    t0 = time.monotonic()
    for m, h in enumerate(handles):
        h.submit_calls([{"uid": f"m{m}.c{i:06d}", "fn": "noop", "payload": ""}
                        for i in range(half)])
    results = []
    for h in handles:
        results.extend(h.results(half, timeout_s=600.0))
        h.close()
    wall = time.monotonic() - t0
    session.close()
    ok = sum(1 for r in results if r["ok"])
    print(f"{ok}/{n_calls} calls ok in {wall:.1f} s "
          f"({n_calls / wall:.0f} calls/s)")
    return 0 if ok == n_calls else 1


if __name__ == "__main__":
    sys.exit(main())
