#!/usr/bin/env python3
"""End-to-end demo: a two-node cluster with replication, a card-profile
metric set, a node failure mid-stream, and verified recovery.

    python3 scripts/demo_cluster.py
"""

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from railgun.dataset import PAYMENTS_DECL, DatasetSpec, generate_rows
from railgun.runtime import Cluster, NodeConfig


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="railgun-demo-") as root:
        cluster = Cluster(root, NodeConfig(processor_units=1))
        for _ in range(2):
            cluster.add_node()
        cluster.create_stream(PAYMENTS_DECL, partitions=4, replication=2)
        cluster.add_metric(
            "payments",
            "SELECT SUM(amount), COUNT(*) FROM payments "
            "GROUP BY cardId RANGE 5 MINUTES",
        )
        cluster.run_until_idle()
        print(f"cluster: {len(cluster.nodes)} nodes, "
              f"{cluster.task_processor_count()} task processors")

        rows = list(generate_rows(DatasetSpec(n=500, seed=7, rate=100.0,
                                              cards=20)))
        for event_id, ts, values in rows[:400]:
            cluster.submit("payments", event_id, ts, values)

        victim = sorted(cluster.nodes)[0]
        print(f"failing node {victim} ...")
        cluster.fail_node(victim)

        last = None
        for event_id, ts, values in rows[400:]:
            last = cluster.submit("payments", event_id, ts, values)
        print(f"last response after failover: {last.status}")
        for metric, key, value in last.results:
            print(f"  {metric}{key} = {value}")
        promotions = [t for t in cluster.transfers if t["mode"] == "none"]
        print(f"replica promotions with zero data transfer: {len(promotions)}")
        cluster.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
