"""Command line entry points.

    railgun gen-data --n 100000 --seed 7 --out events.tsv
    railgun run-cluster --config cluster.json --events events.tsv --out replies.jsonl
    railgun query add --stream payments "SELECT SUM(amount) FROM payments ..."
    railgun query rm --stream payments --name sum_amount
    railgun inject --scenario scenario.json --out results/
    railgun bench e1|e2|e3|e4|all --out results/ [--quick]
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from . import bench as bench_mod
from .dataset import PAYMENTS_DECL, DatasetSpec, read_event_file, write_event_file
from .messaging import Broker
from .model import parse_query, parse_stream_decl
from .runtime import CONTROL_TOPIC, Cluster, NodeConfig, TopicSpec


def _cluster_from_config(raw: dict) -> Cluster:
    data_dir = raw.get("data_dir", "railgun-data")
    cfg = NodeConfig(
        processor_units=raw.get("processor_units", 1),
        cache_capacity=raw.get("cache_capacity", 32),
        chunk_target_events=raw.get("chunk_target_events", 256),
        checkpoint_every_events=raw.get("checkpoint_every_events", 10_000),
        checkpoint_every_ms=raw.get("checkpoint_every_ms", 5_000),
        session_timeout_ms=raw.get("session_timeout_ms", 3_000),
        reply_timeout_ms=raw.get("reply_timeout_ms", 1_000),
    )
    cluster = Cluster(data_dir, cfg)
    for _ in range(raw.get("nodes", 1)):
        cluster.add_node()
    stream_path = raw.get("stream_decl")
    if stream_path:
        with open(stream_path, "r", encoding="utf-8") as fh:
            decl = parse_stream_decl(fh.read())
        if decl.name not in cluster.registrations:
            cluster.create_stream(
                decl,
                partitions=raw.get("partitions", 4),
                replication=raw.get("replication", 1),
            )
    for q in raw.get("queries", ()):
        stream = next(iter(cluster.registrations))
        cluster.add_metric(stream, q)
    cluster.run_until_idle()
    return cluster


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(
        n=args.n, seed=args.seed, rate=args.rate, cards=args.cards,
        merchants=args.merchants, zipf_s=args.zipf_s,
    )
    n = write_event_file(spec, args.out)
    print(f"wrote {n} events to {args.out}")
    return 0


def cmd_run_cluster(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    cluster = _cluster_from_config(raw)
    print(
        f"cluster up: {len(cluster.nodes)} nodes, "
        f"{cluster.task_processor_count()} task processors, "
        f"streams: {sorted(cluster.registrations)}"
    )
    if not args.events:
        cluster.run_until_idle()
        cluster.checkpoint_all()
        cluster.close()
        return 0
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    fe = next(iter(cluster.nodes.values())).front_end
    stream = next(iter(cluster.registrations))
    reg = cluster.registrations[stream]
    routed = 0
    completed = 0

    def drain():
        nonlocal completed
        for event_id in list(fe.responses):
            resp = fe.take_response(event_id)
            entry = {
                "event_id": resp.event_id,
                "status": resp.status,
                "results": [
                    [m, list(k), v] for m, k, v in resp.results
                ],
            }
            out.write(json.dumps(entry) + "\n")
            completed += 1

    for event_id, ts, values in read_event_file(args.events, reg.decl):
        fe.route_event(reg, event_id, ts, values)
        routed += 1
        cluster.step()
        drain()
    for _ in range(200_000):
        if not fe.pending:
            break
        cluster.step()
        drain()
    drain()
    cluster.checkpoint_all()
    cluster.close()
    if out is not sys.stdout:
        out.close()
    print(f"routed {routed} events, wrote {completed} responses", file=sys.stderr)
    return 0


def _control_broker(data_dir: str) -> Broker:
    broker = Broker(os.path.join(data_dir, "broker"))
    if not broker.topic_exists(CONTROL_TOPIC):
        broker.create_topic(TopicSpec(CONTROL_TOPIC, 1))
    return broker


def _decl_from_control(broker: Broker, stream: str):
    decl = None
    for rec in broker.partitions[(CONTROL_TOPIC, 0)].records:
        op = json.loads(rec.payload.decode())
        if op["kind"] == "create_stream":
            candidate = parse_stream_decl(op["decl"])
            if candidate.name == stream:
                decl = candidate
    return decl


def cmd_query(args) -> int:
    broker = _control_broker(args.data_dir)
    try:
        if args.action == "add":
            decl = _decl_from_control(broker, args.stream)
            if decl is not None:
                parse_query(args.query, decl.schema(0))
            else:
                parse_query(args.query)
            broker.publish(
                CONTROL_TOPIC, b"",
                json.dumps({
                    "kind": "add_metric", "stream": args.stream,
                    "query": args.query,
                }).encode(),
            )
            print(f"queued metric on stream {args.stream}")
        else:
            broker.publish(
                CONTROL_TOPIC, b"",
                json.dumps({
                    "kind": "remove_metric", "stream": args.stream,
                    "name": args.name,
                }).encode(),
            )
            print(f"queued removal of {args.name} on stream {args.stream}")
    finally:
        broker.close()
    return 0


def cmd_inject(args) -> int:
    scenario = bench_mod.Scenario.from_file(args.scenario)
    with tempfile.TemporaryDirectory(prefix="railgun-inject-") as workdir:
        cluster = Cluster(os.path.join(workdir, "cluster"), NodeConfig(
            processor_units=1,
            reply_timeout_ms=int(scenario.reply_timeout_ms),
        ))
        for _ in range(max(1, scenario.node_count)):
            cluster.add_node()
        cluster.create_stream(PAYMENTS_DECL, partitions=4, replication=1)
        queries = scenario.queries or (
            "SELECT SUM(amount) FROM payments GROUP BY cardId RANGE 60 MINUTES",
        )
        for q in queries:
            cluster.add_metric("payments", q)
        cluster.run_until_idle()
        samples, censored = bench_mod.inject(scenario, cluster)
        cluster.close()
    warmup_ms = scenario.warmup_events * 1000.0 / scenario.rate
    summary = bench_mod.report(
        samples, args.out, name="inject", warmup_ms=warmup_ms,
        censored=censored,
    )
    for key in sorted(summary):
        print(f"{key}: {summary[key]:.3f}")
    return 0


def cmd_bench(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    with tempfile.TemporaryDirectory(prefix="railgun-bench-") as workdir:
        if args.experiment == "all":
            bench_mod.run_paper_experiments(workdir, args.out, quick=args.quick)
        elif args.experiment == "e1":
            bench_mod.run_e1_hopping_cost(workdir, args.out, quick=args.quick)
        elif args.experiment == "e2":
            bench_mod.run_e2_window_size(workdir, args.out, quick=args.quick)
        elif args.experiment == "e3":
            bench_mod.run_e3_iterators(workdir, args.out, quick=args.quick)
        elif args.experiment == "e4":
            bench_mod.run_e4_scaling(workdir, args.out, quick=args.quick)
    print(f"experiment outputs in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="railgun",
        description="Per-event sliding-window streaming engine, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic event file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--rate", type=float, default=1000.0)
    g.add_argument("--cards", type=int, default=1000)
    g.add_argument("--merchants", type=int, default=100)
    g.add_argument("--zipf-s", type=float, default=1.1, dest="zipf_s")
    g.set_defaults(fn=cmd_gen_data)

    r = sub.add_parser("run-cluster", help="run a cluster over an event file")
    r.add_argument("--config", required=True)
    r.add_argument("--events")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run_cluster)

    q = sub.add_parser("query", help="queue metric changes on the control log")
    qsub = q.add_subparsers(dest="action", required=True)
    qa = qsub.add_parser("add")
    qa.add_argument("--stream", required=True)
    qa.add_argument("--data-dir", default="railgun-data")
    qa.add_argument("query")
    qa.set_defaults(fn=cmd_query, action="add")
    qr = qsub.add_parser("rm")
    qr.add_argument("--stream", required=True)
    qr.add_argument("--name", required=True)
    qr.add_argument("--data-dir", default="railgun-data")
    qr.set_defaults(fn=cmd_query, action="rm")

    i = sub.add_parser("inject", help="scheduled-rate injection benchmark")
    i.add_argument("--scenario", required=True)
    i.add_argument("--out", default="railgun-results")
    i.set_defaults(fn=cmd_inject)

    b = sub.add_parser("bench", help="run the experiment suite")
    b.add_argument("experiment", choices=["e1", "e2", "e3", "e4", "all"])
    b.add_argument("--out", default="railgun-results")
    b.add_argument("--quick", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
