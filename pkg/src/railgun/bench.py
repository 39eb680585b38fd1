"""Benchmark harness: dataset injection, latency accounting, experiments.

Latency discipline: the injector never skips a scheduled send. Sends are
queued under backpressure and every sample's latency is measured from its
*scheduled* send time, so a stalled engine shows up as a wall of slow
samples instead of silently thinning the data.

Per-event service times are measured on the real engine (wall clock
around the full processing path); arrival timing and cross-node
concurrency are simulated, which is sound here because event-time drives
all window semantics and task processors share nothing.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import model
from .aggregation import StateStore
from .dataset import PAYMENTS_DECL, DatasetSpec, generate_rows
from .histogram import LatencyHistogram
from .hopping import HoppingEngine, HoppingQuery
from .model import HoppingSpec, MetricQuery, WindowSpec
from .plan import build_plan
from .reservoir import Reservoir, ReservoirConfig


@dataclass
class Scenario:
    engine: str = "sliding"            # sliding | hopping
    queries: tuple[str, ...] = ()
    window_ms: int = 60 * model.MINUTE
    hop_ms: int | None = None          # hopping only
    window_sweep: tuple[int, ...] = ()
    iterator_sweep: tuple[int, ...] = ()
    node_count: int = 1
    rate: float = 500.0                # offered events/second
    n_events: int = 10_000
    warmup_events: int = 1_000
    seed: int = 7
    cards: int = 1000
    merchants: int = 100
    zipf_s: float = 1.1
    stall_at_ms: float | None = None
    stall_ms: float = 0.0
    reply_timeout_ms: float = 30_000.0

    def __post_init__(self):
        if self.warmup_events >= self.n_events:
            raise ValueError("warmup must be shorter than the run")
        if self.rate <= 0:
            raise ValueError("rate must be positive")

    @staticmethod
    def from_file(path: str) -> "Scenario":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        for key in ("queries", "window_sweep", "iterator_sweep"):
            if key in raw and isinstance(raw[key], list):
                raw[key] = tuple(raw[key])
        return Scenario(**raw)


@dataclass
class LatencySample:
    scheduled_send_ms: float
    actual_send_ms: float
    reply_ms: float

    @property
    def latency_ms(self) -> float:
        # measured against the schedule, not the delayed send
        return self.reply_ms - self.scheduled_send_ms

    @property
    def queuing_delay_ms(self) -> float:
        return self.actual_send_ms - self.scheduled_send_ms


def schedule_times(n: int, rate_hz: float, start_ms: float = 0.0) -> np.ndarray:
    return start_ms + np.arange(n, dtype=np.float64) * (1000.0 / rate_hz)


def simulate_injection(scheduled_ms, service_ms, stalls=()) -> list[LatencySample]:
    """Single-server queue: scheduled arrivals, measured service times.

    ``stalls`` are (start_ms, duration_ms) pauses during which the engine
    does no work; queued sends wait them out.
    """
    samples = []
    free = 0.0
    pending_stalls = sorted(stalls)
    for sched, svc in zip(scheduled_ms, service_ms):
        while pending_stalls and pending_stalls[0][0] <= max(sched, free):
            at, dur = pending_stalls.pop(0)
            free = max(free, at) + dur
        start = max(sched, free)
        reply = start + svc
        free = reply
        samples.append(LatencySample(float(sched), float(start), float(reply)))
    return samples


# --------------------------------------------------------------------------
# Engine harnesses (per-event processing cost on the real engine)
# --------------------------------------------------------------------------


def tune_interpreter() -> None:
    """Shorten the GIL switch interval for benchmark processes.

    The engine's persistence and prefetch workers do mostly C-level work
    but still need interpreter slices; at the default 5 ms interval they
    starve behind a busy processing thread and queue up work. This is
    process-level runtime tuning, the same knob family as heap and GC
    settings on a managed runtime.
    """
    if sys.getswitchinterval() > 0.0005:
        sys.setswitchinterval(0.0005)


class SlidingHarness:
    """One task processor's engine path, driven directly."""

    def __init__(self, directory: str, queries: list[MetricQuery],
                 decl=PAYMENTS_DECL, **reservoir_kw):
        tune_interpreter()
        self.reservoir = Reservoir(
            os.path.join(directory, "reservoir"), ReservoirConfig(**reservoir_kw)
        )
        self.reservoir.register_schema(decl.fields)
        self.schema = self.reservoir.registry.get(0)
        self.store = StateStore(os.path.join(directory, "state"))
        self.plan = build_plan(queries, self.reservoir, self.store, self.schema)

    def preload(self, rows) -> int:
        n = 0
        for event_id, ts, values in rows:
            self.reservoir.append(
                model.Event(id=event_id, ts=ts, schema_id=0, values=values)
            )
            n += 1
        self.reservoir.drain_persistence()
        return n

    def add_metric(self, q: MetricQuery) -> None:
        self.plan.add_metric(q)

    def measure(self, rows, gauge_every: int = 512):
        """Processes rows; returns (service_ms array, chunk gauge list).

        The collector is paused for the measured region: cyclic GC pauses
        are allocation-rate noise, not engine behavior, and they land in
        exactly the tail percentiles under study.
        """
        import gc

        service = []
        gauges = []
        structural = []
        process = self.plan.process_event
        append = self.reservoir.append
        gc.collect()
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for i, (event_id, ts, values) in enumerate(rows):
                event = model.Event(id=event_id, ts=ts, schema_id=0,
                                    values=values)
                t0 = time.perf_counter_ns()
                if append(event).stored:
                    process(event)
                service.append(time.perf_counter_ns() - t0)
                if i % gauge_every == 0:
                    gauges.append(self.reservoir.chunks_in_memory())
                    structural.append(
                        self.reservoir.structural_chunks_in_memory()
                    )
        finally:
            if gc_was_enabled:
                gc.enable()
        self.last_structural_gauges = structural
        return np.asarray(service, dtype=np.float64) / 1e6, gauges

    def close(self):
        self.reservoir.close()


class HoppingHarness:
    def __init__(self, queries: list[HoppingQuery], decl=PAYMENTS_DECL):
        self.schema = decl.schema(0)
        self.engine = HoppingEngine(queries, self.schema)

    def measure(self, rows):
        service = []
        process = self.engine.process_event
        for event_id, ts, values in rows:
            event = model.Event(id=event_id, ts=ts, schema_id=0, values=values)
            t0 = time.perf_counter_ns()
            process(event)
            service.append(time.perf_counter_ns() - t0)
        return np.asarray(service, dtype=np.float64) / 1e6


# --------------------------------------------------------------------------
# inject / report
# --------------------------------------------------------------------------


def inject(scenario: Scenario, cluster) -> tuple[list[LatencySample], int]:
    """Drive a running cluster on the scenario's schedule.

    Returns (samples, censored_count): a sample per scheduled send, with
    replies collected through the front-end; timed-out replies are
    censored and reported separately, never dropped silently.
    """
    spec = DatasetSpec(
        n=scenario.n_events, seed=scenario.seed, rate=scenario.rate,
        cards=scenario.cards, merchants=scenario.merchants,
        zipf_s=scenario.zipf_s,
    )
    scheduled = schedule_times(scenario.n_events, scenario.rate)
    service = np.empty(scenario.n_events, dtype=np.float64)
    censored = 0
    fe = next(
        node.front_end for node in cluster.nodes.values()
        if not node.front_end.failed
    )
    for i, (event_id, ts, values) in enumerate(generate_rows(spec)):
        t0 = time.perf_counter_ns()
        resp = cluster.submit(
            cluster_stream_name(cluster), event_id, ts, values, front_end=fe
        )
        service[i] = (time.perf_counter_ns() - t0) / 1e6
        if resp.status != "complete":
            censored += 1
    stalls = []
    if scenario.stall_at_ms is not None and scenario.stall_ms > 0:
        stalls.append((scenario.stall_at_ms, scenario.stall_ms))
    samples = simulate_injection(scheduled, service, stalls)
    return samples, censored


def cluster_stream_name(cluster) -> str:
    return next(iter(cluster.registrations))


def report(samples: list[LatencySample], out_dir: str | None = None,
           name: str = "run", warmup_ms: float = 0.0,
           censored: int = 0) -> dict:
    """Percentile table over post-warmup samples; optional CSV + plot."""
    if not samples:
        raise ValueError("no samples")
    hist = LatencyHistogram()
    kept = [s.latency_ms for s in samples if s.scheduled_send_ms >= warmup_ms]
    hist.record_many(np.asarray(kept))
    summary = hist.summary()
    summary["censored"] = float(censored)
    summary["warmup_dropped"] = float(len(samples) - len(kept))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        rows = [[key, f"{value:.6f}"] for key, value in sorted(summary.items())]
        write_csv(os.path.join(out_dir, f"{name}.csv"), ["metric", "value"], rows)
        _plot_latency_cdf(kept, os.path.join(out_dir, f"{name}.png"), name)
    return summary


def write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")


def _plot_latency_cdf(latencies_ms, path: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = np.sort(np.asarray(latencies_ms))
    if data.size == 0:
        return
    q = np.arange(1, data.size + 1) / data.size
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(data, 100.0 * (1.0 - q))
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("% of samples above")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_series(xs, series: dict, path: str, xlabel: str, ylabel: str,
                 title: str, logy: bool = True) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def percentile_exact(values, q: float) -> float:
    data = np.sort(np.asarray(values))
    if data.size == 0:
        return math.nan
    rank = min(data.size - 1, max(0, math.ceil(data.size * q / 100.0) - 1))
    return float(data[rank])


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------

SUM_BY_CARD = MetricQuery(
    "sum_amount", "sum", "amount", ("cardId",),
    WindowSpec("sliding", size_ms=60 * model.MINUTE),
)


def _rows(n, seed=7, rate=10.0, start_ts=0, cards=1000, merchants=100):
    return generate_rows(
        DatasetSpec(n=n, seed=seed, rate=rate, cards=cards,
                    merchants=merchants, start_ts=start_ts)
    )


def run_e1_hopping_cost(workdir: str, out_dir: str, quick: bool = False) -> list[dict]:
    """Sliding engine vs hopping baseline while the hop shrinks."""
    window = 60 * model.MINUTE
    hops = [5 * model.MINUTE, model.MINUTE, 10 * model.SECOND, model.SECOND]
    n = 1200 if quick else 3000
    rate = 1.0  # one event per second of event time
    results = []
    for hop in hops:
        q = HoppingQuery("sum_amount", "sum", "amount", ("cardId",),
                         HoppingSpec(window, hop))
        harness = HoppingHarness([q])
        service = harness.measure(
            _rows(n, rate=rate, start_ts=window)  # past warmup: full state count
        )
        results.append({
            "engine": "hopping",
            "window_ms": window,
            "hop_ms": hop,
            "updates_per_event": harness.engine.updates_per_event(),
            "mean_ms": float(service.mean()),
            "p50_ms": percentile_exact(service, 50),
            "p999_ms": percentile_exact(service, 99.9),
        })
    sliding_sizes = (window, 6 * 60 * model.MINUTE)
    # identical preload for both runs, spanning the largest window, so the
    # tail cursor is retracting from the first measured event either way
    preload_n = 0 if quick else (max(sliding_sizes) // 1000 + 600)
    for size in sliding_sizes:
        d = os.path.join(workdir, f"e1-sliding-{size}")
        harness = SlidingHarness(d, [], chunk_target_events=256)
        if preload_n:
            harness.preload(_rows(preload_n, rate=rate, seed=3))
        harness.add_metric(
            MetricQuery("sum_amount", "sum", "amount", ("cardId",),
                        WindowSpec("sliding", size_ms=size))
        )
        service, _ = harness.measure(
            _rows(n, rate=rate, seed=4, start_ts=preload_n * 1000)
        )
        harness.close()
        results.append({
            "engine": "sliding",
            "window_ms": size,
            "hop_ms": 0,
            "updates_per_event": 1.0,
            "mean_ms": float(service.mean()),
            "p50_ms": percentile_exact(service, 50),
            "p999_ms": percentile_exact(service, 99.9),
        })
    _write_experiment(out_dir, "e1_hopping_cost", results)
    hop_rows = [r for r in results if r["engine"] == "hopping"]
    _plot_series(
        [r["hop_ms"] / 1000 for r in hop_rows],
        {"hopping mean": [r["mean_ms"] for r in hop_rows]},
        os.path.join(out_dir, "e1_hopping_cost.png"),
        "hop (s)", "per-event cost (ms)", "hopping cost vs hop size",
    )
    return results


def run_e2_window_size(workdir: str, out_dir: str, quick: bool = False,
                       sizes=None, n_measured: int | None = None) -> list[dict]:
    """Window length sweep: cost and memory must not scale with the window."""
    sizes = sizes or [5 * model.MINUTE, model.HOUR, 24 * model.HOUR,
                      7 * 24 * model.HOUR]
    n = n_measured or (20_000 if quick else 100_000)
    span_needed = max(sizes)
    step_ms = max(1, math.ceil(span_needed / (n if quick else 110_000)))
    rate = 1000.0 / step_ms
    results = []
    for size in sizes:
        d = os.path.join(workdir, f"e2-{size}")
        harness = SlidingHarness(
            d, [], chunk_target_events=256, cache_capacity=32, zlib_level=1,
        )
        # preload enough history that both the head and tail cursors are
        # live from the first measured event, even for the 7-day window
        preload_n = math.ceil(span_needed / step_ms) + 1000
        harness.preload(_rows(preload_n, rate=rate, seed=11))
        harness.add_metric(
            MetricQuery("sum_amount", "sum", "amount", ("cardId",),
                        WindowSpec("sliding", size_ms=size))
        )
        service, gauges = harness.measure(
            _rows(n, rate=rate, seed=12, start_ts=preload_n * step_ms)
        )
        bound = harness.reservoir.memory_bound()
        harness.close()
        results.append({
            "engine": "sliding",
            "window_ms": size,
            "events": n,
            "mean_ms": float(service.mean()),
            "p50_ms": percentile_exact(service, 50),
            "p999_ms": percentile_exact(service, 99.9),
            "chunks_in_memory_max": max(gauges),
            "chunks_in_memory_mean": float(np.mean(gauges)),
            "structural_chunks_max": max(harness.last_structural_gauges),
            "memory_bound": bound,
        })
    _write_experiment(out_dir, "e2_window_size", results)
    _plot_series(
        [r["window_ms"] / 3_600_000 for r in results],
        {
            "p99.9 (ms)": [r["p999_ms"] for r in results],
            "max chunks in memory": [r["chunks_in_memory_max"] for r in results],
        },
        os.path.join(out_dir, "e2_window_size.png"),
        "window (hours)", "per-event cost / chunks", "window size sweep",
    )
    return results


def misaligned_windows(count: int, step_ms: int,
                       chunk_events: int = 256) -> list[MetricQuery]:
    """Windows with pairwise distinct sizes and delays, so no two share a
    head or tail cursor position."""
    chunk_span = chunk_events * step_ms
    queries = []
    for i in range(count):
        size = 40 * chunk_span + (i + 1) * 2 * chunk_span
        delay = i * 2 * chunk_span
        queries.append(
            MetricQuery(
                f"m{i:03d}", "sum", "amount", ("cardId",),
                WindowSpec("sliding", size_ms=size, delay_ms=delay),
            )
        )
    return queries


def run_e3_iterators(workdir: str, out_dir: str, quick: bool = False,
                     window_counts=None, cache_capacity: int = 32) -> list[dict]:
    """Iterator count sweep around the chunk cache capacity."""
    window_counts = window_counts or ([8, 40] if quick else [4, 8, 16, 40])
    step_ms = 100
    n = 8_000 if quick else 20_000
    results = []
    for count in window_counts:
        d = os.path.join(workdir, f"e3-{count}")
        queries = misaligned_windows(count, step_ms)
        span = max(q.window.size_ms + q.window.delay_ms for q in queries)
        preload_n = span // step_ms + 1000
        harness = SlidingHarness(
            d, [], chunk_target_events=256, cache_capacity=cache_capacity,
        )
        harness.preload(_rows(preload_n, rate=1000.0 / step_ms, seed=21))
        for q in queries:
            harness.add_metric(q)
        iterators = harness.plan.iterator_count()
        cache = harness.reservoir.cache
        loads0, misses0 = harness.reservoir.loads, cache.misses
        service, _ = harness.measure(
            _rows(n, rate=1000.0 / step_ms, seed=22,
                  start_ts=preload_n * step_ms)
        )
        misses = cache.misses - misses0
        harness.close()
        results.append({
            "windows": count,
            "iterators": iterators,
            "cache_capacity": cache_capacity,
            "events": n,
            "mean_ms": float(service.mean()),
            "p999_ms": percentile_exact(service, 99.9),
            "cache_misses": misses,
            "misses_per_1k_events": 1000.0 * misses / n,
        })
    _write_experiment(out_dir, "e3_iterators", results)
    _plot_series(
        [r["iterators"] for r in results],
        {
            "p99.9 (ms)": [r["p999_ms"] for r in results],
            "misses per 1k events": [
                max(r["misses_per_1k_events"], 1e-3) for r in results
            ],
        },
        os.path.join(out_dir, "e3_iterators.png"),
        "reservoir iterators", "per-event cost / misses",
        f"iterator sweep, cache capacity {cache_capacity}",
    )
    return results


def run_e4_scaling(workdir: str, out_dir: str, quick: bool = False,
                   node_counts=None, events_per_node: int | None = None) -> list[dict]:
    """Node scaling at fixed per-node offered load (share-nothing nodes:
    the critical path is the busiest node's measured work)."""
    from .model import StreamDecl
    from .runtime import Cluster, NodeConfig

    node_counts = node_counts or [1, 2, 4, 8]
    per_node = events_per_node or (4_000 if quick else 15_000)
    partitions = 24
    decl = StreamDecl(
        "payments", ("cardId",),
        (("cardId", "string"), ("merchantId", "string"), ("amount", "float64"),
         ("country", "string")),
    )
    results = []
    for k in node_counts:
        d = os.path.join(workdir, f"e4-{k}")
        if os.path.isdir(d):
            shutil.rmtree(d)
        cluster = Cluster(d, NodeConfig(
            processor_units=1, chunk_target_events=256,
            checkpoint_every_events=10 ** 9,
        ))
        for _ in range(k):
            cluster.add_node()
        cluster.create_stream(decl, partitions=partitions, replication=1)
        cluster.add_metric(
            "payments",
            "SELECT SUM(amount), COUNT(*), AVG(amount) FROM payments "
            "GROUP BY cardId RANGE 5 MINUTES",
        )
        cluster.run_until_idle()
        n = per_node * k
        fe = next(iter(cluster.nodes.values())).front_end
        reg = cluster.registrations["payments"]
        for unit in cluster.alive_units():
            unit.busy_ns = 0
        spec = DatasetSpec(n=n, seed=31 + k, rate=25_000.0, cards=20_000,
                           merchants=500, zipf_s=0.6)
        for event_id, ts, values in generate_rows(spec):
            fe.route_event(reg, event_id, ts, values)
        cluster.run_until_idle(max_steps=10 ** 7)
        node_busy = {}
        for node_id, node in cluster.nodes.items():
            node_busy[node_id] = sum(u.busy_ns for u in node.units) / 1e9
        makespan = max(node_busy.values())
        cluster.close()
        results.append({
            "nodes": k,
            "events": n,
            "per_node_events": per_node,
            "makespan_s": makespan,
            "throughput_eps": n / makespan if makespan else 0.0,
            "max_node_busy_s": makespan,
            "min_node_busy_s": min(node_busy.values()),
        })
    base = results[0]["throughput_eps"]
    for r in results:
        r["linear_fraction"] = (
            r["throughput_eps"] / (base * r["nodes"]) if base else 0.0
        )
    _write_experiment(out_dir, "e4_scaling", results)
    _plot_series(
        [r["nodes"] for r in results],
        {
            "throughput (ev/s)": [r["throughput_eps"] for r in results],
            "linear reference": [base * r["nodes"] for r in results],
        },
        os.path.join(out_dir, "e4_scaling.png"),
        "nodes", "sustained throughput (ev/s)", "node scaling", logy=False,
    )
    return results


def _write_experiment(out_dir: str, name: str, rows: list[dict]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    if not rows:
        return
    header = sorted({k for r in rows for k in r})
    body = [
        [_fmt(r.get(k, "")) for k in header]
        for r in rows
    ]
    write_csv(os.path.join(out_dir, f"{name}.csv"), header, body)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def run_paper_experiments(workdir: str, out_dir: str,
                          quick: bool = False) -> dict:
    """All four experiment shapes; returns {name: rows} and writes a bundle."""
    bundle = {
        "e1": run_e1_hopping_cost(workdir, out_dir, quick),
        "e2": run_e2_window_size(workdir, out_dir, quick),
        "e3": run_e3_iterators(workdir, out_dir, quick),
        "e4": run_e4_scaling(workdir, out_dir, quick),
    }
    with open(os.path.join(out_dir, "bundle.json"), "w", encoding="utf-8") as fh:
        json.dump(bundle, fh, indent=2, sort_keys=True)
    return bundle
