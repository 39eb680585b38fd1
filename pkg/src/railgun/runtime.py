"""Node composition: front-ends, processor units, task processors, recovery.

Every piece of coordination rides the in-process message log: events
flow through one topic per stream partitioner, operational requests
through a single-partition control topic consumed by every unit in
offset order, checkpoints through a dedicated checkpoint topic, and
replies through one topic per front-end.

Processor units are cooperatively scheduled: the cluster driver calls
``processor_tick`` in rounds (the paper-shape loop: apply operational
requests, poll active tasks, poll replicas, dispatch to task
processors, reply for active messages only). Reservoir persistence and
prefetch still run on real background threads inside each reservoir.

A task processor owns one (topic, partition): its reservoir, its state
store and its plan. Share-nothing: two task processors never touch the
same files.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import time
from dataclasses import dataclass

from . import aggregation as agg
from .aggregation import StateStore, pack_cell, unpack_cell
from .assignment import (
    ClusterView,
    ProcessorInfo,
    RecoveryPlan,
    TaskDescriptor,
    assign,
    plan_recovery,
    view_after,
)
from .messaging import Broker, LogRecord, TopicSpec
from .model import (
    Event,
    EventSchema,
    MetricQuery,
    StreamDecl,
    parse_query,
    parse_stream_decl,
)
from .plan import TaskPlan
from .reservoir import Reservoir, ReservoirConfig

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")

CONTROL_TOPIC = "__control"
CHECKPOINT_TOPIC = "__checkpoints"
ACTIVE_GROUP = "railgun-active"


class RuntimeError_(RuntimeError):
    pass


class SimClock:
    """Manually advanced millisecond clock driving the whole cluster."""

    def __init__(self, start_ms: int = 0):
        self.now_ms = start_ms

    def __call__(self) -> int:
        return self.now_ms

    def now(self) -> int:
        return self.now_ms

    def advance(self, ms: int) -> int:
        self.now_ms += ms
        return self.now_ms


@dataclass
class NodeConfig:
    processor_units: int = 1
    partitions_hint: int = 4
    cache_capacity: int = 32
    chunk_target_events: int = 256
    file_seal_chunks: int = 64
    out_of_order: str = "rewrite"
    codec_id: int = 1  # zlib
    lateness_grace_ms: int = 0
    checkpoint_every_events: int = 10_000
    checkpoint_every_ms: int = 5_000
    session_timeout_ms: int = 3_000
    reply_timeout_ms: int = 1_000
    poll_batch: int = 256
    rebuild_threshold: int = agg.REBUILD_RETRACTIONS

    def reservoir_config(self) -> ReservoirConfig:
        return ReservoirConfig(
            chunk_target_events=self.chunk_target_events,
            file_seal_chunks=self.file_seal_chunks,
            cache_capacity=self.cache_capacity,
            out_of_order=self.out_of_order,
            codec_id=self.codec_id,
            lateness_grace_ms=self.lateness_grace_ms,
        )

    @staticmethod
    def from_file(path: str) -> "NodeConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return NodeConfig(**raw)


@dataclass
class StreamRegistration:
    decl: StreamDecl
    partitions: int
    replication: int

    @property
    def name(self) -> str:
        return self.decl.name

    def topics(self) -> list[str]:
        return [f"{self.decl.name}.{p}" for p in self.decl.partitioners]

    def topic_for(self, partitioner: str) -> str:
        return f"{self.decl.name}.{partitioner}"

    def schema(self) -> EventSchema:
        return self.decl.schema(0)


# --------------------------------------------------------------------------
# Wire formats
# --------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U16.pack(len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = _U16.unpack_from(buf, off)
    off += 2
    return buf[off : off + n].decode("utf-8"), off + n


def encode_event_envelope(reply_topic: str, stream: str, event_id: str,
                          ts: int, values: tuple) -> bytes:
    out = [_pack_str(reply_topic), _pack_str(stream), _pack_str(event_id),
           _I64.pack(ts), _U8.pack(len(values))]
    out.extend(pack_cell(v) for v in values)
    return b"".join(out)


def decode_event_envelope(buf: bytes):
    reply_topic, off = _unpack_str(buf, 0)
    stream, off = _unpack_str(buf, off)
    event_id, off = _unpack_str(buf, off)
    (ts,) = _I64.unpack_from(buf, off)
    off += 8
    (n,) = _U8.unpack_from(buf, off)
    off += 1
    values = []
    for _ in range(n):
        v, off = unpack_cell(buf, off)
        values.append(v)
    return reply_topic, stream, event_id, ts, tuple(values)


def encode_reply(event_id: str, entries) -> bytes:
    """Reply payload: event id, then (metric name, group key, value-or-absent).

    Values travel as f64; an absent aggregate (empty min/max/stddev) is a
    zero tag with no payload.
    """
    out = [_pack_str(event_id), _U32.pack(len(entries))]
    for metric, group_key, value in entries:
        out.append(_pack_str(metric))
        out.append(_U8.pack(len(group_key)))
        out.extend(pack_cell(v) for v in group_key)
        if value is None:
            out.append(_U8.pack(0))
        else:
            out.append(_U8.pack(1))
            out.append(struct.pack("<d", float(value)))
    return b"".join(out)


def decode_reply(buf: bytes):
    event_id, off = _unpack_str(buf, 0)
    (n,) = _U32.unpack_from(buf, off)
    off += 4
    entries = []
    for _ in range(n):
        metric, off = _unpack_str(buf, off)
        (kn,) = _U8.unpack_from(buf, off)
        off += 1
        key = []
        for _ in range(kn):
            v, off = unpack_cell(buf, off)
            key.append(v)
        (tag,) = _U8.unpack_from(buf, off)
        off += 1
        if tag == 1:
            (value,) = struct.unpack_from("<d", buf, off)
            off += 8
        else:
            value = None
        entries.append((metric, tuple(key), value))
    return event_id, entries


@dataclass
class ClientResponse:
    event_id: str
    results: list  # (metric, group_key, value | None)
    status: str    # complete | partial | error


# --------------------------------------------------------------------------
# Task processor
# --------------------------------------------------------------------------


class TaskProcessor:
    """All metrics of one (topic, partition): reservoir + state store + plan."""

    def __init__(self, base_dir: str, topic: str, partition: int, role: str,
                 registration: StreamRegistration, config: NodeConfig,
                 clock: SimClock, recover_to: int | None = None):
        self.topic = topic
        self.partition = partition
        self.role = role
        self.registration = registration
        self.config = config
        self.clock = clock
        self.directory = base_dir
        self.reservoir = Reservoir(
            os.path.join(base_dir, "reservoir"), config.reservoir_config()
        )
        if len(self.reservoir.registry) == 0:
            self.reservoir.register_schema(registration.decl.fields)
        self.schema = self.reservoir.registry.get(0)
        self.store = StateStore(os.path.join(base_dir, "state"))
        self.plan = TaskPlan(
            self.reservoir, self.store, self.schema,
            partitioner=self._partitioner_of(topic),
            rebuild_threshold=config.rebuild_threshold,
        )
        self.last_offset = -1
        self.checkpoint_id = max(self.reservoir.last_checkpoint_id,
                                 self.store.checkpoint_id)
        self.control_offset = -1
        if getattr(self.reservoir, "recovered_source_offset", None) is not None:
            self.last_offset = self.reservoir.recovered_source_offset
        self.events_since_checkpoint = 0
        self.last_checkpoint_at = clock.now()

    @staticmethod
    def _partitioner_of(topic: str) -> str:
        return topic.rsplit(".", 1)[1]

    def apply_metric(self, q: MetricQuery, control_offset: int) -> None:
        structural_only = control_offset <= self.control_offset
        if q.name in self.plan.queries:
            return
        self.plan.add_metric(q, backfill=not structural_only)
        self.plan._update_retention()

    def remove_metric(self, name: str, control_offset: int) -> None:
        if name in self.plan.queries:
            self.plan.remove_metric(name)

    def note_control_offset(self, offset: int) -> None:
        self.control_offset = max(self.control_offset, offset)

    def process_record(self, record: LogRecord):
        reply_topic, stream, event_id, ts, values = decode_event_envelope(
            record.payload
        )
        event = Event(id=event_id, ts=ts, schema_id=0, values=values)
        outcome = self.reservoir.append(event)
        if outcome.stored:
            results = self.plan.process_event(event)
        else:
            # duplicate or discarded: state untouched, reply re-derived
            results = self.plan.current_results(event)
        self.last_offset = record.offset
        self.events_since_checkpoint += 1
        return reply_topic, event_id, results

    def checkpoint_due(self, now_ms: int) -> bool:
        if self.events_since_checkpoint >= self.config.checkpoint_every_events:
            return True
        return (
            self.events_since_checkpoint > 0
            and now_ms - self.last_checkpoint_at >= self.config.checkpoint_every_ms
        )

    def checkpoint(self, now_ms: int) -> int:
        self.checkpoint_id += 1
        self.reservoir.checkpoint(self.checkpoint_id, self.last_offset)
        self.store.checkpoint(self.checkpoint_id)
        self.events_since_checkpoint = 0
        self.last_checkpoint_at = now_ms
        return self.checkpoint_id

    def state_digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.reservoir.frontier).encode())
        h.update(str(self.last_offset).encode())
        h.update(self.store.content_digest())
        return h.hexdigest()

    def close(self, flush: bool = True) -> None:
        if flush:
            self.reservoir.close()
        else:
            self.reservoir.crash()


# --------------------------------------------------------------------------
# Processor unit
# --------------------------------------------------------------------------


class ProcessorUnit:
    def __init__(self, cluster: "Cluster", node_id: str, unit_id: str):
        self.cluster = cluster
        self.node_id = node_id
        self.unit_id = unit_id
        self.config = cluster.config
        self.base_dir = os.path.join(cluster.directory, "units", unit_id.replace("/", "_"))
        broker = cluster.broker
        self.active_consumer = broker.consumer(
            ACTIVE_GROUP, consumer_id=unit_id, node_id=node_id
        )
        self.replica_consumer = broker.consumer(
            f"replica-{unit_id}", consumer_id=f"{unit_id}-r", node_id=node_id
        )
        self.control_consumer = broker.consumer(
            f"ctl-{unit_id}", consumer_id=f"{unit_id}-c", node_id=node_id
        )
        self.control_consumer.subscribe([CONTROL_TOPIC])
        self.tasks: dict[tuple[str, int], TaskProcessor] = {}
        self.registrations: dict[str, StreamRegistration] = {}
        self.control_log: list[tuple[int, dict]] = []
        self.failed = False
        self.busy_ns = 0
        self.subscribed: set[str] = set()
        self.active_consumer.subscribe(
            set(), on_rebalance=self._on_active_rebalance
        )

    # -- membership/rebalance ----------------------------------------------------

    def _on_active_rebalance(self, event, revoked, gained) -> None:
        for tp in sorted(revoked):
            self._retire(tp, role="active")
        for tp in sorted(gained):
            self._ensure_task(tp, role="active")

    def apply_replica_set(self, partitions) -> None:
        current = {tp for tp, t in self.tasks.items() if t.role == "replica"}
        target = set(partitions)
        self.replica_consumer.assign(sorted(target))
        for tp in sorted(current - target):
            self._retire(tp, role="replica")
        for tp in sorted(target - current):
            self._ensure_task(tp, role="replica")

    def _retire(self, tp, role: str) -> None:
        task = self.tasks.get(tp)
        if task is None:
            return
        still = self.cluster.role_of(tp, self.unit_id)
        if role == "active" and still == "replica":
            task.role = "replica"  # demoted; replica consumer takes over
            return
        if role == "replica" and still == "active":
            return  # promoted meanwhile
        task.close(flush=not self.failed)
        del self.tasks[tp]

    def _ensure_task(self, tp, role: str) -> None:
        topic, partition = tp
        consumer = self.active_consumer if role == "active" else self.replica_consumer
        task = self.tasks.get(tp)
        if task is not None:
            if role == "active" and task.role != "active":
                task.role = "active"  # promotion: continue from own position
                consumer.seek(topic, partition, task.last_offset + 1)
                self.cluster.note_transfer(
                    tp, self.unit_id,
                    RecoveryPlan(TaskDescriptor(*tp), self.unit_id, None, "none"),
                    0,
                )
            elif role == "active":
                consumer.seek(topic, partition, task.last_offset + 1)
            return
        reg = self._registration_for_topic(topic)
        if reg is None:
            return
        plan = self.cluster.recovery_for(tp, self.unit_id)
        task_dir = os.path.join(self.base_dir, f"{topic}-p{partition}")
        transferred = self.cluster.execute_recovery(plan, task_dir)
        task = TaskProcessor(
            task_dir, topic, partition, role, reg, self.config,
            self.cluster.clock,
        )
        ckpt_info = self.cluster.checkpoint_record_for(tp, self.unit_id, plan)
        if ckpt_info is not None:
            task.control_offset = ckpt_info.get("control_offset", -1)
            task.checkpoint_id = max(task.checkpoint_id,
                                     ckpt_info.get("checkpoint_id", -1))
        self.tasks[tp] = task
        self._replay_control_into(task)
        consumer.seek(topic, partition, task.last_offset + 1)
        self.cluster.note_transfer(tp, self.unit_id, plan, transferred)

    def _registration_for_topic(self, topic: str):
        for reg in self.registrations.values():
            if topic in reg.topics():
                return reg
        return None

    def _replay_control_into(self, task: TaskProcessor) -> None:
        for offset, op in self.control_log:
            self._apply_op_to_task(task, offset, op)

    # -- control plane --------------------------------------------------------------

    def _apply_control(self, offset: int, op: dict) -> None:
        kind = op["kind"]
        if kind == "create_stream":
            decl = parse_stream_decl(op["decl"])
            reg = StreamRegistration(decl, op["partitions"], op["replication"])
            self.registrations[decl.name] = reg
            self._resubscribe(self.subscribed | set(reg.topics()))
        elif kind == "delete_stream":
            reg = self.registrations.pop(op["stream"], None)
            if reg is not None:
                self._resubscribe(self.subscribed - set(reg.topics()))
                for tp in list(self.tasks):
                    if tp[0] in reg.topics():
                        self._retire_stream_task(tp)
        elif kind == "add_partitioner":
            reg = self.registrations.get(op["stream"])
            if reg is not None:
                decl = reg.decl
                if op["field"] not in decl.partitioners:
                    new_decl = StreamDecl(
                        decl.name,
                        decl.partitioners + (op["field"],),
                        decl.fields,
                    )
                    self.registrations[decl.name] = StreamRegistration(
                        new_decl, reg.partitions, reg.replication
                    )
                self._resubscribe(
                    self.subscribed | {f"{op['stream']}.{op['field']}"}
                )
        self.control_log.append((offset, op))
        for task in list(self.tasks.values()):
            self._apply_op_to_task(task, offset, op)

    def _resubscribe(self, topics: set) -> None:
        # an unchanged set must not re-join: the resulting no-op rebalance
        # would roll the cluster view before pending recoveries compute
        if topics == self.subscribed:
            return
        self.subscribed = set(topics)
        self.active_consumer.subscribe(
            sorted(self.subscribed), on_rebalance=self._on_active_rebalance
        )

    def _retire_stream_task(self, tp) -> None:
        task = self.tasks.pop(tp, None)
        if task is not None:
            task.close()

    def _apply_op_to_task(self, task: TaskProcessor, offset: int, op: dict) -> None:
        kind = op["kind"]
        if kind == "add_metric" and op["stream"] == task.registration.name:
            parsed = parse_query(op["query"], task.schema)
            for q in parsed.metrics:
                if q.partitioner == task._partitioner_of(task.topic):
                    name = op.get("name_prefix", "")
                    metric = q if not name else MetricQuery(
                        f"{name}{q.name}", q.aggregator, q.field, q.group_by,
                        q.window, q.filter,
                    )
                    task.apply_metric(metric, offset)
        elif kind == "remove_metric" and op["stream"] == task.registration.name:
            task.remove_metric(op["name"], offset)
        task.note_control_offset(offset)

    # -- the logical loop --------------------------------------------------------------

    def processor_tick(self) -> int:
        """One pass: operational requests, active poll, replica poll, dispatch."""
        if self.failed:
            return 0
        t0 = time.perf_counter_ns()
        for _, _, rec in self.control_consumer.poll(64):
            self._apply_control(rec.offset, json.loads(rec.payload.decode()))
        processed = 0
        for consumer, is_active in (
            (self.active_consumer, True),
            (self.replica_consumer, False),
        ):
            records = consumer.poll(self.config.poll_batch)
            for topic, partition, rec in records:
                tp = (topic, partition)
                task = self.tasks.get(tp)
                if task is None:
                    self._ensure_task(tp, "active" if is_active else "replica")
                    task = self.tasks.get(tp)
                    if task is None:
                        continue
                if rec.offset <= task.last_offset and not is_active:
                    continue
                r0 = time.perf_counter_ns()
                reply_topic, event_id, results = task.process_record(rec)
                if is_active:
                    self.cluster.broker.publish(
                        reply_topic, topic.encode(),
                        encode_reply(event_id, results),
                    )
                dt = time.perf_counter_ns() - r0
                self.cluster.observe_record(self, topic, partition, dt, is_active)
                processed += 1
        now = self.cluster.clock.now()
        for tp, task in self.tasks.items():
            if task.checkpoint_due(now):
                self._checkpoint_task(tp, task)
        if processed:
            # idle polls are a co-simulation artifact (real nodes poll
            # independently); capacity accounting charges productive ticks
            self.busy_ns += time.perf_counter_ns() - t0
        return processed

    def _checkpoint_task(self, tp, task: TaskProcessor) -> None:
        cid = task.checkpoint(self.cluster.clock.now())
        group = ACTIVE_GROUP if task.role == "active" else self.replica_consumer.group
        self.cluster.broker.commit(group, tp[0], tp[1], task.last_offset + 1)
        record = {
            "topic": tp[0], "partition": tp[1], "processor": self.unit_id,
            "checkpoint_id": cid, "offset": task.last_offset,
            "control_offset": task.control_offset,
        }
        self.cluster.broker.publish(
            CHECKPOINT_TOPIC, self.unit_id.encode(), json.dumps(record).encode()
        )

    def checkpoint_all(self) -> None:
        for tp, task in list(self.tasks.items()):
            if task.events_since_checkpoint > 0:
                self._checkpoint_task(tp, task)

    def fail(self) -> None:
        self.failed = True
        self.active_consumer.pause_heartbeats()
        self.replica_consumer.pause_heartbeats()
        self.control_consumer.pause_heartbeats()
        for task in self.tasks.values():
            task.close(flush=False)
        self.tasks.clear()

    def shutdown(self) -> None:
        for task in self.tasks.values():
            task.close()
        self.tasks.clear()


# --------------------------------------------------------------------------
# Front-end
# --------------------------------------------------------------------------


class FrontEnd:
    """Client entry point: routes events to partitioner topics and merges
    the per-topic replies into one response."""

    def __init__(self, cluster: "Cluster", fe_id: str):
        self.cluster = cluster
        self.fe_id = fe_id
        self.reply_topic = f"__reply.{fe_id}"
        cluster.broker.create_topic(TopicSpec(self.reply_topic, 1))
        self.consumer = cluster.broker.consumer(
            f"fe-{fe_id}", consumer_id=f"fe-{fe_id}"
        )
        self.consumer.subscribe([self.reply_topic])
        self.pending: dict[str, dict] = {}
        self.responses: dict[str, ClientResponse] = {}
        self.failed = False

    def route_event(self, reg: StreamRegistration, event_id: str, ts: int,
                    values: tuple) -> list[tuple[str, int, int]]:
        schema = reg.schema()
        schema.check_values(tuple(values))
        payload = encode_event_envelope(
            self.reply_topic, reg.name, event_id, ts, tuple(values)
        )
        placements = []
        for partitioner in reg.decl.partitioners:
            idx = schema.index_of(partitioner)
            value = values[idx]
            if value is None:
                raise RuntimeError_(f"missing partitioner value {partitioner!r}")
            topic = reg.topic_for(partitioner)
            partition, offset = self.cluster.broker.publish(
                topic, pack_cell(value), payload
            )
            placements.append((topic, partition, offset))
        self.pending[event_id] = {
            "expected": len(placements),
            "seen": set(),
            "entries": [],
            "deadline": self.cluster.clock.now() + self.cluster.config.reply_timeout_ms,
        }
        return placements

    def poll_replies(self) -> None:
        if self.failed:
            return
        for _, _, rec in self.consumer.poll(1024):
            event_id, entries = decode_reply(rec.payload)
            st = self.pending.get(event_id)
            if st is None:
                continue  # duplicate after completion, or expired
            source = bytes(rec.key)
            if source in st["seen"]:
                continue  # idempotent re-emission after a rebalance replay
            st["seen"].add(source)
            st["entries"].extend(entries)
            if len(st["seen"]) >= st["expected"]:
                self.responses[event_id] = ClientResponse(
                    event_id, st["entries"], "complete"
                )
                del self.pending[event_id]

    def expire(self, now: int) -> None:
        for event_id in [e for e, st in self.pending.items()
                         if now > st["deadline"]]:
            st = self.pending.pop(event_id)
            self.responses[event_id] = ClientResponse(
                event_id, st["entries"], "partial"
            )

    def take_response(self, event_id: str) -> ClientResponse | None:
        return self.responses.pop(event_id, None)

    def fail(self) -> None:
        self.failed = True
        self.consumer.pause_heartbeats()


@dataclass
class Node:
    node_id: str
    front_end: FrontEnd
    units: list


# --------------------------------------------------------------------------
# Cluster
# --------------------------------------------------------------------------


class Cluster:
    """In-process cluster of simulated nodes over one broker and one clock."""

    def __init__(self, directory: str, config: NodeConfig | None = None,
                 clock: SimClock | None = None):
        self.directory = directory
        self.config = config or NodeConfig()
        self.clock = clock or SimClock()
        os.makedirs(directory, exist_ok=True)
        self.broker = Broker(
            os.path.join(directory, "broker"),
            clock=self.clock,
            session_timeout_ms=self.config.session_timeout_ms,
        )
        self.broker.create_topic(TopicSpec(CONTROL_TOPIC, 1))
        self.broker.create_topic(TopicSpec(CHECKPOINT_TOPIC, 1))
        self.broker.set_group_strategy(ACTIVE_GROUP, self._strategy)
        self._ckpt_consumer = self.broker.consumer(
            "__coordinator", consumer_id="__coordinator"
        )
        self._ckpt_consumer.subscribe([CHECKPOINT_TOPIC])
        self.nodes: dict[str, Node] = {}
        self.registrations: dict[str, StreamRegistration] = {}
        self.view = ClusterView(processors=(), replication=1)
        self.latest: tuple[ClusterView, object] | None = None
        self._replicas_dirty = False
        self.checkpoint_records: dict[tuple, dict] = {}
        self.transfers: list[dict] = []
        self.measure = False
        self.record_times_ns: list[int] = []
        self._unit_seq: dict[str, int] = {}

    # -- topology -------------------------------------------------------------

    def add_node(self, node_id: str | None = None,
                 units: int | None = None) -> Node:
        node_id = node_id or f"n{len(self.nodes):02d}"
        fe = FrontEnd(self, node_id)
        node = Node(node_id, fe, [])
        self.nodes[node_id] = node
        n_units = units if units is not None else self.config.processor_units
        for _ in range(n_units):
            self._add_unit(node)
        return node

    def _add_unit(self, node: Node) -> ProcessorUnit:
        seq = self._unit_seq.get(node.node_id, 0)
        self._unit_seq[node.node_id] = seq + 1
        unit_id = f"{node.node_id}/u{seq}"
        unit = ProcessorUnit(self, node.node_id, unit_id)
        for reg in self.registrations.values():
            unit.registrations[reg.name] = reg
            unit.subscribed |= set(reg.topics())
        if unit.subscribed:
            unit.active_consumer.subscribe(
                sorted(unit.subscribed), on_rebalance=unit._on_active_rebalance
            )
        node.units.append(unit)
        return unit

    def fail_node(self, node_id: str, evict: bool = True) -> None:
        node = self.nodes[node_id]
        for unit in node.units:
            unit.fail()
        node.front_end.fail()
        if evict:
            # survivors keep heartbeating through the simulated silence
            self.clock.advance(self.config.session_timeout_ms + 1)
            self._heartbeat_alive()
            self.broker.membership_tick()
            self._apply_replicas()

    def _heartbeat_alive(self) -> None:
        for unit in self.alive_units():
            unit.active_consumer.heartbeat()
            unit.replica_consumer.heartbeat()
            unit.control_consumer.heartbeat()
        for node in self.nodes.values():
            if not node.front_end.failed:
                node.front_end.consumer.heartbeat()
        self._ckpt_consumer.heartbeat()

    def revive_node(self, node_id: str) -> Node:
        node = self.nodes[node_id]
        node.units = [u for u in node.units if not u.failed]
        if node.front_end.failed:
            node.front_end = FrontEnd(self, f"{node_id}r{self._unit_seq.get(node_id, 0)}")
        self._add_unit(node)
        return node

    def alive_units(self):
        for node in self.nodes.values():
            for unit in node.units:
                if not unit.failed:
                    yield unit

    def unit_by_id(self, unit_id: str) -> ProcessorUnit | None:
        for node in self.nodes.values():
            for unit in node.units:
                if unit.unit_id == unit_id:
                    return unit
        return None

    def task_processor_count(self) -> int:
        return sum(len(u.tasks) for u in self.alive_units())

    # -- assignment forwarding ---------------------------------------------------

    def _strategy(self, members, partitions):
        from dataclasses import replace

        procs = tuple(ProcessorInfo(m.consumer_id, m.node_id) for m in members)
        replication = max(
            (reg.replication for reg in self.registrations.values()), default=1
        )
        view = replace(self.view, processors=procs, replication=replication)
        tasks = [TaskDescriptor(t, p) for t, p in partitions]
        assignment = assign(view, tasks)
        self.latest = (view, assignment)
        self.view = view_after(view, assignment)
        self._replicas_dirty = True
        out = {m.consumer_id: set() for m in members}
        for task, pid in assignment.active.items():
            out[pid].add((task.topic, task.partition))
        return out

    def _apply_replicas(self) -> None:
        if not self._replicas_dirty or self.latest is None:
            return
        self._replicas_dirty = False
        _, assignment = self.latest
        per_unit: dict[str, set] = {}
        for task, pids in assignment.replicas.items():
            for pid in pids:
                per_unit.setdefault(pid, set()).add((task.topic, task.partition))
        for unit in list(self.alive_units()):
            unit.apply_replica_set(per_unit.get(unit.unit_id, set()))

    def role_of(self, tp, unit_id: str) -> str | None:
        if self.latest is None:
            return None
        _, assignment = self.latest
        task = TaskDescriptor(*tp)
        if assignment.active.get(task) == unit_id:
            return "active"
        if unit_id in assignment.replicas.get(task, ()):
            return "replica"
        return None

    def recovery_for(self, tp, unit_id: str) -> RecoveryPlan:
        task = TaskDescriptor(*tp)
        if self.latest is None:
            return RecoveryPlan(task, unit_id, None, "full")
        view, _ = self.latest
        return plan_recovery(task, unit_id, view)

    def _task_dir(self, unit_id: str, tp) -> str:
        return os.path.join(
            self.directory, "units", unit_id.replace("/", "_"),
            f"{tp[0]}-p{tp[1]}",
        )

    def execute_recovery(self, plan: RecoveryPlan, dest_dir: str) -> int:
        """Move the data a recovery plan calls for; returns bytes copied."""
        if plan.mode == "none":
            return 0
        task_tp = (plan.task.topic, plan.task.partition)
        if plan.source is None:
            # full replay from the log: start from a clean slate
            if plan.mode == "full" and os.path.isdir(dest_dir):
                shutil.rmtree(dest_dir)
            return 0
        src_dir = self._task_dir(plan.source, task_tp)
        if not os.path.isdir(src_dir):
            if os.path.isdir(dest_dir):
                shutil.rmtree(dest_dir)
            return 0
        src_unit = self.unit_by_id(plan.source)
        if src_unit is not None and not src_unit.failed:
            task = src_unit.tasks.get(task_tp)
            if task is not None:
                task.reservoir.drain_persistence()
        moved = 0
        if plan.mode == "full":
            if os.path.isdir(dest_dir):
                shutil.rmtree(dest_dir)
            for sub in ("reservoir", "state"):
                src_sub = os.path.join(src_dir, sub)
                if not os.path.isdir(src_sub):
                    continue
                dst_sub = os.path.join(dest_dir, sub)
                os.makedirs(dst_sub, exist_ok=True)
                for name in sorted(os.listdir(src_sub)):
                    srcf = os.path.join(src_sub, name)
                    shutil.copy2(srcf, os.path.join(dst_sub, name))
                    moved += os.path.getsize(srcf)
        else:  # delta: only files the stale holder lacks or that grew
            for sub in ("reservoir", "state"):
                src_sub = os.path.join(src_dir, sub)
                if not os.path.isdir(src_sub):
                    continue
                dst_sub = os.path.join(dest_dir, sub)
                os.makedirs(dst_sub, exist_ok=True)
                for name in sorted(os.listdir(src_sub)):
                    srcf = os.path.join(src_sub, name)
                    dstf = os.path.join(dst_sub, name)
                    if (
                        not os.path.exists(dstf)
                        or os.path.getsize(dstf) != os.path.getsize(srcf)
                    ):
                        shutil.copy2(srcf, dstf)
                        moved += os.path.getsize(srcf)
            # drop local files the source no longer has (post-checkpoint noise)
            for sub in ("reservoir", "state"):
                src_sub = os.path.join(src_dir, sub)
                dst_sub = os.path.join(dest_dir, sub)
                if not os.path.isdir(dst_sub) or not os.path.isdir(src_sub):
                    continue
                src_names = set(os.listdir(src_sub))
                for name in os.listdir(dst_sub):
                    if name not in src_names:
                        os.remove(os.path.join(dst_sub, name))
        return moved

    def checkpoint_record_for(self, tp, unit_id: str,
                              plan: RecoveryPlan) -> dict | None:
        if plan.mode == "none" or plan.source is None:
            return self.checkpoint_records.get((tp[0], tp[1], unit_id))
        return self.checkpoint_records.get((tp[0], tp[1], plan.source))

    def note_transfer(self, tp, unit_id: str, plan: RecoveryPlan,
                      transferred: int) -> None:
        self.transfers.append({
            "task": tp, "destination": unit_id, "mode": plan.mode,
            "source": plan.source, "bytes": transferred,
            "since_checkpoint": plan.since_checkpoint,
        })

    def _poll_checkpoints(self) -> None:
        for _, _, rec in self._ckpt_consumer.poll(1024):
            info = json.loads(rec.payload.decode())
            key = (info["topic"], info["partition"], info["processor"])
            self.checkpoint_records[key] = info
            task = TaskDescriptor(info["topic"], info["partition"])
            self.view.holder_checkpoints[(task, info["processor"])] = (
                info["checkpoint_id"]
            )

    def observe_record(self, unit: ProcessorUnit, topic: str, partition: int,
                       duration_ns: int, is_active: bool) -> None:
        if self.measure and is_active:
            self.record_times_ns.append(duration_ns)

    # -- control plane ----------------------------------------------------------

    def _publish_control(self, op: dict) -> None:
        self.broker.publish(CONTROL_TOPIC, b"", json.dumps(op).encode())

    def create_stream(self, decl: StreamDecl | str, partitions: int,
                      replication: int = 1) -> StreamRegistration:
        if isinstance(decl, str):
            decl = parse_stream_decl(decl)
        reg = StreamRegistration(decl, partitions, replication)
        for topic in reg.topics():
            self.broker.create_topic(TopicSpec(topic, partitions))
        self.registrations[decl.name] = reg
        from .model import render_stream_decl

        self._publish_control({
            "kind": "create_stream",
            "decl": render_stream_decl(decl),
            "partitions": partitions,
            "replication": replication,
        })
        return reg

    def delete_stream(self, name: str) -> None:
        self.registrations.pop(name, None)
        self._publish_control({"kind": "delete_stream", "stream": name})

    def add_metric(self, stream: str, query_text: str) -> None:
        reg = self.registrations[stream]
        parse_query(query_text, reg.schema())  # fail fast at the front-end
        self._publish_control(
            {"kind": "add_metric", "stream": stream, "query": query_text}
        )

    def remove_metric(self, stream: str, name: str) -> None:
        self._publish_control(
            {"kind": "remove_metric", "stream": stream, "name": name}
        )

    def add_partitioner(self, stream: str, fld: str) -> None:
        reg = self.registrations[stream]
        decl = reg.decl
        if fld not in decl.partitioners:
            new_decl = StreamDecl(decl.name, decl.partitioners + (fld,),
                                  decl.fields)
            self.registrations[stream] = StreamRegistration(
                new_decl, reg.partitions, reg.replication
            )
        self.broker.create_topic(TopicSpec(f"{stream}.{fld}", reg.partitions))
        self._publish_control(
            {"kind": "add_partitioner", "stream": stream, "field": fld}
        )

    # -- driving ---------------------------------------------------------------

    def step(self, advance_ms: int = 1) -> int:
        self.broker.membership_tick()
        self._apply_replicas()
        processed = 0
        for unit in list(self.alive_units()):
            processed += unit.processor_tick()
        self._apply_replicas()
        self._poll_checkpoints()
        for node in self.nodes.values():
            node.front_end.poll_replies()
            node.front_end.expire(self.clock.now())
        if advance_ms:
            self.clock.advance(advance_ms)
        return processed

    def run_until_idle(self, max_steps: int = 10_000) -> int:
        total = 0
        idle = 0
        for _ in range(max_steps):
            n = self.step(advance_ms=0)
            total += n
            idle = idle + 1 if n == 0 else 0
            if idle >= 2:
                break
        return total

    def collect(self, front_end: FrontEnd, event_id: str,
                timeout_steps: int = 10_000) -> ClientResponse:
        """Drive the cluster until the routed event's replies merge into a
        response; partial after the front-end's reply deadline."""
        for _ in range(timeout_steps):
            resp = front_end.take_response(event_id)
            if resp is not None:
                return resp
            self.step()
        front_end.expire(self.clock.now() + self.config.reply_timeout_ms + 1)
        resp = front_end.take_response(event_id)
        return resp or ClientResponse(event_id, [], "error")

    def submit(self, stream: str, event_id: str, ts: int, values: tuple,
               front_end: FrontEnd | None = None,
               timeout_steps: int = 10_000) -> ClientResponse:
        fe = front_end or next(
            node.front_end for node in self.nodes.values()
            if not node.front_end.failed
        )
        reg = self.registrations[stream]
        fe.route_event(reg, event_id, ts, values)
        return self.collect(fe, event_id, timeout_steps)

    def checkpoint_all(self) -> None:
        for unit in self.alive_units():
            unit.checkpoint_all()
        self._poll_checkpoints()

    def close(self) -> None:
        for node in self.nodes.values():
            for unit in node.units:
                if not unit.failed:
                    unit.shutdown()
        self.broker.close()
