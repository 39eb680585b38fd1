"""In-process partitioned message log with consumer groups.

One durable append-only segment file per partition (frame layout:
offset i64, key_len u32, key, payload_len u32, payload, crc32). Producers
route by a stable 64-bit FNV-1a hash of the record key, so placement is
reproducible across runs. Consumers pull: each poll returns records past
the consumer's per-partition positions and doubles as a heartbeat.

Within a consumer group every (topic, partition) belongs to exactly one
member per generation; membership changes bump the generation and re-run
the group's assignment strategy (pluggable, used by the sticky task
assignor). Replica consumers elsewhere use manual assignment with their
own group ids, so several of them can read the same partition in
identical order.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass, field

_I64 = struct.Struct("<q")
_U32 = struct.Struct("<I")

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


class MessagingError(RuntimeError):
    pass


class UnknownTopic(MessagingError):
    pass


class OffsetOutOfRange(MessagingError):
    pass


@dataclass(frozen=True)
class TopicSpec:
    name: str
    partitions: int
    retention_ms: int | None = None  # None: unbounded

    def __post_init__(self):
        if self.partitions <= 0:
            raise MessagingError("partitions must be > 0")


@dataclass
class LogRecord:
    offset: int
    key: bytes
    payload: bytes
    append_ts: int


@dataclass
class RebalanceEvent:
    generation: int
    members: list[tuple[str, str | None, dict]]  # (consumer id, node id, metadata)
    trigger: str  # join | leave | failure | topic-change


@dataclass
class MemberInfo:
    consumer_id: str
    node_id: str | None
    metadata: dict


class PartitionLog:
    def __init__(self, path: str):
        self.path = path
        self.records: list[LogRecord] = []
        self._fh = None
        if os.path.exists(path):
            self._load()
        self._fh = open(path, "ab")

    def _load(self) -> None:
        with open(self.path, "rb") as fh:
            blob = fh.read()
        off = 0
        while off < len(blob):
            start = off
            if off + 12 > len(blob):
                break  # torn tail
            (offset,) = _I64.unpack_from(blob, off)
            off += 8
            (klen,) = _U32.unpack_from(blob, off)
            off += 4
            key = blob[off : off + klen]
            off += klen
            if off + 4 > len(blob):
                break
            (plen,) = _U32.unpack_from(blob, off)
            off += 4
            payload = blob[off : off + plen]
            off += plen
            if off + 4 > len(blob):
                break
            (crc,) = _U32.unpack_from(blob, off)
            off += 4
            if zlib.crc32(blob[start : off - 4]) != crc:
                break
            self.records.append(LogRecord(offset, key, payload, 0))
        if off < len(blob):
            with open(self.path, "r+b") as fh:
                fh.truncate(off if off <= len(blob) else len(blob))

    def append(self, key: bytes, payload: bytes, append_ts: int) -> int:
        offset = len(self.records)
        frame = (
            _I64.pack(offset)
            + _U32.pack(len(key))
            + key
            + _U32.pack(len(payload))
            + payload
        )
        frame += _U32.pack(zlib.crc32(frame))
        self._fh.write(frame)
        self._fh.flush()
        self.records.append(LogRecord(offset, key, payload, append_ts))
        return offset

    @property
    def end_offset(self) -> int:
        return len(self.records)

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


class ConsumerHandle:
    def __init__(self, broker: "Broker", group: str, consumer_id: str,
                 node_id: str | None, metadata: dict | None):
        self.broker = broker
        self.group = group
        self.consumer_id = consumer_id
        self.node_id = node_id
        self.metadata = metadata or {}
        self.subscriptions: set[str] = set()
        self.assigned: set[tuple[str, int]] = set()
        self.acked_assigned: set[tuple[str, int]] = set()
        self.manual = False
        self.positions: dict[tuple[str, int], int] = {}
        self.last_heartbeat = broker.clock()
        self.on_rebalance = None  # fn(event, revoked, assigned)
        self.pending_rebalance: RebalanceEvent | None = None
        self.closed = False

    def subscribe(self, topics, on_rebalance=None) -> None:
        self.broker.subscribe(self, set(topics), on_rebalance)

    def assign(self, partitions) -> None:
        self.broker.assign_manual(self, set(partitions))

    def poll(self, max_records: int = 256):
        return self.broker.poll(self, max_records)

    def seek(self, topic: str, partition: int, offset: int) -> None:
        self.broker.seek(self, topic, partition, offset)

    def commit(self, topic: str, partition: int, next_offset: int) -> None:
        self.broker.commit(self.group, topic, partition, next_offset)

    def committed(self, topic: str, partition: int) -> int | None:
        return self.broker.committed(self.group, topic, partition)

    def heartbeat(self) -> None:
        self.last_heartbeat = self.broker.clock()

    def pause_heartbeats(self) -> None:
        """Failure injection: the consumer stays registered but goes silent."""
        self.closed = True

    def close(self) -> None:
        if not self.closed:
            self.closed = True
        self.broker.leave(self)


@dataclass
class GroupState:
    name: str
    generation: int = 0
    members: dict[str, ConsumerHandle] = field(default_factory=dict)
    assignment: dict[tuple[str, int], str] = field(default_factory=dict)
    strategy: object | None = None


class Broker:
    """Single in-process broker over durable per-partition segment files."""

    def __init__(self, data_dir: str, clock=None, session_timeout_ms: int = 3000):
        self.data_dir = data_dir
        self.clock = clock or (lambda: 0)
        self.session_timeout_ms = session_timeout_ms
        os.makedirs(os.path.join(data_dir, "segments"), exist_ok=True)
        self._lock = threading.RLock()
        self.topics: dict[str, TopicSpec] = {}
        self.partitions: dict[tuple[str, int], PartitionLog] = {}
        self.groups: dict[str, GroupState] = {}
        self._offsets: dict[tuple[str, str, int], int] = {}
        self._offsets_path = os.path.join(data_dir, "offsets.tsv")
        self._next_consumer = 0
        self._load_offsets()
        self._load_topics()

    # -- topics -----------------------------------------------------------------

    def _topic_meta_path(self) -> str:
        return os.path.join(self.data_dir, "topics.tsv")

    def _load_topics(self) -> None:
        path = self._topic_meta_path()
        if not os.path.exists(path):
            return
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.strip().split("\t")
                if len(parts) < 2:
                    continue
                name, n = parts[0], int(parts[1])
                retention = int(parts[2]) if len(parts) > 2 and parts[2] != "-" else None
                if name not in self.topics:
                    self._materialize_topic(TopicSpec(name, n, retention))

    def _materialize_topic(self, spec: TopicSpec) -> None:
        self.topics[spec.name] = spec
        for p in range(spec.partitions):
            path = os.path.join(self.data_dir, "segments", f"{spec.name}-p{p}.log")
            self.partitions[(spec.name, p)] = PartitionLog(path)

    def create_topic(self, spec: TopicSpec) -> None:
        with self._lock:
            if spec.name in self.topics:
                existing = self.topics[spec.name]
                if existing.partitions != spec.partitions:
                    raise MessagingError(
                        f"topic {spec.name} exists with {existing.partitions} partitions"
                    )
                return
            self._materialize_topic(spec)
            with open(self._topic_meta_path(), "a", encoding="utf-8") as fh:
                retention = "-" if spec.retention_ms is None else str(spec.retention_ms)
                fh.write(f"{spec.name}\t{spec.partitions}\t{retention}\n")
            self._rebalance_groups_subscribed(spec.name, "topic-change")

    def topic_exists(self, name: str) -> bool:
        return name in self.topics

    def partitions_of(self, name: str) -> list[tuple[str, int]]:
        spec = self.topics.get(name)
        if spec is None:
            raise UnknownTopic(name)
        return [(name, p) for p in range(spec.partitions)]

    # -- produce ------------------------------------------------------------------

    def publish(self, topic: str, key: bytes, payload: bytes) -> tuple[int, int]:
        with self._lock:
            spec = self.topics.get(topic)
            if spec is None:
                raise UnknownTopic(topic)
            partition = fnv1a64(key) % spec.partitions
            log = self.partitions[(topic, partition)]
            offset = log.append(key, payload, self.clock())
            return partition, offset

    def end_offset(self, topic: str, partition: int) -> int:
        return self.partitions[(topic, partition)].end_offset

    # -- consumers ------------------------------------------------------------------

    def consumer(self, group: str, consumer_id: str | None = None,
                 node_id: str | None = None, metadata: dict | None = None
                 ) -> ConsumerHandle:
        with self._lock:
            if consumer_id is None:
                consumer_id = f"c{self._next_consumer:05d}"
                self._next_consumer += 1
            return ConsumerHandle(self, group, consumer_id, node_id, metadata)

    def set_group_strategy(self, group: str, strategy) -> None:
        with self._lock:
            self._group(group).strategy = strategy

    def _group(self, name: str) -> GroupState:
        if name not in self.groups:
            self.groups[name] = GroupState(name=name)
        return self.groups[name]

    def group_coordinator(self, group: str) -> str | None:
        g = self.groups.get(group)
        if not g or not g.members:
            return None
        return min(g.members)

    def subscribe(self, consumer: ConsumerHandle, topics: set[str],
                  on_rebalance) -> None:
        with self._lock:
            consumer.subscriptions = topics
            consumer.on_rebalance = on_rebalance
            consumer.manual = False
            g = self._group(consumer.group)
            is_new = consumer.consumer_id not in g.members
            g.members[consumer.consumer_id] = consumer
            self._rebalance(g, "join" if is_new else "topic-change")

    def assign_manual(self, consumer: ConsumerHandle, partitions) -> None:
        with self._lock:
            for tp in partitions:
                if tp not in self.partitions:
                    raise UnknownTopic(str(tp))
            consumer.manual = True
            gained = set(partitions) - consumer.assigned
            consumer.assigned = set(partitions)
            for tp in gained:
                committed = self._offsets.get((consumer.group, *tp))
                consumer.positions.setdefault(tp, committed or 0)
            for tp in list(consumer.positions):
                if tp not in consumer.assigned:
                    del consumer.positions[tp]

    def leave(self, consumer: ConsumerHandle) -> None:
        with self._lock:
            g = self.groups.get(consumer.group)
            if g and consumer.consumer_id in g.members:
                del g.members[consumer.consumer_id]
                self._rebalance(g, "leave")
            consumer.assigned = set()
            consumer.positions = {}

    def membership_tick(self, now: int | None = None) -> list[RebalanceEvent]:
        """Evict members whose heartbeats went stale; one event per group."""
        now = self.clock() if now is None else now
        events = []
        with self._lock:
            for g in list(self.groups.values()):
                dead = [
                    cid for cid, c in g.members.items()
                    if now - c.last_heartbeat > self.session_timeout_ms
                ]
                if dead:
                    for cid in dead:
                        member = g.members.pop(cid)
                        member.assigned = set()
                        member.positions = {}
                    events.append(self._rebalance(g, "failure"))
        return [e for e in events if e is not None]

    def _rebalance_groups_subscribed(self, topic: str, trigger: str) -> None:
        for g in self.groups.values():
            if any(topic in c.subscriptions for c in g.members.values()):
                self._rebalance(g, trigger)

    def _rebalance(self, g: GroupState, trigger: str) -> RebalanceEvent | None:
        g.generation += 1
        members = sorted(g.members.values(), key=lambda c: c.consumer_id)
        event = RebalanceEvent(
            generation=g.generation,
            members=[(c.consumer_id, c.node_id, c.metadata) for c in members],
            trigger=trigger,
        )
        topics = set()
        for c in members:
            topics |= c.subscriptions
        all_parts = sorted(
            tp for t in topics if t in self.topics for tp in self.partitions_of(t)
        )
        if g.strategy is not None:
            mapping = g.strategy(
                [MemberInfo(c.consumer_id, c.node_id, c.metadata) for c in members],
                all_parts,
            )
        else:
            mapping = self._round_robin(members, all_parts)
        new_assignment: dict[tuple[str, int], str] = {}
        for cid, parts in mapping.items():
            for tp in parts:
                if tp in new_assignment:
                    raise MessagingError(
                        f"strategy assigned {tp} twice in group {g.name}"
                    )
                new_assignment[tp] = cid
        g.assignment = new_assignment
        for c in members:
            new_parts = {tp for tp, cid in new_assignment.items()
                         if cid == c.consumer_id}
            revoked = c.assigned - new_parts
            gained = new_parts - c.assigned
            c.assigned = new_parts
            for tp in revoked:
                c.positions.pop(tp, None)
            for tp in gained:
                committed = self._offsets.get((c.group, *tp))
                c.positions[tp] = committed if committed is not None else 0
            # the callback diff is taken against what the consumer last
            # acknowledged, so back-to-back rebalances are not lost
            c.pending_rebalance = event
        return event

    @staticmethod
    def _round_robin(members, partitions):
        mapping = {c.consumer_id: set() for c in members}
        if not members:
            return mapping
        ids = sorted(mapping)
        for i, tp in enumerate(sorted(partitions)):
            mapping[ids[i % len(ids)]].add(tp)
        return mapping

    # -- consume -------------------------------------------------------------------

    def poll(self, consumer: ConsumerHandle, max_records: int = 256):
        with self._lock:
            consumer.last_heartbeat = self.clock()
            if (
                not consumer.manual
                and not consumer.closed
                and consumer.subscriptions
                and consumer.consumer_id
                not in self._group(consumer.group).members
            ):
                # evicted while alive (missed heartbeats): rejoin
                g = self._group(consumer.group)
                g.members[consumer.consumer_id] = consumer
                self._rebalance(g, "join")
            if consumer.pending_rebalance is not None:
                event = consumer.pending_rebalance
                consumer.pending_rebalance = None
                revoked = consumer.acked_assigned - consumer.assigned
                gained = consumer.assigned - consumer.acked_assigned
                consumer.acked_assigned = set(consumer.assigned)
                if consumer.on_rebalance is not None:
                    consumer.on_rebalance(event, revoked, gained)
            out = []
            budget = max_records
            for tp in sorted(consumer.assigned):
                if budget <= 0:
                    break
                log = self.partitions.get(tp)
                if log is None:
                    continue
                pos = consumer.positions.get(tp, 0)
                take = log.records[pos : pos + budget]
                if take:
                    consumer.positions[tp] = pos + len(take)
                    budget -= len(take)
                    out.extend((tp[0], tp[1], rec) for rec in take)
            return out

    def seek(self, consumer: ConsumerHandle, topic: str, partition: int,
             offset: int) -> None:
        with self._lock:
            tp = (topic, partition)
            if tp not in consumer.assigned:
                raise MessagingError(f"{tp} not assigned to {consumer.consumer_id}")
            log = self.partitions[tp]
            if not (0 <= offset <= log.end_offset):
                raise OffsetOutOfRange(
                    f"offset {offset} outside [0, {log.end_offset}]"
                )
            consumer.positions[tp] = offset

    # -- committed offsets ------------------------------------------------------------

    def commit(self, group: str, topic: str, partition: int, next_offset: int) -> None:
        with self._lock:
            self._offsets[(group, topic, partition)] = next_offset
            with open(self._offsets_path, "a", encoding="utf-8") as fh:
                fh.write(f"{group}\t{topic}\t{partition}\t{next_offset}\n")

    def committed(self, group: str, topic: str, partition: int) -> int | None:
        return self._offsets.get((group, topic, partition))

    def _load_offsets(self) -> None:
        if not os.path.exists(self._offsets_path):
            return
        with open(self._offsets_path, "r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.strip().split("\t")
                if len(parts) == 4:
                    self._offsets[(parts[0], parts[1], int(parts[2]))] = int(parts[3])
        # compact: last write wins
        with open(self._offsets_path, "w", encoding="utf-8") as fh:
            for (group, topic, partition), offset in sorted(self._offsets.items()):
                fh.write(f"{group}\t{topic}\t{partition}\t{offset}\n")

    def close(self) -> None:
        with self._lock:
            for log in self.partitions.values():
                log.close()
