"""Disk-backed, time-ordered event store with chunked compressed files.

Events accumulate in one mutable open chunk; full chunks close, then a
background worker serializes, compresses and appends them to the active
chunk file (files seal and become immutable after a fixed chunk count).
An in-memory index maps timestamps to persisted chunks for random reads.
Iterators walk the store in timestamp order, pinning one chunk each and
prefetching the next so steady-state reads never wait on disk.

Everything here is single-owner: only the owning task-processor thread
calls append/advance/checkpoint. Background persistence and prefetch
results are observed at those call points.
"""

from __future__ import annotations

import bisect
import os
import struct
import threading
import time
import zlib
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

from .model import Event, EventSchema

FILE_MAGIC = b"RGRV"
FILE_VERSION = 1
_FILE_HEADER = struct.Struct("<4sH")
# per chunk: first_ts i64, last_ts i64, schema_id u32, codec_id u8,
# event_count u32, compressed_len u32
_CHUNK_HEADER = struct.Struct("<qqIBII")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

CODEC_IDENTITY = 0
CODEC_ZLIB = 1


class ReservoirError(RuntimeError):
    pass


class UnrecoverableError(ReservoirError):
    """Local files are missing or corrupt; a full copy from a peer is needed."""


class StorageFailure(ReservoirError):
    """Background persistence failed; the owning task must fail."""


@dataclass
class ReservoirConfig:
    chunk_target_events: int = 256
    file_seal_chunks: int = 64
    cache_capacity: int = 32
    out_of_order: str = "rewrite"  # or "discard"
    lateness_grace_ms: int = 0
    codec_id: int = CODEC_ZLIB
    zlib_level: int = 6
    # test hook: seconds of artificial latency per storage write
    storage_write_delay: float = 0.0


@dataclass
class AppendOutcome:
    status: str  # accepted | duplicate | rewritten | discarded
    new_ts: int | None = None

    @property
    def stored(self) -> bool:
        return self.status in ("accepted", "rewritten")


@dataclass
class ReservoirCheckpoint:
    checkpoint_id: int
    source_offset: int
    files: tuple[tuple[str, int, bool], ...]  # (name, length, sealed)
    open_snapshot: str | None


# --------------------------------------------------------------------------
# Payload codec: column-ordered, fixed-width little-endian
# --------------------------------------------------------------------------


def _encode_str_column(values) -> bytes:
    """u32 body length, u16 lengths array, concatenated utf-8 bytes."""
    raws = [v.encode("utf-8") for v in values]
    lens = struct.pack(f"<{len(raws)}H", *map(len, raws))
    blob = b"".join(raws)
    return _U32.pack(len(lens) + len(blob)) + lens + blob


def encode_payload(schema: EventSchema, events: list[Event]) -> bytes:
    """Column order: ids, timestamps, then schema fields. Variable-width
    columns carry a byte-length prefix so any column's start is reachable
    without parsing the ones before it."""
    n = len(events)
    out = [_encode_str_column([e.id for e in events])]
    out.append(struct.pack(f"<{n}q", *(e.ts for e in events)))
    for col, (_, kind) in enumerate(schema.fields):
        column = [e.values[col] for e in events]
        if kind == "int64":
            out.append(struct.pack(f"<{n}q", *column))
        elif kind == "float64":
            out.append(struct.pack(f"<{n}d", *column))
        elif kind == "bool":
            out.append(bytes(1 if v else 0 for v in column))
        else:  # string
            out.append(_encode_str_column(column))
    return b"".join(out)


def _column_offsets(schema: EventSchema, buf: bytes, n: int) -> list[int]:
    """Start offset of the ts column and every field column (ids at 0)."""
    offsets = []
    (id_bytes,) = _U32.unpack_from(buf, 0)
    off = 4 + id_bytes
    offsets.append(off)  # ts column
    off += 8 * n
    for _, kind in schema.fields:
        offsets.append(off)
        if kind in ("int64", "float64"):
            off += 8 * n
        elif kind == "bool":
            off += n
        else:
            (col_bytes,) = _U32.unpack_from(buf, off)
            off += 4 + col_bytes
    return offsets


def _str_column_offsets(buf: bytes, start: int, n: int):
    """Byte offsets of each string in a lengths+blob column (n+1 entries)."""
    from itertools import accumulate

    lens = struct.unpack_from(f"<{n}H", buf, start + 4)
    base = start + 4 + 2 * n
    return list(accumulate(lens, initial=base))


class LazyChunk:
    """Decoded-on-demand view of a persisted chunk.

    Background loaders hand over raw decompressed bytes; events
    materialize in small blocks as a cursor walks forward, so no single
    advance pays for a whole chunk's deserialization.
    """

    BLOCK = 32

    __slots__ = ("schema", "raw", "count", "events", "_done", "_ts_col",
                 "_offsets", "_cursors")

    def __init__(self, schema: EventSchema, raw: bytes, count: int):
        self.schema = schema
        self.raw = raw
        self.count = count
        self.events: list = [None] * count
        self._done = 0  # materialized prefix length
        self._ts_col = None
        self._offsets = None
        self._cursors = None

    def __len__(self) -> int:
        return self.count

    @property
    def ts_col(self):
        if self._ts_col is None:
            self._ensure_offsets()
            self._ts_col = struct.unpack_from(
                f"<{self.count}q", self.raw, self._offsets[0]
            )
        return self._ts_col

    def _ensure_offsets(self):
        if self._offsets is None:
            self._offsets = _column_offsets(self.schema, self.raw, self.count)

    def __getitem__(self, idx: int) -> Event:
        ev = self.events[idx]
        if ev is None:
            self._materialize_through(idx)
            ev = self.events[idx]
        return ev

    def _materialize_through(self, idx: int) -> None:
        self._ensure_offsets()
        if self._cursors is None:
            # per string column: offsets of every value, computed once
            self._cursors = {"ids": _str_column_offsets(self.raw, 0, self.count)}
            for col, (_, kind) in enumerate(self.schema.fields):
                if kind == "string":
                    self._cursors[col] = _str_column_offsets(
                        self.raw, self._offsets[col + 1], self.count
                    )
        target = min(self.count, ((idx // self.BLOCK) + 1) * self.BLOCK)
        raw = self.raw
        while self._done < target:
            lo = self._done
            hi = min(self.count, lo + self.BLOCK)
            m = hi - lo
            offs = self._cursors["ids"]
            ids = [
                raw[offs[i] : offs[i + 1]].decode("utf-8")
                for i in range(lo, hi)
            ]
            ts = self.ts_col[lo:hi]
            columns = []
            for col, (_, kind) in enumerate(self.schema.fields):
                base = self._offsets[col + 1]
                if kind == "int64":
                    columns.append(
                        struct.unpack_from(f"<{m}q", self.raw, base + 8 * lo)
                    )
                elif kind == "float64":
                    columns.append(
                        struct.unpack_from(f"<{m}d", self.raw, base + 8 * lo)
                    )
                elif kind == "bool":
                    columns.append(
                        tuple(b == 1 for b in self.raw[base + lo : base + hi])
                    )
                else:
                    offs = self._cursors[col]
                    columns.append([
                        raw[offs[i] : offs[i + 1]].decode("utf-8")
                        for i in range(lo, hi)
                    ])
            sid = self.schema.schema_id
            rows = zip(*columns) if columns else ((),) * m
            # bypass Event.__init__: these fields were validated when the
            # chunk was written, and this path runs per retracted event
            new = Event.__new__
            events = self.events
            for k, (i, t, v) in enumerate(zip(ids, ts, rows)):
                ev = new(Event)
                ev.id = i
                ev.ts = t
                ev.schema_id = sid
                ev.values = v
                events[lo + k] = ev
            self._done = hi


def decode_payload(schema: EventSchema, buf: bytes, n: int) -> list[Event]:
    chunk = LazyChunk(schema, buf, n)
    if n:
        chunk._materialize_through(n - 1)
    return chunk.events


def compress(codec_id: int, raw: bytes, level: int = 6) -> bytes:
    if codec_id == CODEC_IDENTITY:
        return raw
    if codec_id == CODEC_ZLIB:
        return zlib.compress(raw, level)
    raise ReservoirError(f"unknown codec {codec_id}")


def decompress(codec_id: int, blob: bytes) -> bytes:
    if codec_id == CODEC_IDENTITY:
        return blob
    if codec_id == CODEC_ZLIB:
        return zlib.decompress(blob)
    raise ReservoirError(f"unknown codec {codec_id}")


# --------------------------------------------------------------------------
# Schema registry
# --------------------------------------------------------------------------


class SchemaRegistry:
    """Append-only id -> schema map, persisted one schema per line."""

    def __init__(self, path: str):
        self.path = path
        self._schemas: dict[int, EventSchema] = {}
        self._next_id = 0
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    sid_text, *pairs = line.split("\t")
                    sid = int(sid_text)
                    fields = tuple(tuple(p.split(":", 1)) for p in pairs)
                    self._schemas[sid] = EventSchema(schema_id=sid, fields=fields)
                    self._next_id = max(self._next_id, sid + 1)

    @property
    def current_id(self) -> int:
        return self._next_id - 1

    def register(self, fields: tuple[tuple[str, str], ...]) -> int:
        sid = self._next_id
        self._next_id += 1
        schema = EventSchema(schema_id=sid, fields=tuple(fields))
        self._schemas[sid] = schema
        line = "\t".join([str(sid)] + [f"{n}:{k}" for n, k in fields])
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        return sid

    def get(self, schema_id: int) -> EventSchema:
        try:
            return self._schemas[schema_id]
        except KeyError:
            raise ReservoirError(f"unknown schema id {schema_id}") from None

    def __contains__(self, schema_id: int) -> bool:
        return schema_id in self._schemas

    def __len__(self) -> int:
        return len(self._schemas)


def read_as(event: Event, old: EventSchema, current: EventSchema):
    """Project an event onto ``current``; missing fields read as None."""
    if old.schema_id == current.schema_id:
        return event.values
    by_name = dict(zip(old.field_names, event.values))
    return tuple(by_name.get(name) for name in current.field_names)


# --------------------------------------------------------------------------
# Chunks
# --------------------------------------------------------------------------

OPEN, TRANSITION, CLOSED = "open", "transition", "closed"


class Chunk:
    __slots__ = ("seq", "schema_id", "state", "events", "ts_list", "close_at")

    def __init__(self, seq: int, schema_id: int):
        self.seq = seq
        self.schema_id = schema_id
        self.state = OPEN
        self.events: list[Event] = []
        self.ts_list: list[int] = []
        self.close_at: int | None = None  # event-time deadline in transition

    @property
    def first_ts(self) -> int:
        return self.ts_list[0]

    @property
    def last_ts(self) -> int:
        return self.ts_list[-1]

    def insert(self, event: Event) -> int:
        """Insert keeping ts order; returns the insertion position."""
        if not self.ts_list or event.ts >= self.ts_list[-1]:
            self.events.append(event)
            self.ts_list.append(event.ts)
            return len(self.events) - 1
        pos = bisect.bisect_right(self.ts_list, event.ts)
        self.events.insert(pos, event)
        self.ts_list.insert(pos, event.ts)
        return pos


@dataclass
class PersistedChunk:
    seq: int
    file_name: str
    offset: int  # of the chunk header within the file
    first_ts: int
    last_ts: int
    schema_id: int
    codec_id: int
    event_count: int
    compressed_len: int


@dataclass
class ChunkFileState:
    name: str
    length: int
    chunk_count: int
    sealed: bool


class ChunkCache:
    """LRU cache of decoded chunks, shared by a reservoir's iterators."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._entries: OrderedDict[int, list[Event]] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, seq: int):
        with self._lock:
            events = self._entries.get(seq)
            if events is not None:
                self._entries.move_to_end(seq)
            return events

    def take(self, seq: int):
        """Remove and return: the chunk moves from cache to an iterator pin."""
        with self._lock:
            return self._entries.pop(seq, None)

    def peek(self, seq: int):
        """Read without touching LRU order (scan traffic must not evict)."""
        with self._lock:
            return self._entries.get(seq)

    def put(self, seq: int, events: list[Event]) -> None:
        with self._lock:
            self._entries[seq] = events
            self._entries.move_to_end(seq)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def __contains__(self, seq: int) -> bool:
        with self._lock:
            return seq in self._entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def values(self):
        with self._lock:
            return list(self._entries.values())


class ReservoirIterator:
    """Forward-only cursor in timestamp order; pins at most one chunk.

    ``skipped`` records ids of out-of-order events inserted behind this
    cursor, which it therefore never yielded; window bookkeeping uses it
    to keep apply/retract paired.
    """

    __slots__ = ("reservoir", "role", "chunk_seq", "idx", "events", "released",
                 "skipped")

    def __init__(self, reservoir: "Reservoir", role: str, chunk_seq: int, idx: int):
        self.reservoir = reservoir
        self.role = role  # head | tail | scan
        self.chunk_seq = chunk_seq
        self.idx = idx
        self.events: list[Event] | None = None
        self.released = False
        self.skipped: dict[str, int] = {}
        reservoir._iterators.append(self)

    def peek(self) -> Event | None:
        return self.reservoir._iter_peek(self)

    def advance(self) -> Event | None:
        return self.reservoir._iter_advance(self)

    def release(self) -> None:
        if not self.released:
            self.released = True
            self.events = None
            try:
                self.reservoir._iterators.remove(self)
            except ValueError:
                pass


# --------------------------------------------------------------------------
# Reservoir
# --------------------------------------------------------------------------


class Reservoir:
    def __init__(self, directory: str, config: ReservoirConfig | None = None):
        self.directory = directory
        self.config = config or ReservoirConfig()
        os.makedirs(directory, exist_ok=True)
        self.registry = SchemaRegistry(os.path.join(directory, "schemas.tsv"))

        self._open_chunk: Chunk | None = None
        self._transitions: list[Chunk] = []
        self._pending: list[Chunk] = []  # closed, persistence in flight
        self._pending_jobs: list[tuple[Chunk, Future]] = []
        self._persisted: dict[int, PersistedChunk] = {}
        self._index: list[tuple[int, int]] = []  # (first_ts, seq), seq ascending
        self._files: dict[str, ChunkFileState] = {}
        self._dedup: dict[str, int] = {}
        self._iterators: list[ReservoirIterator] = []
        self._read_fds: dict[str, int] = {}
        self._cache = ChunkCache(self.config.cache_capacity)
        self._prefetching: dict[int, Future] = {}
        self._next_seq = 0
        self._first_seq = 0
        self._closed_horizon: int | None = None  # last_ts of newest closed chunk
        self.frontier: int | None = None  # max stored ts
        self.retention_ms: int | None = None
        self.last_checkpoint_id = -1
        self._last_checkpoint_files: tuple = ()
        self._last_open_snapshot: str | None = None
        self._has_manifest = False
        self._dirty = False

        self._persist_pool = ThreadPoolExecutor(
            max_workers=1, thread_name_prefix="rgrv-persist"
        )
        self._prefetch_pool = ThreadPoolExecutor(
            max_workers=1, thread_name_prefix="rgrv-prefetch"
        )

        self.loads = 0  # synchronous chunk loads (critical path)
        self.prefetch_issued = 0
        self.prefetch_waits = 0
        self.prefetch_late = 0

        self._recover()

    # -- schema ---------------------------------------------------------------

    def register_schema(self, fields) -> int:
        return self.registry.register(tuple(fields))

    # -- append ----------------------------------------------------------------

    def append(self, event: Event) -> AppendOutcome:
        self._reap_persistence()
        if event.schema_id not in self.registry:
            raise ReservoirError(f"unregistered schema {event.schema_id}")
        if event.id in self._dedup:
            return AppendOutcome("duplicate")

        outcome = AppendOutcome("accepted")
        target = None
        horizon = self._closed_horizon
        if self._transitions and event.ts <= self._transitions[-1].last_ts:
            fully_closed = self._fully_closed_horizon()
            if fully_closed is not None and event.ts <= fully_closed:
                outcome = self._handle_too_late(event)
                if outcome.status == "discarded":
                    return outcome
                event = Event(event.id, outcome.new_ts, event.schema_id, event.values)
                target = self._target_open_chunk(event)
            else:
                target = self._target_transition_chunk(event)
        elif horizon is not None and event.ts <= horizon:
            outcome = self._handle_too_late(event)
            if outcome.status == "discarded":
                return outcome
            event = Event(event.id, outcome.new_ts, event.schema_id, event.values)
            target = self._target_open_chunk(event)
        else:
            target = self._target_open_chunk(event)

        pos = target.insert(event)
        if pos < len(target.events) - 1 or target is not self._open_chunk:
            self._shift_iterators(target.seq, pos, event)
        self._dedup[event.id] = self._dedup.get(event.id, 0) + 1
        if self.frontier is None or event.ts > self.frontier:
            self.frontier = event.ts
        self._dirty = True

        if (
            target.state == OPEN
            and len(target.events) >= self.config.chunk_target_events
        ):
            self._rotate_open()
        self._expire_transitions()
        return outcome

    def _fully_closed_horizon(self) -> int | None:
        return self._closed_horizon

    def _handle_too_late(self, event: Event) -> AppendOutcome:
        if self.config.out_of_order == "discard":
            return AppendOutcome("discarded")
        open_chunk = self._open_chunk
        if open_chunk is not None and open_chunk.events:
            new_ts = open_chunk.first_ts
        else:
            base = self._transitions[-1].last_ts if self._transitions else self._closed_horizon
            new_ts = base + 1
        return AppendOutcome("rewritten", new_ts=new_ts)

    def _target_open_chunk(self, event: Event) -> Chunk:
        chunk = self._open_chunk
        if chunk is not None and chunk.schema_id != event.schema_id:
            self._rotate_open()
            chunk = None
        if chunk is None or self._open_chunk is None:
            chunk = Chunk(self._next_seq, event.schema_id)
            self._next_seq += 1
            self._open_chunk = chunk
        else:
            chunk = self._open_chunk
        return chunk

    def _target_transition_chunk(self, event: Event) -> Chunk:
        for chunk in reversed(self._transitions):
            if event.ts <= chunk.last_ts:
                prev_last = self._chunk_before_last_ts(chunk)
                if prev_last is None or event.ts > prev_last:
                    return chunk
        return self._transitions[0]

    def _chunk_before_last_ts(self, chunk: Chunk) -> int | None:
        idx = self._transitions.index(chunk)
        if idx > 0:
            return self._transitions[idx - 1].last_ts
        return self._closed_horizon

    def _rotate_open(self) -> None:
        chunk = self._open_chunk
        if chunk is None or not chunk.events:
            return
        self._open_chunk = None
        if self.config.lateness_grace_ms > 0:
            chunk.state = TRANSITION
            chunk.close_at = (self.frontier or 0) + self.config.lateness_grace_ms
            self._transitions.append(chunk)
        else:
            self._finalize(chunk)

    def _expire_transitions(self) -> None:
        while self._transitions and self.frontier is not None and (
            self._transitions[0].close_at is not None
            and self.frontier >= self._transitions[0].close_at
        ):
            self._finalize(self._transitions.pop(0))

    def _finalize(self, chunk: Chunk) -> None:
        chunk.state = CLOSED
        if self._closed_horizon is None or chunk.last_ts > self._closed_horizon:
            self._closed_horizon = chunk.last_ts
        self._pending.append(chunk)
        fut = self._persist_pool.submit(self._persist_job, chunk)
        self._pending_jobs.append((chunk, fut))

    # -- persistence (background worker) ----------------------------------------

    def _active_file(self) -> ChunkFileState:
        for st in self._files.values():
            if not st.sealed:
                return st
        name = f"chunks-{len(self._files):06d}.rgrv"
        path = os.path.join(self.directory, name)
        with open(path, "wb") as fh:
            fh.write(_FILE_HEADER.pack(FILE_MAGIC, FILE_VERSION))
        st = ChunkFileState(name=name, length=_FILE_HEADER.size, chunk_count=0,
                            sealed=False)
        self._files[name] = st
        return st

    def _persist_job(self, chunk: Chunk) -> PersistedChunk:
        if self.config.storage_write_delay:
            time.sleep(self.config.storage_write_delay)
        schema = self.registry.get(chunk.schema_id)
        raw = encode_payload(schema, chunk.events)
        blob = compress(self.config.codec_id, raw, self.config.zlib_level)
        st = self._active_file()
        header = _CHUNK_HEADER.pack(
            chunk.first_ts, chunk.last_ts, chunk.schema_id,
            self.config.codec_id, len(chunk.events), len(blob),
        )
        path = os.path.join(self.directory, st.name)
        with open(path, "ab") as fh:
            offset = fh.tell()
            fh.write(header)
            fh.write(blob)
            fh.flush()
        meta = PersistedChunk(
            seq=chunk.seq, file_name=st.name, offset=offset,
            first_ts=chunk.first_ts, last_ts=chunk.last_ts,
            schema_id=chunk.schema_id, codec_id=self.config.codec_id,
            event_count=len(chunk.events), compressed_len=len(blob),
        )
        st.length = offset + _CHUNK_HEADER.size + len(blob)
        st.chunk_count += 1
        if st.chunk_count >= self.config.file_seal_chunks:
            st.sealed = True
        return meta

    def _reap_persistence(self) -> None:
        while self._pending_jobs and self._pending_jobs[0][1].done():
            chunk, fut = self._pending_jobs.pop(0)
            exc = fut.exception()
            if exc is not None:
                raise StorageFailure(str(exc)) from exc
            meta = fut.result()
            self._persisted[meta.seq] = meta
            self._index.append((meta.first_ts, meta.seq))
            self._pending.remove(chunk)
            # a cursor riding just behind the persistence wave would miss
            # this chunk the moment it leaves memory: park the decoded
            # events for it (far-behind cursors use prefetch instead)
            if any(
                it.role != "scan" and 0 <= meta.seq - it.chunk_seq <= 2
                for it in self._iterators
            ):
                self._cache.put(meta.seq, chunk.events)
            for e in chunk.events:
                n = self._dedup.get(e.id, 0) - 1
                if n <= 0:
                    self._dedup.pop(e.id, None)
                else:
                    self._dedup[e.id] = n

    def drain_persistence(self) -> None:
        for _, fut in list(self._pending_jobs):
            fut.exception()  # wait
        self._reap_persistence()

    # -- chunk resolution --------------------------------------------------------

    def _memory_chunk(self, seq: int) -> Chunk | None:
        if self._open_chunk is not None and self._open_chunk.seq == seq:
            return self._open_chunk
        for chunk in self._transitions:
            if chunk.seq == seq:
                return chunk
        for chunk in self._pending:
            if chunk.seq == seq:
                return chunk
        return None

    def _read_fd(self, file_name: str) -> int:
        fd = self._read_fds.get(file_name)
        if fd is None:
            fd = os.open(os.path.join(self.directory, file_name), os.O_RDONLY)
            self._read_fds[file_name] = fd
        return fd

    def _drop_read_fd(self, file_name: str) -> None:
        fd = self._read_fds.pop(file_name, None)
        if fd is not None:
            os.close(fd)

    def _load_persisted(self, meta: PersistedChunk) -> LazyChunk:
        # pread on a cached descriptor: no seek state (safe from both the
        # owner and the prefetch worker) and no per-read reopen cost;
        # events materialize block-wise as cursors walk the chunk
        fd = self._read_fd(meta.file_name)
        blob = os.pread(fd, meta.compressed_len,
                        meta.offset + _CHUNK_HEADER.size)
        raw = decompress(meta.codec_id, blob)
        schema = self.registry.get(meta.schema_id)
        return LazyChunk(schema, raw, meta.event_count)

    def _resolve_chunk(self, seq: int, issue_prefetch: bool = True,
                       adopt: bool = True):
        """Returns the decoded event list for chunk ``seq`` or None if absent.

        Window cursors adopt the chunk (it leaves the cache and lives as
        their pinned current); scan traffic reads through without
        disturbing the cache, so a backfill cannot evict a cursor's
        prefetched next chunk.
        """
        chunk = self._memory_chunk(seq)
        if chunk is not None:
            return chunk.events
        meta = self._persisted.get(seq)
        if meta is None:
            return None
        if not adopt:
            events = self._cache.peek(seq)
            if events is None:
                events = self._load_persisted(meta)
                self.loads += 1
            return events
        events = self._cache.take(seq)
        if events is None:
            fut = self._prefetching.pop(seq, None)
            if fut is not None and fut.done() and fut.exception() is None:
                events = fut.result()
                self._cache.take(seq)  # done-callback may have parked it
                self._cache.hits += 1
            elif fut is not None:
                # a straggling prefetch is never worth blocking on: the
                # read+decompress is a few events' worth of work here,
                # while waiting out a busy worker costs milliseconds
                fut.cancel()
                events = self._load_persisted(meta)
                self.loads += 1
                self.prefetch_late += 1
                self._cache.hits += 1
            else:
                events = self._load_persisted(meta)
                self.loads += 1
                self._cache.misses += 1
        else:
            self._cache.hits += 1
            self._prefetching.pop(seq, None)
        if issue_prefetch:
            # lead depth scales with the cache share per cursor: a lone
            # cursor gets several chunks of head start (the background
            # loader may wait a while for an interpreter slice), while
            # many cursors stay at one each so they cannot thrash the
            # cache below its capacity; one batched job per crossing
            depth = max(1, min(4, self._cache.capacity
                               // (2 * max(1, len(self._iterators)))))
            self._issue_prefetch_batch(seq + 1, depth)
        return events

    def _issue_prefetch_batch(self, first_seq: int, depth: int) -> None:
        metas = []
        for seq in range(first_seq, first_seq + depth):
            if seq in self._prefetching or seq in self._cache:
                continue
            meta = self._persisted.get(seq)
            if meta is not None:
                metas.append(meta)
        if not metas:
            return
        self.prefetch_issued += len(metas)
        fut = self._prefetch_pool.submit(self._prefetch_job, metas)
        for meta in metas:
            self._prefetching[meta.seq] = fut

    def _prefetch_job(self, metas) -> None:
        for meta in metas:
            chunk = self._load_persisted(meta)
            self._cache.put(meta.seq, chunk)

    def _issue_prefetch(self, seq: int) -> None:
        if seq in self._prefetching or seq in self._cache:
            return
        meta = self._persisted.get(seq)
        if meta is None:
            return
        self.prefetch_issued += 1
        fut = self._prefetch_pool.submit(self._load_persisted, meta)
        self._prefetching[seq] = fut
        def _done(f, seq=seq):
            if not f.cancelled() and f.exception() is None:
                self._cache.put(seq, f.result())
        fut.add_done_callback(_done)

    # -- iterators ---------------------------------------------------------------

    def iterator_at(self, t: int, role: str = "scan") -> ReservoirIterator:
        """Cursor positioned at the first event with ts > t."""
        self._reap_persistence()
        seq = self._seq_for_ts(t)
        it = ReservoirIterator(self, role, seq, 0)
        events = self._resolve_chunk(
            seq, issue_prefetch=(role != "scan"), adopt=(role != "scan")
        )
        if events is not None:
            chunk = self._memory_chunk(seq)
            if chunk is not None:
                ts_list = chunk.ts_list
            elif isinstance(events, LazyChunk):
                ts_list = events.ts_col
            else:
                ts_list = [e.ts for e in events]
            it.idx = bisect.bisect_right(ts_list, t)
            it.events = events
        return it

    def head_iterator(self) -> ReservoirIterator:
        """Cursor at the stream frontier: yields only events appended later."""
        self._reap_persistence()
        if self._open_chunk is not None and self._open_chunk.events:
            it = ReservoirIterator(self, "head", self._open_chunk.seq,
                                   len(self._open_chunk.events))
            it.events = self._open_chunk.events
            return it
        return ReservoirIterator(self, "head", self._next_seq, 0)

    def _seq_for_ts(self, t: int) -> int:
        pos = bisect.bisect_right(self._index, (t, float("inf"))) - 1
        if pos >= 0:
            first_ts, seq = self._index[pos]
            meta = self._persisted[seq]
            if t <= meta.last_ts:
                return seq
            candidate = seq + 1
        else:
            candidate = self._first_seq
        # walk forward over chunk ranges until one can contain ts > t
        while True:
            meta = self._persisted.get(candidate)
            if meta is not None:
                if meta.last_ts > t:
                    return candidate
                candidate += 1
                continue
            chunk = self._memory_chunk(candidate)
            if chunk is None:
                return candidate  # at the frontier
            if chunk.events and chunk.last_ts > t:
                return candidate
            if chunk is self._open_chunk:
                return candidate
            candidate += 1

    def _iter_peek(self, it: ReservoirIterator) -> Event | None:
        ev = self._iter_advance(it, consume=False)
        return ev

    def _iter_advance(self, it: ReservoirIterator, consume: bool = True) -> Event | None:
        self._reap_persistence()
        while True:
            if it.events is None:
                scan = it.role == "scan"
                it.events = self._resolve_chunk(
                    it.chunk_seq, issue_prefetch=not scan, adopt=not scan
                )
                if it.events is None:
                    return None  # frontier: chunk not born yet
            if it.idx < len(it.events):
                ev = it.events[it.idx]
                if consume:
                    it.idx += 1
                return ev
            # end of current chunk; the open chunk may still grow in place
            chunk = self._memory_chunk(it.chunk_seq)
            if chunk is not None and chunk is self._open_chunk:
                return None
            it.chunk_seq += 1
            it.idx = 0
            it.events = None

    def _shift_iterators(self, seq: int, pos: int, event: Event) -> None:
        for it in self._iterators:
            if it.chunk_seq > seq or (it.chunk_seq == seq and it.idx > pos):
                if it.chunk_seq == seq:
                    it.idx += 1
                it.skipped[event.id] = event.ts
                if len(it.skipped) > 8192:
                    cutoff = sorted(it.skipped.values())[4096]
                    it.skipped = {
                        k: v for k, v in it.skipped.items() if v > cutoff
                    }

    # -- introspection -------------------------------------------------------------

    def chunks_in_memory(self) -> int:
        seen = set()
        for chunk in [self._open_chunk, *self._transitions, *self._pending]:
            if chunk is not None:
                seen.add(id(chunk.events))
        for events in self._cache.values():
            seen.add(id(events))
        for it in self._iterators:
            if it.events is not None:
                seen.add(id(it.events))
        return len(seen)

    def structural_chunks_in_memory(self) -> int:
        """Chunks the engine needs live: open/transition, cursor pins and
        cache, excluding the transient persistence backlog."""
        seen = set()
        if self._open_chunk is not None:
            seen.add(id(self._open_chunk.events))
        for chunk in self._transitions:
            seen.add(id(chunk.events))
        for events in self._cache.values():
            seen.add(id(events))
        for it in self._iterators:
            if it.events is not None:
                seen.add(id(it.events))
        return len(seen)

    def memory_bound(self) -> int:
        open_chunks = 1 if self._open_chunk is not None else 0
        return (
            open_chunks
            + len(self._transitions)
            + len(self._pending)
            + len(self._iterators)
            + self._cache.capacity
        )

    @property
    def cache(self) -> ChunkCache:
        return self._cache

    def event_count_in_memory(self) -> int:
        total = 0
        for chunk in [self._open_chunk, *self._transitions, *self._pending]:
            if chunk is not None:
                total += len(chunk.events)
        return total

    def all_events(self) -> list[Event]:
        """Full scan in timestamp order (test/debug helper)."""
        out = []
        it = self.iterator_at(-(1 << 62))
        while (ev := it.advance()) is not None:
            out.append(ev)
        it.release()
        return out

    # -- checkpoint / recovery -------------------------------------------------------

    def checkpoint(self, checkpoint_id: int, source_offset: int) -> ReservoirCheckpoint:
        if checkpoint_id <= self.last_checkpoint_id:
            raise ReservoirError("checkpoint ids must increase")
        self.drain_persistence()
        if not self._dirty and self._has_manifest:
            self.last_checkpoint_id = checkpoint_id
            return ReservoirCheckpoint(
                checkpoint_id, source_offset, self._last_checkpoint_files,
                self._last_open_snapshot,
            )

        snapshot_name = None
        live = [*self._transitions]
        if self._open_chunk is not None and self._open_chunk.events:
            live.append(self._open_chunk)
        if live:
            snapshot_name = f"open-{checkpoint_id:08d}.rgrv"
            path = os.path.join(self.directory, snapshot_name)
            tmp = path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(_FILE_HEADER.pack(FILE_MAGIC, FILE_VERSION))
                for chunk in live:
                    schema = self.registry.get(chunk.schema_id)
                    raw = encode_payload(schema, chunk.events)
                    fh.write(
                        _CHUNK_HEADER.pack(
                            chunk.first_ts, chunk.last_ts, chunk.schema_id,
                            CODEC_IDENTITY, len(chunk.events), len(raw),
                        )
                    )
                    fh.write(raw)
            os.replace(tmp, path)

        files = tuple(
            (st.name, st.length, st.sealed)
            for st in sorted(self._files.values(), key=lambda s: s.name)
        )
        manifest = [f"checkpoint {checkpoint_id}", f"source_offset {source_offset}"]
        manifest += [
            f"file {name} {length} {'sealed' if sealed else 'active'}"
            for name, length, sealed in files
        ]
        if snapshot_name:
            manifest.append(f"open {snapshot_name}")
        mpath = os.path.join(self.directory, f"checkpoint-{checkpoint_id:08d}.manifest")
        tmp = mpath + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(manifest) + "\n")
        os.replace(tmp, mpath)

        self.last_checkpoint_id = checkpoint_id
        self._last_checkpoint_files = files
        self._last_open_snapshot = snapshot_name
        self._has_manifest = True
        self._dirty = False
        self._gc_expired_files()
        return ReservoirCheckpoint(checkpoint_id, source_offset, files, snapshot_name)

    @staticmethod
    def newest_manifest(directory: str) -> str | None:
        if not os.path.isdir(directory):
            return None
        manifests = sorted(
            f for f in os.listdir(directory)
            if f.startswith("checkpoint-") and f.endswith(".manifest")
        )
        return manifests[-1] if manifests else None

    def _recover(self) -> None:
        manifest = self.newest_manifest(self.directory)
        if manifest is None:
            for name in os.listdir(self.directory):
                if name.endswith(".rgrv") or name.endswith(".tmp"):
                    os.remove(os.path.join(self.directory, name))
            return
        mpath = os.path.join(self.directory, manifest)
        with open(mpath, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        checkpoint_id = None
        source_offset = 0
        files: list[tuple[str, int, bool]] = []
        snapshot_name = None
        for line in lines:
            parts = line.split()
            if parts[0] == "checkpoint":
                checkpoint_id = int(parts[1])
            elif parts[0] == "source_offset":
                source_offset = int(parts[1])
            elif parts[0] == "file":
                files.append((parts[1], int(parts[2]), parts[3] == "sealed"))
            elif parts[0] == "open":
                snapshot_name = parts[1]
        if checkpoint_id is None:
            raise UnrecoverableError(f"malformed manifest {manifest}")

        keep = {name for name, _, _ in files}
        if snapshot_name:
            keep.add(snapshot_name)
        for name in os.listdir(self.directory):
            if name.endswith(".rgrv") and name not in keep:
                os.remove(os.path.join(self.directory, name))
            if name.endswith(".manifest") and name > manifest:
                os.remove(os.path.join(self.directory, name))
            if name.endswith(".tmp"):
                os.remove(os.path.join(self.directory, name))

        seq = 0
        for name, length, sealed in files:
            path = os.path.join(self.directory, name)
            if not os.path.exists(path):
                raise UnrecoverableError(f"missing chunk file {name}")
            actual = os.path.getsize(path)
            if actual < length:
                raise UnrecoverableError(f"chunk file {name} shorter than manifest")
            if actual > length:
                with open(path, "r+b") as fh:
                    fh.truncate(length)
            chunk_count = 0
            with open(path, "rb") as fh:
                magic, version = _FILE_HEADER.unpack(fh.read(_FILE_HEADER.size))
                if magic != FILE_MAGIC or version != FILE_VERSION:
                    raise UnrecoverableError(f"bad header in {name}")
                while fh.tell() < length:
                    offset = fh.tell()
                    hdr = fh.read(_CHUNK_HEADER.size)
                    if len(hdr) < _CHUNK_HEADER.size:
                        raise UnrecoverableError(f"torn chunk header in {name}")
                    first_ts, last_ts, sid, codec_id, count, clen = (
                        _CHUNK_HEADER.unpack(hdr)
                    )
                    fh.seek(clen, os.SEEK_CUR)
                    if fh.tell() > length:
                        raise UnrecoverableError(f"torn chunk payload in {name}")
                    meta = PersistedChunk(
                        seq=seq, file_name=name, offset=offset, first_ts=first_ts,
                        last_ts=last_ts, schema_id=sid, codec_id=codec_id,
                        event_count=count, compressed_len=clen,
                    )
                    self._persisted[seq] = meta
                    self._index.append((first_ts, seq))
                    if self._closed_horizon is None or last_ts > self._closed_horizon:
                        self._closed_horizon = last_ts
                    seq += 1
                    chunk_count += 1
            self._files[name] = ChunkFileState(
                name=name, length=length, chunk_count=chunk_count, sealed=sealed
            )

        if snapshot_name:
            path = os.path.join(self.directory, snapshot_name)
            if not os.path.exists(path):
                raise UnrecoverableError(f"missing open snapshot {snapshot_name}")
            with open(path, "rb") as fh:
                blob = fh.read()
            magic, version = _FILE_HEADER.unpack_from(blob, 0)
            if magic != FILE_MAGIC:
                raise UnrecoverableError("bad snapshot header")
            off = _FILE_HEADER.size
            restored: list[Chunk] = []
            while off < len(blob):
                first_ts, last_ts, sid, codec_id, count, clen = _CHUNK_HEADER.unpack_from(
                    blob, off
                )
                off += _CHUNK_HEADER.size
                raw = decompress(codec_id, blob[off : off + clen])
                off += clen
                events = decode_payload(self.registry.get(sid), raw, count)
                chunk = Chunk(seq, sid)
                for e in events:
                    chunk.insert(e)
                seq += 1
                restored.append(chunk)
            for chunk in restored[:-1]:
                chunk.state = TRANSITION
                chunk.close_at = (
                    chunk.last_ts + self.config.lateness_grace_ms
                    if self.config.lateness_grace_ms
                    else chunk.last_ts
                )
                self._transitions.append(chunk)
            if restored:
                last = restored[-1]
                last.state = OPEN
                self._open_chunk = last
            for chunk in restored:
                for e in chunk.events:
                    self._dedup[e.id] = self._dedup.get(e.id, 0) + 1

        self._next_seq = seq
        highs = [m.last_ts for m in self._persisted.values()]
        for chunk in [*self._transitions, self._open_chunk]:
            if chunk is not None and chunk.events:
                highs.append(chunk.last_ts)
        self.frontier = max(highs) if highs else None
        self.last_checkpoint_id = checkpoint_id
        self.recovered_source_offset = source_offset
        self._last_checkpoint_files = tuple(files)
        self._last_open_snapshot = snapshot_name
        self._has_manifest = True
        self._dirty = False

    # -- retention ---------------------------------------------------------------

    def set_retention(self, retention_ms: int | None) -> None:
        self.retention_ms = retention_ms

    def _gc_expired_files(self) -> None:
        if self.retention_ms is None or self.frontier is None:
            return
        cutoff = self.frontier - self.retention_ms
        min_iter_seq = min(
            (it.chunk_seq for it in self._iterators), default=self._next_seq
        )
        by_file: dict[str, list[PersistedChunk]] = {}
        for meta in self._persisted.values():
            by_file.setdefault(meta.file_name, []).append(meta)
        for name, metas in by_file.items():
            st = self._files.get(name)
            if st is None or not st.sealed:
                continue
            if all(m.last_ts < cutoff and m.seq < min_iter_seq for m in metas):
                self._drop_read_fd(name)
                os.remove(os.path.join(self.directory, name))
                del self._files[name]
                for m in metas:
                    del self._persisted[m.seq]
                self._index = [(f, s) for f, s in self._index if s in self._persisted]
                self._first_seq = max(self._first_seq,
                                      max(m.seq for m in metas) + 1)
                self._dirty = True

    def close(self) -> None:
        self.drain_persistence()
        self._persist_pool.shutdown(wait=True)
        self._prefetch_pool.shutdown(wait=True)
        for name in list(self._read_fds):
            self._drop_read_fd(name)

    def crash(self) -> None:
        """Abrupt halt: background work queues are dropped, nothing flushed.

        Queued persistence jobs are cancelled (an in-flight write may still
        land, like an OS completing a write during a kill); recovery
        truncates back to the last manifest either way.
        """
        self._persist_pool.shutdown(wait=True, cancel_futures=True)
        self._prefetch_pool.shutdown(wait=True, cancel_futures=True)
        self._pending_jobs.clear()
        for name in list(self._read_fds):
            self._drop_read_fd(name)
