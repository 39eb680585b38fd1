"""Retractable aggregation states and the per-task persistent state store.

Each aggregator kind keeps just enough auxiliary data to support both
applying an arriving event and retracting an expiring one in O(1)
amortized: sum/count/avg keep running totals, min/max keep a monotonic
deque of (ts, value) candidates, stddev keeps the (count, mean, m2)
triple updated forward and backward, and count_distinct keeps per-value
multiplicities (persisted in an auxiliary sub-store).

Events are applied in arrival-time order and retracted in the same
order, which is what the window machinery guarantees.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from collections import deque
from dataclasses import dataclass

from .model import AGGREGATORS

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")

# Default cadence for rebuilding long-lived float states from the live
# events, bounding subtraction drift. Exposed for tests.
REBUILD_RETRACTIONS = 1 << 20


class RetractUnderflow(RuntimeError):
    """Retract called on state with no live contribution: engine bug."""


class SumState:
    __slots__ = ("value", "count", "retract_count")

    def __init__(self):
        self.value = 0
        self.count = 0
        self.retract_count = 0


class CountState:
    __slots__ = ("value",)

    def __init__(self):
        self.value = 0


class AvgState:
    __slots__ = ("total", "count", "retract_count")

    def __init__(self):
        self.total = 0
        self.count = 0
        self.retract_count = 0


class MinMaxState:
    """Monotonic deque of (ts, value); front is the current extreme."""

    __slots__ = ("entries", "live")

    def __init__(self):
        self.entries = deque()
        self.live = 0


class StddevState:
    __slots__ = ("count", "mean", "m2", "retract_count", "scale")

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.retract_count = 0
        self.scale = 0.0  # largest |v| ever folded in; sets the noise floor


class CountDistinctState:
    __slots__ = ("count", "multiplicity")

    def __init__(self):
        self.count = 0
        self.multiplicity = {}


_STATE_TYPES = {
    "sum": SumState,
    "count": CountState,
    "avg": AvgState,
    "min": MinMaxState,
    "max": MinMaxState,
    "stddev": StddevState,
    "count_distinct": CountDistinctState,
}

_VARIANT_TAGS = {kind: i for i, kind in enumerate(AGGREGATORS)}
_TAG_VARIANTS = {i: kind for kind, i in _VARIANT_TAGS.items()}


def agg_empty(kind: str):
    return _STATE_TYPES[kind]()


def agg_apply(kind: str, state, v, ts: int):
    """Fold value ``v`` at time ``ts`` into ``state`` (mutates and returns it)."""
    if kind == "sum":
        state.value += v
        state.count += 1
    elif kind == "count":
        state.value += 1
    elif kind == "avg":
        state.total += v
        state.count += 1
    elif kind == "max":
        entries = state.entries
        while entries and entries[-1][1] <= v:
            entries.pop()
        entries.append((ts, v))
        state.live += 1
    elif kind == "min":
        entries = state.entries
        while entries and entries[-1][1] >= v:
            entries.pop()
        entries.append((ts, v))
        state.live += 1
    elif kind == "stddev":
        state.count += 1
        delta = v - state.mean
        state.mean += delta / state.count
        state.m2 += delta * (v - state.mean)
        av = v if v >= 0 else -v
        if av > state.scale:
            state.scale = av
    elif kind == "count_distinct":
        mult = state.multiplicity
        n = mult.get(v, 0) + 1
        mult[v] = n
        if n == 1:
            state.count += 1
    else:
        raise KeyError(kind)
    return state


def agg_retract(kind: str, state, v, ts: int):
    """Remove a previously applied (v, ts) contribution.

    Retractions must come in timestamp order; min/max drop every deque
    candidate no newer than the expiring event.
    """
    if kind == "sum":
        if state.count == 0:
            raise RetractUnderflow("sum")
        state.value -= v
        state.count -= 1
        state.retract_count += 1
        if state.count == 0 and isinstance(state.value, float):
            state.value = 0.0
    elif kind == "count":
        if state.value == 0:
            raise RetractUnderflow("count")
        state.value -= 1
    elif kind == "avg":
        if state.count == 0:
            raise RetractUnderflow("avg")
        state.total -= v
        state.count -= 1
        state.retract_count += 1
        if state.count == 0:
            state.total = 0 if isinstance(state.total, int) else 0.0
    elif kind in ("min", "max"):
        if state.live == 0:
            raise RetractUnderflow(kind)
        entries = state.entries
        while entries and entries[0][0] <= ts:
            entries.popleft()
        state.live -= 1
    elif kind == "stddev":
        if state.count == 0:
            raise RetractUnderflow("stddev")
        state.retract_count += 1
        if state.count == 1:
            state.count = 0
            state.mean = 0.0
            state.m2 = 0.0
        else:
            count = state.count - 1
            new_mean = (state.count * state.mean - v) / count
            state.m2 -= (v - new_mean) * (v - state.mean)
            state.count = count
            state.mean = new_mean
            if state.m2 < 0.0:
                state.m2 = 0.0
    elif kind == "count_distinct":
        mult = state.multiplicity
        if v not in mult:
            raise RetractUnderflow("count_distinct")
        n = mult[v] - 1
        if n == 0:
            del mult[v]
            state.count -= 1
        else:
            mult[v] = n
    else:
        raise KeyError(kind)
    return state


def agg_result(state):
    """Current aggregation value; None marks an undefined (empty) extreme."""
    if isinstance(state, SumState):
        return state.value
    if isinstance(state, CountState):
        return state.value
    if isinstance(state, AvgState):
        return state.total / state.count if state.count else 0
    if isinstance(state, MinMaxState):
        return state.entries[0][1] if state.entries else None
    if isinstance(state, StddevState):
        if state.count < 1:
            return None
        return math.sqrt(state.m2 / state.count) if state.m2 > 0.0 else 0.0
    if isinstance(state, CountDistinctState):
        return state.count
    raise TypeError(type(state))


def needs_rebuild(kind: str, state, threshold: int = REBUILD_RETRACTIONS) -> bool:
    """Float drift guard: recommend recomputing a state from live events.

    Triggers after enough subtractive updates, or when a variance has
    decayed below the float-noise floor of its own mean (the residue the
    reverse update leaves when the true variance is zero).
    """
    if kind in ("sum", "avg") and isinstance(
        state.value if kind == "sum" else state.total, float
    ):
        return state.retract_count >= threshold
    if kind == "stddev":
        if state.retract_count >= threshold:
            return True
        # the reverse update's residue scales with the values that passed
        # through, not with what currently remains
        noise_floor = state.count * (state.scale * state.scale) * 1e-12
        return state.retract_count > 0 and 0.0 < state.m2 <= noise_floor
    return False


# --------------------------------------------------------------------------
# Serialization: one-byte variant tag + fixed-width fields
# --------------------------------------------------------------------------

_NUM_INT = 0
_NUM_FLOAT = 1


def _pack_number(v) -> bytes:
    if isinstance(v, float):
        return _U8.pack(_NUM_FLOAT) + _F64.pack(v)
    return _U8.pack(_NUM_INT) + _I64.pack(v)


def _unpack_number(buf: bytes, off: int):
    (tag,) = _U8.unpack_from(buf, off)
    off += 1
    if tag == _NUM_FLOAT:
        (v,) = _F64.unpack_from(buf, off)
    else:
        (v,) = _I64.unpack_from(buf, off)
    return v, off + 8


def pack_cell(v) -> bytes:
    """Typed cell used in state keys, group keys and reply payloads."""
    if isinstance(v, bool):
        return _U8.pack(3) + _U8.pack(1 if v else 0)
    if isinstance(v, int):
        return _U8.pack(0) + _I64.pack(v)
    if isinstance(v, float):
        return _U8.pack(1) + _F64.pack(v)
    if isinstance(v, str):
        raw = v.encode("utf-8")
        return _U8.pack(2) + _U32.pack(len(raw)) + raw
    raise TypeError(f"cannot encode cell {v!r}")


def unpack_cell(buf: bytes, off: int):
    (tag,) = _U8.unpack_from(buf, off)
    off += 1
    if tag == 0:
        (v,) = _I64.unpack_from(buf, off)
        return v, off + 8
    if tag == 1:
        (v,) = _F64.unpack_from(buf, off)
        return v, off + 8
    if tag == 2:
        (n,) = _U32.unpack_from(buf, off)
        off += 4
        return buf[off : off + n].decode("utf-8"), off + n
    if tag == 3:
        return bool(buf[off]), off + 1
    raise ValueError(f"bad cell tag {tag}")


def serialize_state(kind: str, state) -> bytes:
    out = [_U8.pack(_VARIANT_TAGS[kind])]
    if kind == "sum":
        out.append(_pack_number(state.value))
        out.append(_I64.pack(state.count))
    elif kind == "count":
        out.append(_I64.pack(state.value))
    elif kind == "avg":
        out.append(_pack_number(state.total))
        out.append(_I64.pack(state.count))
    elif kind in ("min", "max"):
        out.append(_U32.pack(len(state.entries)))
        out.append(_I64.pack(state.live))
        for ts, v in state.entries:
            out.append(_I64.pack(ts))
            out.append(_pack_number(v))
    elif kind == "stddev":
        out.append(_I64.pack(state.count))
        out.append(_F64.pack(state.mean))
        out.append(_F64.pack(state.m2))
    elif kind == "count_distinct":
        # multiplicities live in the auxiliary sub-store
        out.append(_I64.pack(state.count))
    else:
        raise KeyError(kind)
    return b"".join(out)


def deserialize_state(buf: bytes):
    (tag,) = _U8.unpack_from(buf, 0)
    kind = _TAG_VARIANTS[tag]
    state = agg_empty(kind)
    off = 1
    if kind == "sum":
        state.value, off = _unpack_number(buf, off)
        (state.count,) = _I64.unpack_from(buf, off)
    elif kind == "count":
        (state.value,) = _I64.unpack_from(buf, off)
    elif kind == "avg":
        state.total, off = _unpack_number(buf, off)
        (state.count,) = _I64.unpack_from(buf, off)
    elif kind in ("min", "max"):
        (n,) = _U32.unpack_from(buf, off)
        off += 4
        (state.live,) = _I64.unpack_from(buf, off)
        off += 8
        for _ in range(n):
            (ts,) = _I64.unpack_from(buf, off)
            off += 8
            v, off = _unpack_number(buf, off)
            state.entries.append((ts, v))
    elif kind == "stddev":
        (state.count,) = _I64.unpack_from(buf, off)
        off += 8
        (state.mean,) = _F64.unpack_from(buf, off)
        off += 8
        (state.m2,) = _F64.unpack_from(buf, off)
    elif kind == "count_distinct":
        (state.count,) = _I64.unpack_from(buf, off)
    return kind, state


# --------------------------------------------------------------------------
# State store
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class StateKey:
    metric: str
    group: tuple

    def encode(self) -> bytes:
        raw = self.metric.encode("utf-8")
        out = [_U16.pack(len(raw)), raw, _U8.pack(len(self.group))]
        out.extend(pack_cell(v) for v in self.group)
        return b"".join(out)

    @staticmethod
    def decode(buf: bytes) -> "StateKey":
        (n,) = _U16.unpack_from(buf, 0)
        off = 2 + n
        metric = buf[2:off].decode("utf-8")
        (count,) = _U8.unpack_from(buf, off)
        off += 1
        group = []
        for _ in range(count):
            v, off = unpack_cell(buf, off)
            group.append(v)
        return StateKey(metric, tuple(group))


_SNAPSHOT_MAGIC = b"RGSS"
_SNAPSHOT_VERSION = 1

DISTINCT_SUBSTORE = "distinct"


class StateStoreError(RuntimeError):
    pass


class StateStore:
    """Embedded key-value map StateKey -> AggState with snapshot checkpoints.

    Single-owner: only the owning task processor writes. ``checkpoint``
    freezes the full content to ``snapshot-<id>.rgss`` (temp file + atomic
    rename); ``open`` recovers from the newest intact snapshot. Distinct
    counting keeps its per-value multiplicities in a named auxiliary
    sub-store so the main record stays fixed-width.
    """

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self._states: dict[StateKey, tuple[str, object]] = {}
        self.checkpoint_id = -1
        self._dirty = True
        self._recover()

    # -- access -------------------------------------------------------------

    def get(self, key: StateKey, kind: str):
        entry = self._states.get(key)
        if entry is None:
            state = agg_empty(kind)
            self._states[key] = (kind, state)
            self._dirty = True
            return state
        return entry[1]

    def peek(self, key: StateKey, kind: str):
        entry = self._states.get(key)
        return entry[1] if entry is not None else agg_empty(kind)

    def put(self, key: StateKey, kind: str, state) -> None:
        self._states[key] = (kind, state)
        self._dirty = True

    def mark_dirty(self) -> None:
        self._dirty = True

    def delete_metric(self, metric: str) -> int:
        doomed = [k for k in self._states if k.metric == metric]
        for k in doomed:
            del self._states[k]
        if doomed:
            self._dirty = True
        return len(doomed)

    def keys(self):
        return sorted(self._states)

    def __len__(self):
        return len(self._states)

    # -- durability ----------------------------------------------------------

    def _snapshot_path(self, checkpoint_id: int) -> str:
        return os.path.join(self.directory, f"snapshot-{checkpoint_id:08d}.rgss")

    def checkpoint(self, checkpoint_id: int) -> int:
        if checkpoint_id <= self.checkpoint_id:
            raise StateStoreError(
                f"checkpoint ids must increase ({checkpoint_id} <= {self.checkpoint_id})"
            )
        if not self._dirty:
            self.checkpoint_id = checkpoint_id
            return checkpoint_id
        body = self._serialize_all()
        blob = (
            _SNAPSHOT_MAGIC
            + _U16.pack(_SNAPSHOT_VERSION)
            + body
            + _U32.pack(zlib.crc32(body))
        )
        path = self._snapshot_path(checkpoint_id)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
        os.replace(tmp, path)
        self.checkpoint_id = checkpoint_id
        self._dirty = False
        return checkpoint_id

    def _serialize_all(self) -> bytes:
        main = []
        aux = []
        for key in sorted(self._states):
            kind, state = self._states[key]
            kb = key.encode()
            vb = serialize_state(kind, state)
            main.append(_U32.pack(len(kb)) + kb + _U32.pack(len(vb)) + vb)
            if kind == "count_distinct":
                for value in sorted(state.multiplicity, key=_cell_sort_key):
                    entry = kb + pack_cell(value)
                    aux.append(
                        _U32.pack(len(entry)) + entry
                        + _I64.pack(state.multiplicity[value])
                    )
        out = [_U32.pack(len(main))]
        out.extend(main)
        name = DISTINCT_SUBSTORE.encode()
        out.append(_U16.pack(len(name)))
        out.append(name)
        out.append(_U32.pack(len(aux)))
        out.extend(aux)
        return b"".join(out)

    def _recover(self) -> None:
        snapshots = sorted(
            f for f in os.listdir(self.directory)
            if f.startswith("snapshot-") and f.endswith(".rgss")
        )
        for name in reversed(snapshots):
            path = os.path.join(self.directory, name)
            try:
                self._load_snapshot(path)
            except (ValueError, struct.error, OSError):
                continue
            self.checkpoint_id = int(name[len("snapshot-") : -len(".rgss")])
            self._dirty = False
            return

    def _load_snapshot(self, path: str) -> None:
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != _SNAPSHOT_MAGIC:
            raise ValueError("bad snapshot magic")
        body = blob[6:-4]
        (crc,) = _U32.unpack_from(blob, len(blob) - 4)
        if zlib.crc32(body) != crc:
            raise ValueError("snapshot crc mismatch")
        states: dict[StateKey, tuple[str, object]] = {}
        off = 0
        (n,) = _U32.unpack_from(body, off)
        off += 4
        for _ in range(n):
            (klen,) = _U32.unpack_from(body, off)
            off += 4
            key = StateKey.decode(body[off : off + klen])
            off += klen
            (vlen,) = _U32.unpack_from(body, off)
            off += 4
            kind, state = deserialize_state(body[off : off + vlen])
            off += vlen
            states[key] = (kind, state)
        (nlen,) = _U16.unpack_from(body, off)
        off += 2 + nlen
        (naux,) = _U32.unpack_from(body, off)
        off += 4
        for _ in range(naux):
            (elen,) = _U32.unpack_from(body, off)
            off += 4
            entry = body[off : off + elen]
            off += elen
            (mult,) = _I64.unpack_from(body, off)
            off += 8
            key = StateKey.decode(entry)
            consumed = len(key.encode())
            value, _ = unpack_cell(entry, consumed)
            states[key][1].multiplicity[value] = mult
        self._states = states

    def discard_after(self, checkpoint_id: int) -> None:
        """Drop snapshots newer than ``checkpoint_id`` (recovery trimming)."""
        for name in os.listdir(self.directory):
            if not (name.startswith("snapshot-") and name.endswith(".rgss")):
                continue
            cid = int(name[len("snapshot-") : -len(".rgss")])
            if cid > checkpoint_id:
                os.remove(os.path.join(self.directory, name))

    def content_digest(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        h.update(self._serialize_all())
        return h.digest()


def _cell_sort_key(v):
    if isinstance(v, bool):
        return (3, v)
    if isinstance(v, int):
        return (0, v)
    if isinstance(v, float):
        return (1, v)
    return (2, v)
