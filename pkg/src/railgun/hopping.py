"""Hopping-window baseline engine, kept only for cost/accuracy comparison.

Maintains the classic fixed set of size/hop overlapping window states per
(metric, group key): every arriving event updates all states whose span
contains it, and whole windows expire at once. No retraction and no event
storage, which is exactly why its per-event cost is size/hop state
updates instead of one.

Per-event replies read the oldest still-active window (the one covering
the most history), the usual continuous approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import aggregation as agg
from .model import (
    Event,
    EventSchema,
    FilterExpr,
    HoppingSpec,
    eval_filter_values,
    hopping_memberships,
)


@dataclass(frozen=True)
class HoppingQuery:
    name: str
    aggregator: str
    field: str | None
    group_by: tuple[str, ...]
    window: HoppingSpec
    filter: FilterExpr | None = None


class HoppingEngine:
    def __init__(self, queries: list[HoppingQuery], schema: EventSchema):
        self.schema = schema
        self.queries = list(queries)
        for q in self.queries:
            if q.field is not None and not schema.has_field(q.field):
                raise ValueError(f"unknown field {q.field!r}")
        self._indexes = {
            q.name: tuple(schema.index_of(g) for g in q.group_by)
            for q in self.queries
        }
        self._field_idx = {
            q.name: None if q.field is None else schema.index_of(q.field)
            for q in self.queries
        }
        # (metric, group_key) -> {window_start -> agg state}
        self.states: dict[tuple, dict[int, object]] = {}
        self.state_updates = 0
        self.events_seen = 0

    def active_state_count(self) -> int:
        return sum(len(windows) for windows in self.states.values())

    def process_event(self, event: Event) -> list[tuple[str, tuple, object]]:
        self.events_seen += 1
        values = event.values
        out = []
        for q in self.queries:
            if q.filter is not None and not eval_filter_values(
                q.filter, values, self.schema
            ):
                continue
            key = tuple(values[i] for i in self._indexes[q.name])
            starts = hopping_memberships(q.window, event.ts)
            windows = self.states.setdefault((q.name, key), {})
            fidx = self._field_idx[q.name]
            v = None if fidx is None else values[fidx]
            for w in starts:
                state = windows.get(w)
                if state is None:
                    state = agg.agg_empty(q.aggregator)
                    windows[w] = state
                agg.agg_apply(q.aggregator, state, v, event.ts)
                self.state_updates += 1
            oldest_active = starts[0]
            for w in [w for w in windows if w < oldest_active]:
                del windows[w]
            out.append((q.name, key, agg.agg_result(windows[oldest_active])))
        return out

    def updates_per_event(self) -> float:
        return self.state_updates / self.events_seen if self.events_seen else 0.0
