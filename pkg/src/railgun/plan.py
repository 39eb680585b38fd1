"""Operator DAG executed per event: Window -> Filter -> GroupBy -> Aggregator.

Metrics sharing a prefix share the node objects. Each distinct window
spec owns one window node with one tail cursor over the reservoir
(none for infinite windows); window nodes with the same delay share one
head cursor, so the number of live cursors is one per delay class plus
one per (kind, size, delay) class.

Advancing the plan for an arriving event first folds every event the
shared heads have reached into the matching aggregation states, then
retracts everything past each window's expiry threshold. Results are
emitted only for the leaves on the arriving event's own group-key path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import aggregation as agg
from .aggregation import StateKey, StateStore
from .model import (
    Event,
    EventSchema,
    MetricQuery,
    ModelError,
    WindowSpec,
    eval_filter_values,
    expiry_threshold,
)
from .reservoir import Reservoir, ReservoirIterator, read_as


class PlanError(ModelError):
    pass


@dataclass
class AggLeaf:
    name: str
    kind: str
    field: str | None
    field_idx: int | None = None


@dataclass
class GroupNode:
    fields: tuple[str, ...]
    leaves: list[AggLeaf] = field(default_factory=list)
    indexes: tuple[int, ...] = ()


@dataclass
class FilterNode:
    expr: object | None
    groups: list[GroupNode] = field(default_factory=list)


@dataclass
class WindowNode:
    spec: WindowSpec
    tail: ReservoirIterator | None
    filters: list[FilterNode] = field(default_factory=list)


class TaskPlan:
    def __init__(
        self,
        reservoir: Reservoir,
        store: StateStore,
        schema: EventSchema,
        partitioner: str | None = None,
        rebuild_threshold: int = agg.REBUILD_RETRACTIONS,
    ):
        self.reservoir = reservoir
        self.store = store
        self.schema = schema
        self.partitioner = partitioner
        self.rebuild_threshold = rebuild_threshold
        self.windows: dict[WindowSpec, WindowNode] = {}
        self.heads: dict[int, ReservoirIterator] = {}
        self.head_refs: dict[int, int] = {}
        self.queries: dict[str, MetricQuery] = {}
        self._pending_rebuilds: dict[tuple[str, tuple], tuple] = {}

    # -- construction ---------------------------------------------------------

    def add_metric(self, q: MetricQuery, backfill: bool = True) -> None:
        if q.name in self.queries:
            raise PlanError(f"metric {q.name!r} already defined")
        if self.partitioner is not None and q.partitioner != self.partitioner:
            raise PlanError(
                f"query partitioner {q.partitioner!r} incompatible with "
                f"task partitioner {self.partitioner!r}"
            )
        q.validate_against(self.schema)

        wnode = self.windows.get(q.window)
        frontier = self.reservoir.frontier
        f = frontier if frontier is not None else -1
        if wnode is None:
            delay = q.window.delay_ms
            if delay not in self.heads:
                self.heads[delay] = self.reservoir.iterator_at(f - delay, role="head")
                self.head_refs[delay] = 0
            self.head_refs[delay] += 1
            tail = None
            if q.window.kind != "infinite":
                thr = expiry_threshold(q.window, f)
                tail = self.reservoir.iterator_at(thr, role="tail")
            wnode = WindowNode(spec=q.window, tail=tail)
            self.windows[q.window] = wnode

        fnode = next((n for n in wnode.filters if n.expr == q.filter), None)
        if fnode is None:
            fnode = FilterNode(expr=q.filter)
            wnode.filters.append(fnode)

        gnode = next((n for n in fnode.groups if n.fields == q.group_by), None)
        if gnode is None:
            gnode = GroupNode(
                fields=q.group_by,
                indexes=tuple(self.schema.index_of(g) for g in q.group_by),
            )
            fnode.groups.append(gnode)

        leaf = AggLeaf(
            name=q.name,
            kind=q.aggregator,
            field=q.field,
            field_idx=None if q.field is None else self.schema.index_of(q.field),
        )
        gnode.leaves.append(leaf)
        self.queries[q.name] = q

        if backfill and frontier is not None:
            self._backfill(wnode, fnode, gnode, leaf, frontier)

    def _backfill(self, wnode, fnode, gnode, leaf, frontier: int) -> None:
        """Replay the current window content into a freshly added leaf."""
        spec = wnode.spec
        thr = expiry_threshold(spec, frontier)
        upper = frontier - spec.delay_ms
        it = self.reservoir.iterator_at(thr if thr is not None else -(1 << 62))
        while (nxt := it.peek()) is not None and nxt.ts <= upper:
            ev = it.advance()
            values = self._project(ev)
            if fnode.expr is not None and not eval_filter_values(
                fnode.expr, values, self.schema
            ):
                continue
            self._fold(leaf, gnode, values, ev.ts, retract=False)
        it.release()

    def remove_metric(self, name: str) -> None:
        if name not in self.queries:
            raise PlanError(f"unknown metric {name!r}")
        q = self.queries.pop(name)
        wnode = self.windows[q.window]
        for fnode in wnode.filters:
            if fnode.expr != q.filter:
                continue
            for gnode in fnode.groups:
                gnode.leaves = [l for l in gnode.leaves if l.name != name]
            fnode.groups = [g for g in fnode.groups if g.leaves]
        wnode.filters = [f for f in wnode.filters if f.groups]
        if not wnode.filters:
            if wnode.tail is not None:
                wnode.tail.release()
            del self.windows[q.window]
            delay = q.window.delay_ms
            self.head_refs[delay] -= 1
            if self.head_refs[delay] == 0:
                self.heads[delay].release()
                del self.heads[delay]
                del self.head_refs[delay]
        self.store.delete_metric(name)
        self._update_retention()

    def _update_retention(self) -> None:
        spans = []
        for spec in self.windows:
            if spec.kind == "infinite":
                self.reservoir.set_retention(None)
                return
            spans.append(spec.size_ms + spec.delay_ms)
        if spans:
            grace = self.reservoir.config.lateness_grace_ms
            self.reservoir.set_retention(max(spans) + grace)

    # -- execution -------------------------------------------------------------

    def process_event(self, e: Event) -> list[tuple[str, tuple, object]]:
        """Advance all windows to this event's evaluation point.

        The event must already be stored (accepted or rewritten). Returns
        (metric, group_key, value) for each leaf on the event's path.
        """
        frontier = self.reservoir.frontier
        if frontier is None:
            return []
        # arrivals first: a hop larger than a window size must not let a
        # tail cursor pass events its head has not folded in yet
        for delay, head in self.heads.items():
            thr = frontier - delay
            nodes = [w for w in self.windows.values() if w.spec.delay_ms == delay]
            while (nxt := head.peek()) is not None and nxt.ts <= thr:
                ev = head.advance()
                values = self._project(ev)
                for wnode in nodes:
                    self._route(wnode, values, ev.ts, retract=False)
        for wnode in self.windows.values():
            if wnode.tail is None:
                continue
            thr = expiry_threshold(wnode.spec, frontier)
            if thr is None:
                continue
            head = self.heads[wnode.spec.delay_ms]
            while (nxt := wnode.tail.peek()) is not None and nxt.ts <= thr:
                ev = wnode.tail.advance()
                if ev.id in head.skipped:
                    continue  # never applied (landed behind the head cursor)
                values = self._project(ev)
                self._route(wnode, values, ev.ts, retract=True)
        if self._pending_rebuilds:
            for leaf, gnode, group_key in self._pending_rebuilds.values():
                self._rebuild_state(leaf, gnode, group_key)
            self._pending_rebuilds.clear()
        return self._emit(e)

    def current_results(self, e: Event) -> list[tuple[str, tuple, object]]:
        """Results for the event's keys without touching any state."""
        return self._emit(e)

    def _route(self, wnode: WindowNode, values: tuple, ts: int, retract: bool) -> None:
        for fnode in wnode.filters:
            if fnode.expr is not None and not eval_filter_values(
                fnode.expr, values, self.schema
            ):
                continue
            for gnode in fnode.groups:
                for leaf in gnode.leaves:
                    self._fold(leaf, gnode, values, ts, retract)

    def _fold(self, leaf: AggLeaf, gnode: GroupNode, values: tuple, ts: int,
              retract: bool) -> None:
        group_key = tuple(values[i] for i in gnode.indexes)
        if any(v is None for v in group_key):
            return
        if leaf.field_idx is not None:
            v = values[leaf.field_idx]
            if v is None:
                return
        else:
            v = None
        state = self.store.get(StateKey(leaf.name, group_key), leaf.kind)
        if retract:
            agg.agg_retract(leaf.kind, state, v, ts)
            if agg.needs_rebuild(leaf.kind, state, self.rebuild_threshold):
                # rebuilding mid-scan would race the remaining retractions
                # of this pass; run it once the pass is complete
                self._pending_rebuilds[(leaf.name, group_key)] = (
                    leaf, gnode, group_key,
                )
        else:
            agg.agg_apply(leaf.kind, state, v, ts)
        self.store.mark_dirty()

    def _rebuild_state(self, leaf: AggLeaf, gnode: GroupNode, group_key: tuple) -> None:
        """Recompute one key's state from the window's live events,
        clearing accumulated float drift."""
        q = self.queries[leaf.name]
        frontier = self.reservoir.frontier
        thr = expiry_threshold(q.window, frontier)
        upper = frontier - q.window.delay_ms
        fresh = agg.agg_empty(leaf.kind)
        it = self.reservoir.iterator_at(thr if thr is not None else -(1 << 62))
        while (nxt := it.peek()) is not None and nxt.ts <= upper:
            ev = it.advance()
            values = self._project(ev)
            if tuple(values[i] for i in gnode.indexes) != group_key:
                continue
            if q.filter is not None and not eval_filter_values(
                q.filter, values, self.schema
            ):
                continue
            v = values[leaf.field_idx] if leaf.field_idx is not None else None
            if leaf.field_idx is not None and v is None:
                continue
            agg.agg_apply(leaf.kind, fresh, v, ev.ts)
        it.release()
        self.store.put(StateKey(leaf.name, group_key), leaf.kind, fresh)

    def _emit(self, e: Event) -> list[tuple[str, tuple, object]]:
        values = self._project(e)
        out = []
        for wnode in self.windows.values():
            for fnode in wnode.filters:
                if fnode.expr is not None and not eval_filter_values(
                    fnode.expr, values, self.schema
                ):
                    continue
                for gnode in fnode.groups:
                    group_key = tuple(values[i] for i in gnode.indexes)
                    if any(v is None for v in group_key):
                        continue
                    for leaf in gnode.leaves:
                        state = self.store.peek(
                            StateKey(leaf.name, group_key), leaf.kind
                        )
                        out.append((leaf.name, group_key, agg.agg_result(state)))
        return out

    def _project(self, ev: Event) -> tuple:
        if ev.schema_id == self.schema.schema_id:
            return ev.values
        old = self.reservoir.registry.get(ev.schema_id)
        return read_as(ev, old, self.schema)

    # -- introspection -----------------------------------------------------------

    def iterator_count(self) -> int:
        tails = sum(1 for w in self.windows.values() if w.tail is not None)
        return len(self.heads) + tails

    def head_iterator(self, delay_ms: int = 0) -> ReservoirIterator:
        return self.heads[delay_ms]

    def dump(self) -> str:
        """Structured text description: node list plus sharing edges."""
        lines = []
        ids: dict[int, str] = {}

        def mark(obj, prefix):
            key = id(obj)
            if key in ids:
                return ids[key], True
            ids[key] = f"{prefix}{len([k for k in ids.values() if k.startswith(prefix)])}"
            return ids[key], False

        for spec, wnode in self.windows.items():
            wid, _ = mark(wnode, "w")
            size = "inf" if spec.size_ms is None else str(spec.size_ms)
            lines.append(f"window {wid} kind={spec.kind} size={size} delay={spec.delay_ms}")
            for fnode in wnode.filters:
                fid, _ = mark(fnode, "f")
                from .model import render_filter

                text = "*" if fnode.expr is None else render_filter(fnode.expr)
                lines.append(f"  filter {fid} {text}")
                for gnode in fnode.groups:
                    gid, _ = mark(gnode, "g")
                    lines.append(f"    group {gid} by {','.join(gnode.fields)}")
                    for leaf in gnode.leaves:
                        fld = "*" if leaf.field is None else leaf.field
                        lines.append(f"      agg {leaf.kind}({fld}) -> {leaf.name}")
        lines.append(
            f"iterators heads={len(self.heads)} "
            f"tails={sum(1 for w in self.windows.values() if w.tail is not None)}"
        )
        return "\n".join(lines)


def build_plan(
    queries: list[MetricQuery],
    reservoir: Reservoir,
    store: StateStore,
    schema: EventSchema,
    partitioner: str | None = None,
    backfill: bool = True,
    rebuild_threshold: int = agg.REBUILD_RETRACTIONS,
) -> TaskPlan:
    """Compile queries into a prefix-shared DAG; deterministic in input order."""
    plan = TaskPlan(reservoir, store, schema, partitioner, rebuild_threshold)
    for q in queries:
        plan.add_metric(q, backfill=backfill)
    plan._update_retention()
    return plan
