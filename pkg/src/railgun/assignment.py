"""Sticky active/replica task assignment with locality and budget caps.

Work is placed greedily in two phases (actives first, then replica
copies). Each copy tries, in order: the processor that held it last, a
processor holding one of its previous replicas, a processor with stale
leftovers of it, and finally the processor with the most spare budget.
A placement is admissible only if it keeps every copy of a task on a
distinct physical node (I1) and stays under the per-processor budget
(I2). Ties break by load then processor id, so the result is a pure
deterministic function of the view.

The recovery planner classifies how much data a new holder must fetch:
nothing (it already had the task live), a delta since its own stale
checkpoint, or a full copy from the freshest surviving holder (or a
full log replay when nobody survived).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

STALE_KEEP_GENERATIONS = 4

RULE_PREVIOUS_OWNER = 1
RULE_PREVIOUS_REPLICA = 2
RULE_STALE_HOLDER = 3
RULE_MOST_BUDGET = 4


@dataclass(frozen=True, order=True)
class TaskDescriptor:
    topic: str
    partition: int


@dataclass(frozen=True)
class ProcessorInfo:
    processor_id: str
    node_id: str


@dataclass(frozen=True)
class StaleHolding:
    checkpoint_id: int
    age: int = 0  # rebalance generations since revocation


@dataclass
class ClusterView:
    processors: tuple[ProcessorInfo, ...]
    replication: int = 1
    prev_active: dict = field(default_factory=dict)    # task -> pid
    prev_replicas: dict = field(default_factory=dict)  # task -> frozenset[pid]
    stale: dict = field(default_factory=dict)          # task -> {pid: StaleHolding}
    holder_checkpoints: dict = field(default_factory=dict)  # (task, pid) -> ckpt id
    weights: dict = field(default_factory=dict)        # task -> int, default 1
    generation: int = 0

    def node_of(self, pid: str) -> str:
        for p in self.processors:
            if p.processor_id == pid:
                return p.node_id
        raise KeyError(pid)

    def alive(self, pid: str) -> bool:
        return any(p.processor_id == pid for p in self.processors)

    def weight(self, task: TaskDescriptor) -> int:
        return self.weights.get(task, 1)

    def previous_holders(self, task: TaskDescriptor) -> set:
        holders = set(self.prev_replicas.get(task, ()))
        if task in self.prev_active:
            holders.add(self.prev_active[task])
        return holders


@dataclass
class Assignment:
    active: dict          # task -> pid
    replicas: dict        # task -> tuple[pid, ...]
    budgets: dict         # pid -> remaining budget
    budget: int
    unplaced: list        # [(task, "replica")] copies that found no legal spot
    rules: dict           # (task, pid) -> rule number used

    def holders(self, task: TaskDescriptor) -> set:
        out = {self.active[task]} if task in self.active else set()
        out |= set(self.replicas.get(task, ()))
        return out


def compute_budget(total_task_copies: int, processor_count: int) -> int:
    """Per-processor cap; ceiling keeps n*r copies always placeable."""
    if processor_count <= 0:
        raise ValueError("processor_count must be > 0")
    return math.ceil(total_task_copies / processor_count)


def assign(view: ClusterView, tasks: list[TaskDescriptor]) -> Assignment:
    procs = sorted(view.processors, key=lambda p: p.processor_id)
    if not procs:
        return Assignment({}, {}, {}, 0, [(t, "active") for t in tasks], {})
    tasks = sorted(tasks)
    total_copies = sum(view.weight(t) for t in tasks) * view.replication
    budget = compute_budget(total_copies, len(procs))
    load = {p.processor_id: 0 for p in procs}
    node = {p.processor_id: p.node_id for p in procs}
    nodes_used: dict[TaskDescriptor, set] = {t: set() for t in tasks}

    active: dict = {}
    replicas: dict = {t: [] for t in tasks}
    rules: dict = {}
    unplaced: list = []

    def admissible(task, pid):
        return (
            load[pid] + view.weight(task) <= budget
            and node[pid] not in nodes_used[task]
        )

    def place(task, pid, rule):
        load[pid] += view.weight(task)
        nodes_used[task].add(node[pid])
        rules[(task, pid)] = rule

    def by_load(pids):
        return sorted(pids, key=lambda pid: (load[pid], pid))

    # phase 1: actives
    for task in tasks:
        placed = False
        for rule, candidates in _candidate_rules(view, task, load, budget, procs,
                                                 for_active=True):
            for pid in candidates:
                if admissible(task, pid):
                    active[task] = pid
                    place(task, pid, rule)
                    placed = True
                    break
            if placed:
                break
        if not placed:
            unplaced.append((task, "active"))

    # phase 2: replica copies
    for task in tasks:
        for _ in range(view.replication - 1):
            placed = False
            for rule, candidates in _candidate_rules(view, task, load, budget,
                                                     procs, for_active=False):
                for pid in candidates:
                    if pid in replicas[task] or pid == active.get(task):
                        continue
                    if admissible(task, pid):
                        replicas[task].append(pid)
                        place(task, pid, rule)
                        placed = True
                        break
                if placed:
                    break
            if not placed:
                unplaced.append((task, "replica"))

    return Assignment(
        active=active,
        replicas={t: tuple(r) for t, r in replicas.items()},
        budgets={pid: budget - l for pid, l in load.items()},
        budget=budget,
        unplaced=unplaced,
        rules=rules,
    )


def _candidate_rules(view, task, load, budget, procs, for_active):
    """Yield (rule, ordered candidate pids) in priority order."""

    def by_load(pids):
        return sorted(pids, key=lambda pid: (load[pid], pid))

    alive = {p.processor_id for p in procs}
    if for_active:
        prev = view.prev_active.get(task)
        if prev is not None and prev in alive:
            yield RULE_PREVIOUS_OWNER, [prev]
        prev_reps = [pid for pid in view.prev_replicas.get(task, ()) if pid in alive]
        if prev_reps:
            yield RULE_PREVIOUS_REPLICA, by_load(prev_reps)
    else:
        holders = [pid for pid in view.previous_holders(task) if pid in alive]
        if holders:
            yield RULE_PREVIOUS_REPLICA, by_load(holders)
    stale = [pid for pid in view.stale.get(task, {}) if pid in alive]
    if stale:
        yield RULE_STALE_HOLDER, by_load(stale)
    yield RULE_MOST_BUDGET, sorted(
        alive, key=lambda pid: (-(budget - load[pid]), pid)
    )


# --------------------------------------------------------------------------
# Recovery planning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RecoveryPlan:
    task: TaskDescriptor
    destination: str
    source: str | None
    mode: str  # none | delta | full
    since_checkpoint: int | None = None


def plan_recovery(task: TaskDescriptor, destination: str,
                  view: ClusterView) -> RecoveryPlan:
    """How much data the new holder must move before consuming."""
    if destination in view.previous_holders(task):
        return RecoveryPlan(task, destination, None, "none")
    newest_pid, newest_ckpt = _freshest_live_holder(task, view)
    stale_entry = view.stale.get(task, {}).get(destination)
    if stale_entry is not None:
        source = None
        if newest_pid is not None and newest_ckpt > stale_entry.checkpoint_id:
            source = newest_pid
        return RecoveryPlan(task, destination, source, "delta",
                            since_checkpoint=stale_entry.checkpoint_id)
    # full copy from the freshest holder, or full log replay when none survive
    return RecoveryPlan(task, destination, newest_pid, "full")


def _freshest_live_holder(task, view):
    best_pid, best_ckpt = None, -1
    for pid in sorted(view.previous_holders(task)):
        if not view.alive(pid):
            continue
        ckpt = view.holder_checkpoints.get((task, pid), 0)
        if ckpt > best_ckpt:
            best_pid, best_ckpt = pid, ckpt
    return best_pid, best_ckpt


def record_revocation(view: ClusterView, task: TaskDescriptor,
                      pid: str) -> ClusterView:
    """A holder lost the task: its data stays behind as a stale holding."""
    ckpt = view.holder_checkpoints.get((task, pid), 0)
    stale = {t: dict(holders) for t, holders in view.stale.items()}
    stale.setdefault(task, {})[pid] = StaleHolding(checkpoint_id=ckpt)
    prev_active = dict(view.prev_active)
    if prev_active.get(task) == pid:
        del prev_active[task]
    prev_replicas = dict(view.prev_replicas)
    if task in prev_replicas:
        prev_replicas[task] = frozenset(
            p for p in prev_replicas[task] if p != pid
        )
    return replace(view, stale=stale, prev_active=prev_active,
                   prev_replicas=prev_replicas)


def view_after(view: ClusterView, assignment: Assignment,
               stale_keep: int = STALE_KEEP_GENERATIONS) -> ClusterView:
    """Roll the view forward past an applied assignment.

    Live holders that lost a task become stale holders; stale entries age
    and expire after ``stale_keep`` generations (their data is eligible
    for garbage collection).
    """
    stale: dict = {}
    tasks = set(view.prev_active) | set(view.prev_replicas) | set(view.stale)
    tasks |= set(assignment.active) | set(assignment.replicas)
    for task in tasks:
        now_holding = assignment.holders(task)
        entry: dict = {}
        for pid, holding in view.stale.get(task, {}).items():
            if pid in now_holding or not view.alive(pid):
                continue
            if holding.age + 1 < stale_keep:
                entry[pid] = StaleHolding(holding.checkpoint_id, holding.age + 1)
        for pid in view.previous_holders(task):
            if pid in now_holding or not view.alive(pid):
                continue
            ckpt = view.holder_checkpoints.get((task, pid), 0)
            entry[pid] = StaleHolding(checkpoint_id=ckpt)
        if entry:
            stale[task] = entry
    return replace(
        view,
        prev_active=dict(assignment.active),
        prev_replicas={t: frozenset(r) for t, r in assignment.replicas.items()},
        stale=stale,
        generation=view.generation + 1,
    )
