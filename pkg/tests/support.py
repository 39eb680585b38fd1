"""Shared test helpers: independent checkers for the assignment strategy."""

from __future__ import annotations

import random

from railgun.assignment import (
    Assignment,
    ClusterView,
    ProcessorInfo,
    TaskDescriptor,
    assign,
    compute_budget,
    view_after,
)


def check_invariants(view: ClusterView, assignment: Assignment, tasks):
    """I1 node-uniqueness, I2 budget, exclusive active ownership."""
    node = {p.processor_id: p.node_id for p in view.processors}
    load = {p.processor_id: 0 for p in view.processors}
    for task in tasks:
        holders = assignment.holders(task)
        nodes = [node[pid] for pid in holders]
        assert len(nodes) == len(set(nodes)), f"I1 violated for {task}"
        for pid in holders:
            load[pid] += view.weight(task)
    for pid, l in load.items():
        assert l <= assignment.budget, f"I2 violated for {pid}"
    if view.processors:
        for task in tasks:
            assert task in assignment.active, f"no active owner for {task}"
    copies = {t: len(assignment.holders(t)) for t in tasks}
    for t, n in copies.items():
        expected = view.replication - sum(
            1 for ut, _ in assignment.unplaced if ut == t
        )
        assert n == expected


def check_rule_priority(view: ClusterView, assignment: Assignment, tasks):
    """Replays the placement sequence and asserts each placement used the
    best admissible rule at that moment (independent re-derivation)."""
    node = {p.processor_id: p.node_id for p in view.processors}
    alive = set(node)
    budget = assignment.budget
    load = {pid: 0 for pid in alive}
    nodes_used = {t: set() for t in tasks}

    def admissible(task, pid):
        return (
            load[pid] + view.weight(task) <= budget
            and node[pid] not in nodes_used[task]
        )

    def rules_for(task, for_active):
        out = []
        if for_active:
            prev = view.prev_active.get(task)
            out.append((1, [prev] if prev in alive else []))
            out.append((2, [p for p in view.prev_replicas.get(task, ())
                            if p in alive]))
        else:
            holders = set(view.prev_replicas.get(task, ()))
            if task in view.prev_active:
                holders.add(view.prev_active[task])
            out.append((2, [p for p in holders if p in alive]))
        out.append((3, [p for p in view.stale.get(task, {}) if p in alive]))
        out.append((4, sorted(alive)))
        return out

    def verify(task, pid, for_active, taken):
        used_rule = assignment.rules[(task, pid)]
        for rule, candidates in rules_for(task, for_active):
            if rule >= used_rule:
                break
            for cand in candidates:
                if cand in taken:
                    continue
                assert not admissible(task, cand), (
                    f"{task} placed by rule {used_rule} on {pid} while rule "
                    f"{rule} candidate {cand} was admissible"
                )

    for task in sorted(tasks):
        pid = assignment.active.get(task)
        if pid is None:
            continue
        verify(task, pid, True, taken=set())
        load[pid] += view.weight(task)
        nodes_used[task].add(node[pid])
    for task in sorted(tasks):
        taken = {assignment.active.get(task)}
        for pid in assignment.replicas.get(task, ()):
            verify(task, pid, False, taken=taken)
            load[pid] += view.weight(task)
            nodes_used[task].add(node[pid])
            taken.add(pid)


def random_cluster(rng: random.Random, n_nodes: int, procs_per_node: int):
    return tuple(
        ProcessorInfo(f"n{n:02d}-p{p}", f"n{n:02d}")
        for n in range(n_nodes)
        for p in range(procs_per_node)
    )


def churn_rounds(seed: int, rounds: int, max_nodes=16, max_procs=8,
                 task_count=24):
    """Yields (view, tasks, assignment) across randomized membership churn."""
    rng = random.Random(seed)
    tasks = [TaskDescriptor("t", p) for p in range(task_count)]
    r = rng.choice((1, 2, 3))
    n_nodes = rng.randint(2, max_nodes)
    procs_per_node = rng.randint(1, max_procs)
    view = ClusterView(
        processors=random_cluster(rng, n_nodes, procs_per_node),
        replication=r,
    )
    for _ in range(rounds):
        assignment = assign(view, tasks)
        yield view, tasks, assignment
        view = view_after(view, assignment)
        action = rng.random()
        procs = list(view.processors)
        nodes = sorted({p.node_id for p in procs})
        if action < 0.45 and len(nodes) > 2:
            doomed = rng.choice(nodes)
            procs = [p for p in procs if p.node_id != doomed]
        elif action < 0.9 and len(nodes) < max_nodes:
            new_id = f"n{rng.randrange(100, 999)}"
            procs.extend(
                ProcessorInfo(f"{new_id}-p{k}", new_id)
                for k in range(rng.randint(1, max_procs))
            )
        view = ClusterView(
            processors=tuple(procs),
            replication=view.replication,
            prev_active=view.prev_active,
            prev_replicas=view.prev_replicas,
            stale=view.stale,
            holder_checkpoints=view.holder_checkpoints,
            weights=view.weights,
            generation=view.generation,
        )
