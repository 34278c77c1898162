"""Traversal event ordering: the partial order on enter/leave plus the
first/last vertex-touch contracts, fuzzed over random trees."""

import numpy as np
import pytest

from treeparticles.grid import Spacetree
from treeparticles.traversal import EventHooks, TraversalTrace, check_ordering, traverse


def random_tree(rng, dim=2, levels=3, p=0.4):
    tree = Spacetree(dim=dim)
    tree.refine(tree.root.id)
    for _ in range(levels - 1):
        for cell in list(tree.leaves()):
            if rng.random() < p:
                tree.refine(cell.id)
    return tree


def test_single_root_trace():
    tree = Spacetree(dim=2)
    trace = traverse(tree, EventHooks(), record_trace=True)
    kinds = [k for k, _ in trace.events]
    assert kinds[:4] == ["touchVertexFirstTime"] * 4
    assert kinds[4:6] == ["enterCell", "leaveCell"]
    assert kinds[6:] == ["touchVertexLastTime"] * 4


def test_once_refined_tree_passes_ordering():
    tree = Spacetree(dim=2)
    tree.refine(tree.root.id)
    trace = traverse(tree, EventHooks(), record_trace=True)
    assert check_ordering(trace, tree)


def test_empty_hooks_leave_tree_unchanged():
    tree = Spacetree(dim=2)
    tree.refine(tree.root.id)
    cells = set(tree.cells)
    traverse(tree, EventHooks())
    assert set(tree.cells) == cells


def test_event_counts_exactly_once():
    rng = np.random.default_rng(2)
    tree = random_tree(rng)
    trace = traverse(tree, EventHooks(), record_trace=True)
    enters = [e for k, e in trace.events if k == "enterCell"]
    firsts = [e for k, e in trace.events if k == "touchVertexFirstTime"]
    assert sorted(enters) == sorted(tree.cells)
    assert sorted(firsts) == sorted(tree.vertices)


def test_corrupted_trace_rejected():
    tree = Spacetree(dim=2)
    tree.refine(tree.root.id)
    trace = traverse(tree, EventHooks(), record_trace=True)
    bad = TraversalTrace(events=list(trace.events))
    # move a child's enterCell ahead of the root's
    idx_root = next(i for i, (k, e) in enumerate(bad.events) if k == "enterCell")
    idx_child = next(
        i for i, (k, e) in enumerate(bad.events) if k == "enterCell" and e[0] == 1
    )
    bad.events[idx_root], bad.events[idx_child] = bad.events[idx_child], bad.events[idx_root]
    assert not check_ordering(bad, tree)


def test_determinism():
    rng = np.random.default_rng(3)
    tree = random_tree(rng)
    t1 = traverse(tree, EventHooks(), record_trace=True)
    t2 = traverse(tree, EventHooks(), record_trace=True)
    assert t1.events == t2.events


def test_hook_error_aborts_traversal():
    tree = Spacetree(dim=2)
    tree.refine(tree.root.id)

    def boom(cell):
        if cell.level == 1:
            raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        traverse(tree, EventHooks(enter_cell=boom))


@pytest.mark.parametrize("dim", [2, 3])
def test_fuzz_random_trees(dim):
    rng = np.random.default_rng(7 + dim)
    for trial in range(30):
        tree = random_tree(rng, dim=dim, levels=3, p=0.35)
        seen = []
        hooks = EventHooks(
            enter_cell=lambda c: seen.append(c.id),
            touch_vertex_last_time=lambda v: seen.append(v.id),
        )
        trace = traverse(tree, hooks, record_trace=True)
        assert check_ordering(trace, tree)


def test_trace_dump(tmp_path):
    tree = Spacetree(dim=2)
    trace = traverse(tree, EventHooks(), record_trace=True)
    path = tmp_path / "trace.txt"
    trace.dump(path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == len(trace.events)
    assert lines[4] == "enterCell 0 0 0"
