"""Event-driven multiscale tree traversal.

A traversal walks the whole cell cascade top-down and emits, per rank:
enterCell/leaveCell once per cell, and touchVertexFirstTime /
touchVertexLastTime once per vertex (first = before any adjacent cell is
entered, last = after all adjacent cells have been left). Parents are
always entered before and left after their children; child visit order is
fixed to lexicographic offsets for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

from .grid import Cell, GridError, Spacetree, Vertex


@dataclass
class EventHooks:
    """Plug-in surface for movers; every callback is optional.

    The parallel hooks (prepare/merge pairs) are invoked by the simulated
    rank harness around deployed-subtree boundaries, not by the serial
    walker.
    """

    enter_cell: Optional[Callable[[Cell], None]] = None
    leave_cell: Optional[Callable[[Cell], None]] = None
    touch_vertex_first_time: Optional[Callable[[Vertex], None]] = None
    touch_vertex_last_time: Optional[Callable[[Vertex], None]] = None
    prepare_send_to_worker: Optional[Callable] = None
    merge_with_worker: Optional[Callable] = None
    prepare_send_to_master: Optional[Callable] = None
    merge_with_master: Optional[Callable] = None
    merge_with_neighbour: Optional[Callable] = None


@dataclass
class TraversalTrace:
    """Ordered record of (event kind, entity id), a test instrument."""

    events: List[Tuple[str, tuple]] = field(default_factory=list)

    def append(self, kind: str, entity_id: tuple) -> None:
        self.events.append((kind, entity_id))

    def dump(self, path) -> None:
        with open(path, "w") as f:
            for kind, (level, index) in self.events:
                f.write(f"{kind} {level} {' '.join(str(i) for i in index)}\n")


def traverse(
    tree: Spacetree,
    hooks: EventHooks,
    record_trace: bool = False,
    max_depth: int = 20,
) -> Optional[TraversalTrace]:
    """Run one full traversal, firing hooks; returns a trace when requested."""
    trace = TraversalTrace() if record_trace else None
    enter = hooks.enter_cell
    leave = hooks.leave_cell
    tvft = hooks.touch_vertex_first_time
    tvlt = hooks.touch_vertex_last_time
    remaining: dict = {}

    def visit(cell: Cell, depth: int) -> None:
        if depth > max_depth:
            raise GridError(f"traversal exceeded max depth {max_depth}")
        for v in cell.vertices:
            r = remaining.get(v.id)
            if r is None:
                remaining[v.id] = v.n_existing
                if trace is not None:
                    trace.append("touchVertexFirstTime", v.id)
                if tvft is not None:
                    tvft(v)
        if trace is not None:
            trace.append("enterCell", cell.id)
        if enter is not None:
            enter(cell)
        if cell.refined:
            for child in cell.children:
                visit(child, depth + 1)
        if trace is not None:
            trace.append("leaveCell", cell.id)
        if leave is not None:
            leave(cell)
        for v in cell.vertices:
            remaining[v.id] -= 1
            if remaining[v.id] == 0:
                if trace is not None:
                    trace.append("touchVertexLastTime", v.id)
                if tvlt is not None:
                    tvlt(v)

    visit(tree.root, 0)
    return trace


def check_ordering(trace: TraversalTrace, tree: Spacetree) -> bool:
    """True iff the trace satisfies the partial temporal access order:
    parents entered before / left after children, enter before leave, and
    each vertex touched first before any adjacent enterCell and last after
    every adjacent leaveCell, exactly once each."""
    enter_pos: dict = {}
    leave_pos: dict = {}
    first_pos: dict = {}
    last_pos: dict = {}
    for pos, (kind, eid) in enumerate(trace.events):
        table = {
            "enterCell": enter_pos,
            "leaveCell": leave_pos,
            "touchVertexFirstTime": first_pos,
            "touchVertexLastTime": last_pos,
        }[kind]
        if eid in table:
            return False  # duplicate event
        table[eid] = pos

    for cid, cell in tree.cells.items():
        if cid not in enter_pos or cid not in leave_pos:
            return False
        if enter_pos[cid] >= leave_pos[cid]:
            return False
        if cell.parent is not None:
            pid = cell.parent.id
            if enter_pos[pid] >= enter_pos[cid]:
                return False
            if leave_pos[cid] >= leave_pos[pid]:
                return False

    for vid, vertex in tree.vertices.items():
        if vid not in first_pos or vid not in last_pos:
            return False
        for cid in vertex.adjacency:
            if first_pos[vid] >= enter_pos[cid]:
                return False
            if last_pos[vid] <= leave_pos[cid]:
                return False
    return True
