"""Simulated distributed-memory execution of the tree movers.

Ranks are simulated in-process with deterministic scheduling. The grid
topology is shared (modeling synchronized grid metadata); particle state is
strictly partitioned into per-rank stores and moves only through logged,
exactly-once messages:

  * startup / particleDrop: master -> worker, synchronous, carries the
    particles dropped into a deployed subtree; the worker's sub-traversal
    runs nested between the master's enter and leave of that cell.
  * reduction / particleLift: worker -> master at sub-traversal end,
    carries the particles lifted out of the subtree. The reduction-avoiding
    mover skips both entirely for subtrees whose analysed velocity bound
    proves no lift can escape.
  * boundaryParticles: asynchronous vertex-neighbourhood exchange, sent
    during traversal t and merged before traversal t+1.
  * notification: zero-particle protocol floors (per-subtree velocity-bound
    reports, SFC completion signals).
  * sievePayload: the cyclic ring hops of the sieve baseline.

The SFC-cut and sieve baselines run PIT locally on a replicated ancestor
spine and route escapees directly (cut-table lookup) or around the ring.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .grid import Cell, GridError, ParticleBlock, ParticleStore, Spacetree
from .movers import (
    LinkedCellMover,
    Mover,
    MoverError,
    MoverKind,
    PitMover,
    SortStats,
    StepContext,
    make_mover,
)


class HarnessFault(Exception):
    pass


# ---------------------------------------------------------------------------
# colouring
# ---------------------------------------------------------------------------


@dataclass
class Coloring:
    num_ranks: int
    col: Dict[tuple, int]
    master_of: Dict[int, int]
    local_roots: Dict[int, List[tuple]]
    root_level: Dict[int, int]


def _dfs_leaves(tree: Spacetree) -> List[Cell]:
    out: List[Cell] = []

    def walk(cell: Cell) -> None:
        if cell.refined:
            for ch in cell.children:
                walk(ch)
        else:
            out.append(cell)

    walk(tree.root)
    return out


def decompose(tree: Spacetree, num_ranks: int) -> Coloring:
    """Static multiscale decomposition.

    Leaves are split into near-equal contiguous depth-first ranges; coarse
    cells take the colour of their first descendant leaf. A range that
    starts strictly inside a subtree but extends beyond it would give its
    rank two masters, so such leading fragments are donated to the
    predecessor rank until the worker-of relation is single-valued (this is
    the ±1-subtree granularity of the split).
    """
    if num_ranks < 1:
        raise HarnessFault(f"numRanks must be >= 1, got {num_ranks}")
    if num_ranks > tree.leaf_count:
        raise HarnessFault(
            f"numRanks={num_ranks} exceeds leaf count {tree.leaf_count}"
        )
    leaves = _dfs_leaves(tree)
    n = len(leaves)
    assign = np.empty(n, dtype=np.int64)
    for r in range(num_ranks):
        assign[round(r * n / num_ranks) : round((r + 1) * n / num_ranks)] = r

    # first-leaf index per cell in one DFS
    first_leaf: Dict[tuple, int] = {}

    def fill_first(cell: Cell, pos: int) -> int:
        first_leaf[cell.id] = pos
        if not cell.refined:
            return pos + 1
        for ch in cell.children:
            pos = fill_first(ch, pos)
        return pos

    fill_first(tree.root, 0)

    def colour_of(cell: Cell) -> int:
        return int(assign[first_leaf[cell.id]])

    def find_conflict() -> Optional[int]:
        master: Dict[int, int] = {}
        for cell in tree.cells.values():
            if cell.parent is None:
                continue
            a, b = colour_of(cell), colour_of(cell.parent)
            if a == b:
                continue
            if a in master and master[a] != b:
                return a
            master[a] = b
        return None

    while True:
        w = find_conflict()
        if w is None:
            break
        f = int(np.argmax(assign == w))  # first leaf of rank w
        if f == 0:
            raise HarnessFault("rank 0 cannot be repaired (internal error)")
        # deepest strict ancestor of leaf f not coloured w: donate w's leaves
        # inside it to the predecessor rank so w starts at its boundary
        anc = leaves[f].parent
        target = None
        while anc is not None:
            if colour_of(anc) != w:
                target = anc
                break
            anc = anc.parent
        if target is None:
            raise HarnessFault("conflicted rank has no donor subtree (internal error)")
        start = first_leaf[target.id]
        span = _subtree_leaf_count(target)
        end = start + span
        donor = int(assign[f - 1])
        sel = np.arange(f, min(end, n))
        sel = sel[assign[sel] == w]
        if len(sel) == len(np.nonzero(assign == w)[0]):
            raise HarnessFault("repair would starve a rank (internal error)")
        assign[sel] = donor

    col: Dict[tuple, int] = {}
    for cell in tree.cells.values():
        col[cell.id] = colour_of(cell)

    master_of: Dict[int, int] = {}
    for cid, cell in tree.cells.items():
        if cell.parent is None:
            continue
        a, b = col[cid], col[cell.parent.id]
        if a != b:
            master_of[a] = b

    local_roots: Dict[int, List[tuple]] = defaultdict(list)
    for cid, cell in tree.cells.items():
        r = col[cid]
        if cell.parent is None or col[cell.parent.id] != r:
            local_roots[r].append(cid)
    for roots in local_roots.values():
        roots.sort()
    root_level = {r: min(c[0] for c in roots) for r, roots in local_roots.items()}

    for cid, r in col.items():
        tree.cells[cid].rank = r

    coloring = Coloring(num_ranks, col, dict(master_of), dict(local_roots), root_level)
    if not check_coloring(tree, coloring):
        raise HarnessFault("decomposition failed its own validity check")
    return coloring


def _subtree_leaf_count(cell: Cell) -> int:
    if not cell.refined:
        return 1
    return sum(_subtree_leaf_count(ch) for ch in cell.children)


def check_coloring(tree: Spacetree, coloring: Coloring) -> bool:
    """Eq.-(worker-of) validity: unique ownership, single master per rank,
    acyclic master chains reaching rank 0, and each rank's leaves forming a
    contiguous run (whole sibling subtrees) in depth-first order."""
    col = coloring.col
    if any(cid not in col for cid in tree.cells):
        return False
    if col[tree.root.id] != 0:
        return False
    master: Dict[int, int] = {}
    for cid, cell in tree.cells.items():
        if cell.parent is None:
            continue
        a, b = col[cid], col[cell.parent.id]
        if a == b:
            continue
        if a in master and master[a] != b:
            return False
        master[a] = b
    if set(master) != set(range(1, coloring.num_ranks)) and coloring.num_ranks > 1:
        return False
    for w, m in master.items():
        seen = {w}
        cur = m
        while cur != 0:
            if cur in seen or cur not in master:
                return False
            seen.add(cur)
            cur = master[cur]
    # contiguity of leaves per rank in DFS order
    order = []

    def walk(cell: Cell) -> None:
        if cell.refined:
            for ch in cell.children:
                walk(ch)
        else:
            order.append(col[cell.id])

    walk(tree.root)
    seen_done = set()
    prev = None
    for r in order:
        if r != prev:
            if r in seen_done:
                return False
            if prev is not None:
                seen_done.add(prev)
            prev = r
    return True


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------

MESSAGE_KINDS = (
    "particleLift",
    "particleDrop",
    "boundaryParticles",
    "startup",
    "reduction",
    "notification",
    "sievePayload",
)


@dataclass
class Message:
    step: int
    phase: str
    kind: str
    src: int
    dst: int
    entity: Optional[tuple]
    count: int


@dataclass
class MessageStats:
    envelopes: Dict[str, int] = field(default_factory=lambda: {k: 0 for k in MESSAGE_KINDS})
    payload: Dict[str, int] = field(default_factory=lambda: {k: 0 for k in MESSAGE_KINDS})

    def note(self, msg: Message) -> None:
        self.envelopes[msg.kind] += 1
        self.payload[msg.kind] += msg.count


# ---------------------------------------------------------------------------
# the rank harness
# ---------------------------------------------------------------------------


def _block_vmax(block: ParticleBlock) -> float:
    return float(np.abs(block.v).max()) if len(block) else 0.0


class RankHarness:
    """N simulated ranks around one shared grid topology.

    Particle state lives in per-rank stores; every cross-rank movement is a
    logged message. Scheduling is deterministic: the rank tree is executed
    depth-first, worker traversals nested between the master's enter and
    leave of the deployed cell.
    """

    def __init__(self, tree: Spacetree, coloring: Coloring, mover: Mover,
                 shuffle_async: Optional[np.random.Generator] = None):
        self.tree = tree
        self.coloring = coloring
        self.mover = mover
        self.stores: Dict[int, ParticleStore] = {
            r: ParticleStore(tree.dim) for r in range(coloring.num_ranks)
        }
        self.message_log: List[Message] = []
        self.staged: List[Tuple[int, int, tuple, ParticleBlock]] = []  # src,dst,vid,block
        self.step_index = 0
        self.pending_vmax_master: Dict[tuple, float] = {}
        self.pending_vmax_worker: Dict[tuple, float] = {}
        self.skip_decisions: Dict[tuple, bool] = {}  # deployed cell -> lifts expected
        self.shuffle_async = shuffle_async
        self.last_checksum = 0.0
        # transient per-step state
        self._ctxs: Dict[int, StepContext] = {}
        self._remaining: Dict[int, dict] = {}
        self._drop_buffers: Dict[Tuple[int, tuple], list] = {}
        self._lift_buffers: Dict[tuple, list] = {}
        self._current_channel: Dict[int, Optional[tuple]] = {}
        self._msg_stats: Optional[MessageStats] = None
        self._local_vertices: Dict[int, frozenset] = {}
        self._local_vertices_version = -1

    def _rank_vertex_sets(self) -> Dict[int, frozenset]:
        """Per rank: ids of the vertices adjacent to at least one owned cell
        (the vertex copies that rank holds)."""
        if self._local_vertices_version != self.tree.version:
            sets: Dict[int, set] = defaultdict(set)
            for cell in self.tree.cells.values():
                sets[cell.rank].update(cell.vertex_ids)
            self._local_vertices = {r: frozenset(s) for r, s in sets.items()}
            self._local_vertices_version = self.tree.version
        return self._local_vertices

    # -- seeding -----------------------------------------------------------

    def seed(self, block: ParticleBlock) -> None:
        """Distribute an initial particle block to stable hosts and owners."""
        tree = self.tree

        def place(cell: Cell, blk: ParticleBlock) -> None:
            if cell.refined:
                codes = cell.child_codes(blk.x)
                for code in np.unique(codes):
                    m = codes == code
                    place(
                        cell.children[code],
                        ParticleBlock(blk.ids[m], blk.x[m], blk.v[m], blk.stamp[m]),
                    )
                return
            rank = cell.rank
            store = self.stores[rank]
            if self.mover.storage == "cell":
                store.cell_block(cell.id, create=True).append(blk)
            else:
                idx = tree.owning_indices(blk.x, cell.level)
                packed = idx[:, 0].astype(np.int64)
                for a in range(1, idx.shape[1]):
                    packed = packed * (1 << 21) + idx[:, a]
                for code in np.unique(packed):
                    m = packed == code
                    vid = (cell.level, tuple(idx[np.argmax(m)]))
                    sub = ParticleBlock(blk.ids[m], blk.x[m], blk.v[m], blk.stamp[m])
                    vertex = tree.vertices.get(vid)
                    if vertex is not None and not vertex.hanging:
                        store.vertex_block(vid, create=True).append(sub)
                    else:
                        for host, hsub in tree.group_by_stable_vertex(sub, cell.level):
                            # a dual cell spans several cells: owner per particle
                            for i in range(len(hsub)):
                                owner = self._containing_cell(hsub.x[i], host[0]).rank
                                one = ParticleBlock(
                                    hsub.ids[i : i + 1],
                                    hsub.x[i : i + 1],
                                    hsub.v[i : i + 1],
                                    hsub.stamp[i : i + 1],
                                )
                                self.stores[owner].vertex_block(
                                    host, create=True
                                ).append(one)

        if len(block):
            place(tree.root, block)

    def _containing_cell(self, x, level: int) -> Cell:
        cid = self.tree.leaf_containing(x)
        cell = self.tree.cells[cid]
        while cell.level > level:
            cell = cell.parent
        return cell

    # -- messaging ---------------------------------------------------------

    def _log(self, phase: str, kind: str, src: int, dst: int, entity, count: int) -> None:
        if not (0 <= dst < self.coloring.num_ranks and 0 <= src < self.coloring.num_ranks):
            raise HarnessFault(f"message to nonexistent rank {src}->{dst}")
        msg = Message(self.step_index, phase, kind, src, dst, entity, count)
        self.message_log.append(msg)
        self._msg_stats.note(msg)

    def dump_message_trace(self, path) -> None:
        with open(path, "w") as f:
            for m in self.message_log:
                f.write(
                    f"{m.step} {m.phase} {m.kind} {m.src} {m.dst} {m.count}\n"
                )

    # -- the step ------------------------------------------------------------

    def step(self, dt: float, push_enabled: bool = True) -> Tuple[SortStats, MessageStats]:
        tree = self.tree
        coloring = self.coloring
        mover = self.mover
        self.step_index += 1
        self._msg_stats = MessageStats()
        self._drop_buffers = {}
        self._lift_buffers = {}
        self._current_channel = {r: None for r in range(coloring.num_ranks)}
        self.skip_decisions = {}

        mover.pre_step(tree, list(self.stores.values()), dt)

        # deliver last step's asynchronous boundary exchange
        staged = self.staged
        self.staged = []
        if self.shuffle_async is not None and len(staged) > 1:
            order = self.shuffle_async.permutation(len(staged))
            staged = [staged[i] for i in order]
        for src, dst, vid, blk in staged:
            self.stores[dst].vertex_block(vid, create=True).append(blk)

        # per-rank contexts with routing callbacks; epochs advance in lockstep
        for store in self.stores.values():
            store.epoch += 1
        self._ctxs = {}
        self._remaining = {r: {} for r in range(coloring.num_ranks)}
        multi = coloring.num_ranks > 1
        vertex_sets = self._rank_vertex_sets()
        for r in range(coloring.num_ranks):
            ctx = StepContext(
                tree,
                self.stores[r],
                dt,
                flops=mover.flops,
                verify=mover.verify,
                rank=r,
                local_vertices=vertex_sets.get(r, frozenset()),
                push_enabled=push_enabled,
            )
            if multi:
                ctx.deliver_drop = self._make_deliver_drop(r)
                ctx.deliver_lift = self._make_deliver_lift(r)
                ctx.vertex_open = self._make_vertex_open(r)
                if mover.storage == "vertex":
                    ctx.deliver_boundary = self._make_deliver_boundary(r)
            self._ctxs[r] = ctx

        self._hooks = {r: mover.make_hooks(self._ctxs[r]) for r in range(coloring.num_ranks)}
        self._walk(0, tree.root)

        # wrap-up: reduction-avoidance bookkeeping for the next step
        if getattr(mover, "needs_vmax", False) and multi:
            self._wrapup_vmax_reports(dt)

        total = SortStats()
        checksum = 0.0
        for r in range(coloring.num_ranks):
            total.add(self._ctxs[r].finalize())
            checksum += self._ctxs[r].checksum
            self.stores[r].prune()
        self.last_checksum = checksum
        return total, self._msg_stats

    def settle(self) -> SortStats:
        stats, _ = self.step(0.0, push_enabled=False)
        return stats

    # -- routing callbacks ---------------------------------------------------

    def _make_deliver_drop(self, rank: int):
        def deliver(child: Cell, target, block: ParticleBlock) -> None:
            # the channel is the deployment frame of the deployed cell the
            # particles descend into; a target vertex alone is ambiguous when
            # it sits on the boundary of several of the worker's subtrees
            dst_rank = child.rank
            for root_id in self.coloring.local_roots[dst_rank]:
                if self._entity_within(("cell", child.id), root_id):
                    self._drop_buffers.setdefault((dst_rank, root_id), []).append(
                        (target, block)
                    )
                    return
            raise HarnessFault(f"drop into {child.id} misses every root of rank {dst_rank}")

        return deliver

    def _make_deliver_lift(self, rank: int):
        def deliver(from_entity, target, block: ParticleBlock) -> None:
            channel = self._current_channel[rank]
            if channel is None:
                raise HarnessFault(f"lift out of rank {rank} outside a deployed traversal")
            self._lift_buffers.setdefault(channel, []).append((target, block))

        return deliver

    def _make_deliver_boundary(self, rank: int):
        def deliver(dst_rank: int, vid: tuple, block: ParticleBlock) -> None:
            self._log("traversal", "boundaryParticles", rank, dst_rank, vid, len(block))
            self.staged.append((rank, dst_rank, vid, block))

        return deliver

    def _make_vertex_open(self, rank: int):
        remaining = self._remaining

        def vertex_open(vid: tuple) -> bool:
            # live = this rank has touched the vertex and will still process
            # its last touch; an untouched vertex may never be revisited this
            # traversal, so landings there would sidestep the epilogue
            rem = remaining[rank].get(vid)
            return rem is not None and rem > 0

        return vertex_open

    def _entity_within(self, target, root_id: tuple) -> bool:
        kind, eid = target
        rl, ridx = root_id
        el, eidx = eid
        if el < rl:
            return False
        shift = self.tree.k ** (el - rl)
        if kind == "cell":
            return all(r * shift <= i < (r + 1) * shift for r, i in zip(ridx, eidx))
        return all(r * shift <= i <= (r + 1) * shift for r, i in zip(ridx, eidx))

    # -- the nested walk -----------------------------------------------------

    def _touch_first(self, rank: int, cell: Cell) -> None:
        remaining = self._remaining[rank]
        hooks = self._hooks[rank]
        for v in cell.vertices:
            if v.id not in remaining:
                n = 0
                for off in self.tree.corner_offsets:
                    c = self.tree.cells.get(
                        (v.level, tuple(i - o for i, o in zip(v.index, off)))
                    )
                    if c is not None and c.rank == rank:
                        n += 1
                remaining[v.id] = n
                if hooks.touch_vertex_first_time is not None:
                    hooks.touch_vertex_first_time(v)

    def _touch_last(self, rank: int, cell: Cell) -> None:
        remaining = self._remaining[rank]
        hooks = self._hooks[rank]
        for v in cell.vertices:
            remaining[v.id] -= 1
            if remaining[v.id] == 0 and hooks.touch_vertex_last_time is not None:
                hooks.touch_vertex_last_time(v)

    def _walk(self, rank: int, cell: Cell) -> None:
        hooks = self._hooks[rank]
        self._touch_first(rank, cell)
        if hooks.enter_cell is not None:
            hooks.enter_cell(cell)
        if cell.refined:
            for child in cell.children:
                if child.rank != rank:
                    self._run_deployed(rank, child)
                else:
                    self._walk(rank, child)
        if hooks.leave_cell is not None:
            hooks.leave_cell(cell)
        self._touch_last(rank, cell)

    def _run_deployed(self, master: int, cell: Cell) -> None:
        worker = cell.rank
        if self.coloring.master_of.get(worker) != master:
            raise HarnessFault(
                f"deployed cell {cell.id} of rank {worker} encountered by non-master {master}"
            )
        mover = self.mover
        linked = isinstance(mover, LinkedCellMover)
        payload = self._drop_buffers.pop((worker, cell.id), [])
        payload_n = sum(len(b) for _, b in payload)
        if linked:
            if payload:
                raise HarnessFault("linked-cell mover produced a master->worker drop")
        else:
            self._log("startup", "startup", master, worker, cell.id, 0)
            if payload_n:
                self._log("startup", "particleDrop", master, worker, cell.id, payload_n)

        lifts_expected = True
        if getattr(mover, "needs_vmax", False):
            lifts_expected = self._decide_reduction(cell, payload, master, worker)
            self.skip_decisions[cell.id] = lifts_expected

        # mergeWithWorker: payload lands in the worker's store, then the
        # worker continues to drop it during its nested traversal
        wstore = self.stores[worker]
        for (kind, eid), blk in payload:
            if kind == "cell":
                wstore.cell_block(eid, create=True).append(blk)
            else:
                wstore.vertex_block(eid, create=True).append(blk)

        prev_channel = self._current_channel[worker]
        self._current_channel[worker] = cell.id
        self._walk(worker, cell)
        self._current_channel[worker] = prev_channel

        lifted = self._lift_buffers.pop(cell.id, [])
        lifted_n = sum(len(b) for _, b in lifted)
        if linked:
            if lifted:
                raise HarnessFault("linked-cell mover produced a worker->master lift")
            return
        if not lifts_expected:
            if lifted:
                raise MoverError(
                    f"lift out of reduction-skipped subtree {cell.id} "
                    f"(stale velocity bound)"
                )
            return
        self._log("reduction", "reduction", worker, master, cell.id, 0)
        if lifted_n:
            self._log("reduction", "particleLift", worker, master, cell.id, lifted_n)
        mstore = self.stores[master]
        for (kind, eid), blk in lifted:
            if kind == "cell":
                mstore.cell_block(eid, create=True).append(blk)
            else:
                mstore.vertex_block(eid, create=True).append(blk)

    # -- reduction avoidance ---------------------------------------------------

    def _decide_reduction(self, cell: Cell, payload, master: int, worker: int) -> bool:
        """True when lifts out of the deployed subtree must be expected."""
        dt = self._ctxs[master].dt
        base_m = self.pending_vmax_master.get(cell.id)
        base_w = self.pending_vmax_worker.get(cell.id)
        if base_m != base_w:
            raise HarnessFault(
                f"reduction-skip map inconsistent for {cell.id}: "
                f"master={base_m} worker={base_w}"
            )
        if base_m is None:
            return True  # no bound from a previous traversal yet
        eff = base_m
        for _, blk in payload:
            eff = max(eff, _block_vmax(blk))
        if any(v.hanging for v in cell.vertices):
            return True  # structural evacuations can escape regardless of speed
        return not (2.0 * eff * dt < cell.width)

    def _wrapup_vmax_reports(self, dt: float) -> None:
        """Workers report per-local-root velocity bounds (folding staged
        boundary arrivals and nested subtree reports) up the rank tree."""
        deployed = []
        for r, roots in self.coloring.local_roots.items():
            if r == 0:
                continue
            for cid in roots:
                deployed.append((cid, r))
        deployed.sort(key=lambda t: -t[0][0])  # deepest first
        base: Dict[tuple, float] = {}
        for cid, worker in deployed:
            cell = self.tree.cells[cid]
            b = cell.vmax
            for _, dst, vid, blk in self.staged:
                if self._entity_within(("vertex", vid), cid):
                    b = max(b, _block_vmax(blk))
            for nested_cid, nested_worker in deployed:
                if nested_cid != cid and nested_cid in base and self._entity_within(
                    ("cell", nested_cid), cid
                ):
                    b = max(b, base[nested_cid])
            base[cid] = b
            master = self.coloring.master_of[worker]
            self._log("wrapup", "notification", worker, master, cid, 0)
            self.pending_vmax_master[cid] = b
            self.pending_vmax_worker[cid] = b

    @property
    def reduction_skip_map(self) -> Dict[int, bool]:
        """Per-worker 'lifts expected' view of the per-cell decisions."""
        out: Dict[int, bool] = {}
        for cid, expected in self.skip_decisions.items():
            w = self.tree.cells[cid].rank
            out[w] = out.get(w, False) or expected
        return out

    # -- state extraction ------------------------------------------------------

    def gather_particles(self) -> ParticleBlock:
        """All particles sorted by id, including ones in flight on the
        asynchronous channel (they already belong to their destination)."""
        total = ParticleBlock.empty(self.tree.dim)
        for r in sorted(self.stores):
            store = self.stores[r]
            for cid in sorted(store.cells):
                total.append(store.cells[cid])
            for vid in sorted(store.vertices):
                total.append(store.vertices[vid])
        for _, _, _, blk in self.staged:
            total.append(blk)
        merged = total.sorted_by_id()
        if len(np.unique(merged.ids)) != len(merged.ids):
            raise HarnessFault("particle replicated across ranks")
        return merged

    def placement_snapshot(self) -> Dict[int, tuple]:
        out: Dict[int, tuple] = {}
        for r, store in self.stores.items():
            for cid, blk in store.cells.items():
                for pid in blk.ids:
                    out[int(pid)] = ("cell", cid)
            for vid, blk in store.vertices.items():
                for pid in blk.ids:
                    out[int(pid)] = ("vertex", vid)
        for _, _, vid, blk in self.staged:
            for pid in blk.ids:
                out[int(pid)] = ("vertex", vid)
        return out

    def total_particles(self) -> int:
        return sum(s.total() for s in self.stores.values()) + sum(
            len(b) for _, _, _, b in self.staged
        )


def run_parallel_step(harness: RankHarness, mover, dt: float) -> Tuple[SortStats, MessageStats]:
    """One synchronous step of the given mover on the harness's ranks."""
    if mover is not None and mover is not harness.mover:
        harness.mover = mover
    return harness.step(dt)


# ---------------------------------------------------------------------------
# SFC-cut and sieve baselines
# ---------------------------------------------------------------------------


class CutTable:
    """Replicated table mapping depth-first leaf intervals to ranks."""

    def __init__(self, tree: Spacetree, coloring: Coloring):
        order: List[tuple] = []

        def walk(cell: Cell) -> None:
            if cell.refined:
                for ch in cell.children:
                    walk(ch)
            else:
                order.append(cell.id)

        walk(tree.root)
        self.index = {cid: i for i, cid in enumerate(order)}
        self.cuts: List[Tuple[int, int, int]] = []  # (start, end, rank)
        start = 0
        cur = tree.cells[order[0]].rank
        for i, cid in enumerate(order[1:], 1):
            r = tree.cells[cid].rank
            if r != cur:
                self.cuts.append((start, i, cur))
                start, cur = i, r
        self.cuts.append((start, len(order), cur))
        self.tree = tree

    def rank_of_position(self, x) -> int:
        idx = self.index[self.tree.leaf_containing(x)]
        for start, end, rank in self.cuts:
            if start <= idx < end:
                return rank
        raise HarnessFault(f"position {tuple(x)} maps to no cut interval")


class BaselineHarness(RankHarness):
    """PIT-local sorting on a replicated ancestor spine, with escapees routed
    by SFC cut lookup (sfc mode) or cyclically sieved (sieve mode)."""

    def __init__(self, tree: Spacetree, coloring: Coloring, mode: str,
                 flops: int = 0, verify: bool = False):
        super().__init__(tree, coloring, PitMover(flops=flops, verify=verify))
        if mode not in ("sfc", "sieve"):
            raise HarnessFault(f"unknown baseline mode {mode}")
        self.mode = mode
        self.cut_table = CutTable(tree, coloring)
        self._spine = self._build_spines()
        self._structure_version = tree.version

    def _build_spines(self) -> Dict[tuple, set]:
        """cell id -> set of ranks whose owned leaves lie below it."""
        spine: Dict[tuple, set] = defaultdict(set)

        def walk(cell: Cell) -> set:
            if not cell.refined:
                s = {cell.rank}
            else:
                s = set()
                for ch in cell.children:
                    s |= walk(ch)
            spine[cell.id] |= s
            return s

        walk(self.tree.root)
        return dict(spine)

    def step(self, dt: float, push_enabled: bool = True) -> Tuple[SortStats, MessageStats]:
        tree = self.tree
        R = self.coloring.num_ranks
        self.step_index += 1
        self._msg_stats = MessageStats()
        if self._structure_version != tree.version:
            self.cut_table = CutTable(tree, self.coloring)
            self._spine = self._build_spines()
            self._structure_version = tree.version
        self.mover.pre_step(tree, list(self.stores.values()), dt)

        # local PIT traversals over each rank's replicated spine; with no
        # deliver callbacks every lift stays local, cascading up the spine
        for store in self.stores.values():
            store.epoch += 1
        self._ctxs = {}
        for r in range(R):
            ctx = StepContext(
                tree,
                self.stores[r],
                dt,
                flops=self.mover.flops,
                verify=self.mover.verify,
                rank=r,
                push_enabled=push_enabled,
            )
            self._ctxs[r] = ctx
            hooks = self.mover.make_hooks(ctx)

            def walk(cell: Cell, rank=r, hooks=hooks) -> None:
                if hooks.enter_cell is not None:
                    hooks.enter_cell(cell)
                if cell.refined:
                    for ch in cell.children:
                        if rank in self._spine.get(ch.id, ()):
                            walk(ch)
                if hooks.leave_cell is not None:
                    hooks.leave_cell(cell)

            walk(tree.root)

        # extract escapees: particles whose position now belongs to another rank
        buffers: Dict[int, Dict[int, ParticleBlock]] = {
            r: {} for r in range(R)
        }  # origin -> dst -> block
        for r in range(R):
            store = self.stores[r]
            for cid in list(store.cells):
                blk = store.cells[cid]
                if not len(blk):
                    continue
                dsts = np.array([self.cut_table.rank_of_position(x) for x in blk.x])
                m = dsts != r
                if not m.any():
                    continue
                out = blk.extract(m)
                for dst in np.unique(dsts[m]):
                    mm = dsts[m] == dst
                    sub = ParticleBlock(out.ids[mm], out.x[mm], out.v[mm], out.stamp[mm])
                    tgt = buffers[r].setdefault(int(dst), ParticleBlock.empty(tree.dim))
                    tgt.append(sub)

        if self.mode == "sfc":
            self._route_sfc(buffers)
        else:
            self._route_sieve(buffers)

        total = SortStats()
        checksum = 0.0
        for r in range(R):
            total.add(self._ctxs[r].finalize())
            checksum += self._ctxs[r].checksum
            self.stores[r].prune()
        self.last_checksum = checksum
        return total, self._msg_stats

    def _insert_received(self, rank: int, block: ParticleBlock) -> None:
        # received particles carry no placement info: insert at the local
        # replicated root and let the next traversal's drops sort them
        self.stores[rank].cell_block(self.tree.root.id, create=True).append(block)

    def _route_sfc(self, buffers) -> None:
        R = self.coloring.num_ranks
        for src in range(R):
            for dst in range(R):
                if dst == src:
                    continue
                blk = buffers[src].get(dst)
                if blk is not None and len(blk):
                    self._log("exchange", "boundaryParticles", src, dst, None, len(blk))
                    self._insert_received(dst, blk)
                else:
                    self._log("exchange", "notification", src, dst, None, 0)

    def _route_sieve(self, buffers) -> None:
        R = self.coloring.num_ranks
        traveling = {o: buffers[o] for o in range(R)}  # origin -> {dst: block}
        for hop in range(1, R):
            for origin in range(R):
                holder = (origin + hop - 1) % R
                receiver = (origin + hop) % R
                load = traveling[origin]
                count = sum(len(b) for b in load.values())
                self._log("sieve", "sievePayload", holder, receiver, None, count)
                claimed = load.pop(receiver, None)
                if claimed is not None and len(claimed):
                    self._insert_received(receiver, claimed)
        for origin in range(R):
            left = {d: b for d, b in traveling[origin].items() if len(b)}
            if left:
                raise HarnessFault(
                    f"sieve particles from rank {origin} unclaimed after a full cycle"
                )


def sfc_cut_sort(harness: BaselineHarness, dt: float) -> Tuple[SortStats, MessageStats]:
    if harness.mode != "sfc":
        raise HarnessFault("harness not configured for SFC-cut sorting")
    return harness.step(dt)


def sieve_sort(harness: BaselineHarness, dt: float) -> Tuple[SortStats, MessageStats]:
    if harness.mode != "sieve":
        raise HarnessFault("harness not configured for sieve sorting")
    return harness.step(dt)


def make_harness(tree: Spacetree, num_ranks: int, mover_kind, flops: int = 0,
                 verify: bool = False,
                 shuffle_async: Optional[np.random.Generator] = None):
    """Build the right harness (tree mover or baseline) for a mover name."""
    coloring = decompose(tree, num_ranks)
    if isinstance(mover_kind, str) and mover_kind in ("sfc", "sieve"):
        return BaselineHarness(tree, coloring, mover_kind, flops=flops, verify=verify)
    mover = make_mover(mover_kind, flops=flops, verify=verify)
    return RankHarness(tree, coloring, mover, shuffle_async=shuffle_async)
