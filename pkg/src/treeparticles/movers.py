"""The four particle sorting strategies, expressed as traversal event hooks.

* particle-in-tree (PIT): cells hold particles; a refined cell's enterCell
  preamble drops residents one level into the child containing them, leaf
  enterCell pushes, and leaveCell lifts escapees one level to the parent.
  Multi-level movement is the cascade of these one-level hops.
* particle-in-dual-tree (PIDT): non-hanging vertices hold the particles
  whose dual cell covers them. Drops descend the dual lattice, pushes run
  per leaf over the adjacent vertices (guarded by the per-particle moved
  flag), leaveCell moves boundary crossers directly between the cell's
  vertices (the multiscale linked-cell move), and touchVertexLastTime lifts
  what remains uncovered. Hanging vertices host particles only transiently
  within a traversal and are evacuated upward at their last touch.
* reduction-avoiding PIDT: PIDT plus the per-cell analysed velocity bound
  (vmax) recomputed bottom-up every traversal; the rank harness uses it to
  skip worker-to-master particle reductions.
* linked-cell: the classic baseline; multiscale machinery switched off,
  neighbour reassignment only, valid while no particle can cross more than
  one cell per step.

Every mover pushes each particle exactly once per traversal with identical
arithmetic, so trajectories are independent of the sorting strategy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import Cell, ParticleBlock, ParticleStore, Spacetree, Vertex
from .particles import push_block, synthetic_flops
from .traversal import EventHooks, traverse


class MoverError(Exception):
    pass


class MoverKind(enum.Enum):
    PIT = "pit"
    PIDT = "pidt"
    RAPIDT = "rapidt"
    LINKEDCELL = "linkedcell"


@dataclass
class SortStats:
    """Per-traversal counters; an n-level lift counts n independent lifts."""

    lifts: int = 0
    drops: int = 0
    neighbour_moves: int = 0
    tunnels: int = 0

    def add(self, other: "SortStats") -> None:
        self.lifts += other.lifts
        self.drops += other.drops
        self.neighbour_moves += other.neighbour_moves
        self.tunnels += other.tunnels


class StepContext:
    """One rank's mutable state for one traversal.

    The deliver_* callbacks are installed by the parallel harness; when they
    are None (serial execution) every movement stays in the local store.
    """

    __slots__ = (
        "tree",
        "store",
        "stats",
        "dt",
        "flops",
        "checksum",
        "verify",
        "lifted_ids",
        "rank",
        "epoch",
        "local_vertices",
        "vertex_open",
        "deliver_drop",
        "deliver_lift",
        "deliver_boundary",
        "push_enabled",
    )

    def __init__(self, tree: Spacetree, store: ParticleStore, dt: float, flops: int = 0,
                 verify: bool = False, rank: int = 0, local_vertices=None,
                 push_enabled: bool = True):
        self.tree = tree
        self.store = store
        self.stats = SortStats()
        self.dt = dt
        self.flops = flops
        self.checksum = 0.0
        self.verify = verify
        self.lifted_ids: set = set()
        self.rank = rank
        self.epoch = store.epoch
        self.local_vertices = local_vertices  # vertex ids adjacent to owned cells
        self.vertex_open = None  # vid -> bool: last touch not yet fired here
        self.deliver_drop = None  # (child_cell, ('cell'|'vertex', id), block)
        self.deliver_lift = None  # (from_entity, ('cell'|'vertex', id), block)
        self.deliver_boundary = None  # (dst_rank, vertex_id, block)
        self.push_enabled = push_enabled

    def finalize(self) -> SortStats:
        self.stats.tunnels = len(self.lifted_ids)
        return self.stats


def _split_by_codes(block: ParticleBlock, codes: np.ndarray):
    """Yield (code, sub-block) for each distinct code; consumes the block."""
    uniq = np.unique(codes)
    if len(uniq) == 1:
        yield int(uniq[0]), block
        return
    for code in uniq:
        m = codes == code
        yield int(code), ParticleBlock(block.ids[m], block.x[m], block.v[m], block.stamp[m])


def _split_by_rows(block: ParticleBlock, keys: np.ndarray):
    """Yield (key-row tuple, sub-block) grouping by rows of an (n,d) int array."""
    packed = keys[:, 0].astype(np.int64)
    for a in range(1, keys.shape[1]):
        packed = packed * (1 << 21) + keys[:, a]
    for code in np.unique(packed):
        m = packed == code
        yield tuple(keys[np.argmax(m)]), ParticleBlock(
            block.ids[m], block.x[m], block.v[m], block.stamp[m]
        )


class Mover:
    kind: MoverKind
    storage: str  # "cell" or "vertex"

    def __init__(self, flops: int = 0, verify: bool = False):
        self.flops = flops
        self.verify = verify

    def make_hooks(self, ctx: StepContext) -> EventHooks:
        raise NotImplementedError

    def pre_step(self, tree: Spacetree, stores, dt: float) -> None:
        """Per-step precondition checks (linked-cell velocity cap)."""

    def step(self, tree: Spacetree, dt: float, store: Optional[ParticleStore] = None) -> SortStats:
        """Serial (single-rank) step: one traversal on the tree's store."""
        store = store if store is not None else tree.store
        self.pre_step(tree, [store], dt)
        store.epoch += 1
        ctx = StepContext(tree, store, dt, flops=self.flops, verify=self.verify)
        traverse(tree, self.make_hooks(ctx))
        store.prune()
        if self.verify and self.storage == "vertex":
            for vid, blk in store.vertices.items():
                if len(blk) and tree.vertices[vid].hanging:
                    raise MoverError(
                        f"hanging vertex {vid} holds particles at the step boundary"
                    )
        return ctx.finalize()

    def settle(self, tree: Spacetree, store: Optional[ParticleStore] = None) -> SortStats:
        """Resort-only traversal (drops and structural lifts, no push)."""
        store = store if store is not None else tree.store
        store.epoch += 1
        ctx = StepContext(tree, store, dt=0.0, push_enabled=False)
        traverse(tree, self.make_hooks(ctx))
        store.prune()
        return ctx.finalize()


# ---------------------------------------------------------------------------
# particle in tree
# ---------------------------------------------------------------------------


class PitMover(Mover):
    kind = MoverKind.PIT
    storage = "cell"

    def make_hooks(self, ctx: StepContext) -> EventHooks:
        store = ctx.store
        stats = ctx.stats

        def enter_cell(cell: Cell) -> None:
            if cell.refined:
                blk = store.pop_cell(cell.id)
                if blk is None or not len(blk):
                    return
                if ctx.verify and not cell.contains_mask(blk.x).all():
                    raise MoverError(f"uncontained particle on refined cell {cell.id}")
                stats.drops += len(blk)
                for code, sub in _split_by_codes(blk, cell.child_codes(blk.x)):
                    child = cell.children[code]
                    if ctx.deliver_drop is not None and child.rank != ctx.rank:
                        ctx.deliver_drop(child, ("cell", child.id), sub)
                    else:
                        store.cell_block(child.id, create=True).append(sub)
            else:
                blk = store.cells.get(cell.id)
                if blk is None or not len(blk):
                    return
                if ctx.verify and not cell.contains_mask(blk.x).all():
                    raise MoverError(f"sorting theorem violated at leaf {cell.id}")
                if ctx.push_enabled:
                    push_block(blk.x, blk.v, ctx.dt)
                    if ctx.flops:
                        ctx.checksum += synthetic_flops(blk.v, ctx.flops)

        def leave_cell(cell: Cell) -> None:
            blk = store.cells.get(cell.id)
            if blk is None or not len(blk):
                return
            inside = cell.contains_mask(blk.x)
            if inside.all():
                return
            out = blk.extract(~inside)
            stats.lifts += len(out)
            ctx.lifted_ids.update(out.ids.tolist())
            if cell.parent is None:
                raise MoverError("particle left the unit domain (reflection broken)")
            if ctx.deliver_lift is not None and cell.parent.rank != ctx.rank:
                ctx.deliver_lift(cell, ("cell", cell.parent.id), out)
            else:
                store.cell_block(cell.parent.id, create=True).append(out)

        return EventHooks(enter_cell=enter_cell, leave_cell=leave_cell)


# ---------------------------------------------------------------------------
# particle in dual tree
# ---------------------------------------------------------------------------


class PidtMover(Mover):
    kind = MoverKind.PIDT
    storage = "vertex"
    lifts_enabled = True
    needs_vmax = False

    def __init__(self, flops: int = 0, verify: bool = False, merged_leaf_loops: bool = True):
        super().__init__(flops=flops, verify=verify)
        self.merged_leaf_loops = merged_leaf_loops

    # -- pieces shared between hook bodies ---------------------------------

    def _reassign_within_cell(self, ctx: StepContext, cell: Cell, vertex: Vertex,
                              blk: ParticleBlock) -> None:
        """Move updated particles that crossed into another of this cell's
        dual cells directly to that vertex (linked-list move, no tunneling)."""
        moved = blk.stamp == ctx.epoch
        if not moved.any():
            return
        own = ctx.tree.owning_indices(blk.x, vertex.level)
        left = moved & np.any(own != np.array(vertex.index), axis=1)
        if not left.any():
            return
        corner = {v.index: v for v in cell.vertices if v is not vertex}
        out = blk.extract(left)
        back = None
        for idx, sub in _split_by_rows(out, ctx.tree.owning_indices(out.x, vertex.level)):
            target = corner.get(idx)
            if target is not None:
                ctx.stats.neighbour_moves += len(sub)
                ctx.store.vertex_block(target.id, create=True).append(sub)
            else:
                # not adjacent to this cell: stays for the lift at last touch
                if back is None:
                    back = sub
                else:
                    back.append(sub)
        if back is not None:
            blk.append(back)

    def _lift_from_vertex(self, ctx: StepContext, vertex: Vertex, out: ParticleBlock) -> None:
        """One-level lift to a parent vertex: the parent whose dual cell
        covers the position when one exists, else the smallest parent."""
        if vertex.level == 0:
            raise MoverError("lift requested at root level (sorting broken)")
        ctx.stats.lifts += len(out)
        ctx.lifted_ids.update(out.ids.tolist())
        parents = sorted(ctx.tree.vertex_parents(vertex.id))
        fallback = parents[0]
        pset = {p[1] for p in parents}
        plevel = vertex.level - 1
        for idx, sub in _split_by_rows(out, ctx.tree.owning_indices(out.x, plevel)):
            target = (plevel, idx) if idx in pset else fallback
            # landing locally is only sound while this rank can still process
            # the target this traversal; otherwise the lift rides the
            # reduction to the master, which provably still holds the target
            # open (it is adjacent to the deployed cell's parent)
            if ctx.deliver_lift is not None and (
                target not in ctx.local_vertices or not ctx.vertex_open(target)
            ):
                ctx.deliver_lift(vertex, ("vertex", target), sub)
            else:
                ctx.store.vertex_block(target, create=True).append(sub)

    def _transfer_foreign(self, ctx: StepContext, vertex: Vertex, blk: ParticleBlock) -> None:
        """Ship updated particles whose position now lies in another rank's
        cells to that rank (asynchronous boundary exchange)."""
        moved = blk.stamp == ctx.epoch
        if not moved.any():
            return
        pos = vertex.pos
        cells = ctx.tree.cells
        cidx = np.empty((len(blk), len(pos)), dtype=np.int64)
        for a in range(len(pos)):
            cidx[:, a] = vertex.index[a] - (blk.x[:, a] < pos[a])
        owner = np.full(len(blk), ctx.rank, dtype=np.int64)
        for idx in {tuple(r) for r in cidx[moved]}:
            cell = cells.get((vertex.level, idx))
            if cell is not None and cell.rank != ctx.rank:
                owner[np.all(cidx == np.array(idx), axis=1)] = cell.rank
        foreign = moved & (owner != ctx.rank)
        if not foreign.any():
            return
        owners = owner[foreign]
        out = blk.extract(foreign)
        for dst in np.unique(owners):
            m = owners == dst
            ctx.deliver_boundary(
                int(dst),
                vertex.id,
                ParticleBlock(out.ids[m], out.x[m], out.v[m], out.stamp[m]),
            )

    def _update_vmax(self, ctx: StepContext, cell: Cell) -> None:
        vm = 0.0
        if cell.refined:
            for ch in cell.children:
                if ch.vmax > vm:
                    vm = ch.vmax
        for v in cell.vertices:
            blk = ctx.store.vertices.get(v.id)
            if blk is not None and len(blk):
                m = float(np.abs(blk.v).max())
                if m > vm:
                    vm = m
        cell.vmax = vm

    # -- hooks ---------------------------------------------------------------

    def make_hooks(self, ctx: StepContext) -> EventHooks:
        store = ctx.store
        stats = ctx.stats
        tree = ctx.tree

        def touch_first(vertex: Vertex) -> None:
            if not ctx.verify:
                return
            blk = store.vertices.get(vertex.id)
            if blk is None or not len(blk):
                return
            # particles stamped this epoch are mid-cascade arrivals; the
            # theorem anchor covers the settled population
            settled = blk.stamp < ctx.epoch
            if settled.any() and not tree.dual_contains_mask(
                vertex, blk.x[settled]
            ).all():
                raise MoverError(f"sorting theorem violated at vertex {vertex.id}")

        def enter_cell(cell: Cell) -> None:
            if cell.refined:
                # preamble: drop unmoved residents one level down the dual grid
                child_level = cell.level + 1
                for v in cell.vertices:
                    blk = store.vertices.get(v.id)
                    if blk is None or not len(blk):
                        continue
                    cand = blk.stamp < ctx.epoch
                    if not cand.any():
                        continue
                    cand &= cell.contains_mask(blk.x)
                    if not cand.any():
                        continue
                    out = blk.extract(cand)
                    stats.drops += len(out)
                    for code, sub in _split_by_codes(out, cell.child_codes(out.x)):
                        child = cell.children[code]
                        for idx, vsub in _split_by_rows(
                            sub, tree.owning_indices(sub.x, child_level)
                        ):
                            vid = (child_level, idx)
                            if ctx.deliver_drop is not None and child.rank != ctx.rank:
                                ctx.deliver_drop(child, ("vertex", vid), vsub)
                            else:
                                store.vertex_block(vid, create=True).append(vsub)
            else:
                if not ctx.push_enabled:
                    return
                for v in cell.vertices:
                    blk = store.vertices.get(v.id)
                    if blk is None or not len(blk):
                        continue
                    cand = blk.stamp < ctx.epoch
                    if not cand.any():
                        continue
                    cand &= cell.contains_mask(blk.x)
                    if not cand.any():
                        continue
                    x = blk.x[cand]
                    vel = blk.v[cand]
                    push_block(x, vel, ctx.dt)
                    blk.x[cand] = x
                    blk.v[cand] = vel
                    blk.stamp[cand] = ctx.epoch
                    if ctx.flops:
                        ctx.checksum += synthetic_flops(vel, ctx.flops)
                if self.merged_leaf_loops:
                    for v in cell.vertices:
                        blk = store.vertices.get(v.id)
                        if blk is not None and len(blk):
                            self._reassign_within_cell(ctx, cell, v, blk)

        def leave_cell(cell: Cell) -> None:
            if cell.refined or not self.merged_leaf_loops:
                for v in cell.vertices:
                    blk = store.vertices.get(v.id)
                    if blk is not None and len(blk):
                        self._reassign_within_cell(ctx, cell, v, blk)
            if self.needs_vmax:
                self._update_vmax(ctx, cell)

        def touch_last(vertex: Vertex) -> None:
            blk = store.vertices.get(vertex.id)
            if blk is None or not len(blk):
                return
            if vertex.hanging:
                # hanging vertices cannot keep particles between traversals
                out = store.pop_vertex(vertex.id)
                if not self.lifts_enabled:
                    raise MoverError(
                        f"particle stranded on hanging vertex {vertex.id} without lifts"
                    )
                self._lift_from_vertex(ctx, vertex, out)
                return
            in_dual = tree.dual_contains_mask(vertex, blk.x)
            moved = blk.stamp == ctx.epoch
            escaped = moved & ~in_dual
            if escaped.any():
                out = blk.extract(escaped)
                if self.lifts_enabled:
                    self._lift_from_vertex(ctx, vertex, out)
                else:
                    self._direct_neighbour_move(ctx, vertex, out)
            if ctx.deliver_boundary is not None and len(blk):
                self._transfer_foreign(ctx, vertex, blk)

        return EventHooks(
            enter_cell=enter_cell,
            leave_cell=leave_cell,
            touch_vertex_first_time=touch_first,
            touch_vertex_last_time=touch_last,
        )

    def _direct_neighbour_move(self, ctx: StepContext, vertex: Vertex, out: ParticleBlock) -> None:
        raise MoverError("lifts disabled for this mover")


class RaPidtMover(PidtMover):
    """PIDT plus the analysed per-cell velocity bound for reduction skipping.

    Serial behaviour and statistics are identical to PIDT; only the parallel
    harness consumes the vmax attribute.
    """

    kind = MoverKind.RAPIDT
    needs_vmax = True


class LinkedCellMover(PidtMover):
    """Multiscale checks switched off: particles may only move to a vertex of
    the 1-ring; anything farther is a velocity-cap violation."""

    kind = MoverKind.LINKEDCELL
    lifts_enabled = False

    def pre_step(self, tree: Spacetree, stores, dt: float) -> None:
        vmax = 0.0
        for store in stores:
            for blk in store.vertices.values():
                if len(blk):
                    m = float(np.abs(blk.v).max())
                    if m > vmax:
                        vmax = m
        h_min = tree.k ** float(-tree.depth())
        if vmax * dt >= h_min:
            raise MoverError(
                f"linked-cell velocity cap violated: vmax*dt={vmax * dt:g} >= h_min={h_min:g}"
            )

    def _direct_neighbour_move(self, ctx: StepContext, vertex: Vertex, out: ParticleBlock) -> None:
        for idx, sub in _split_by_rows(out, ctx.tree.owning_indices(out.x, vertex.level)):
            target = ctx.tree.vertices.get((vertex.level, idx))
            if target is None or target.hanging:
                raise MoverError(
                    f"particle tunneled from vertex {vertex.id} (velocity cap violated)"
                )
            if any(abs(a - b) > 1 for a, b in zip(idx, vertex.index)):
                raise MoverError(
                    f"particle tunneled from vertex {vertex.id} (velocity cap violated)"
                )
            ctx.stats.neighbour_moves += len(sub)
            ctx.store.vertex_block(target.id, create=True).append(sub)


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------


MOVER_CLASSES = {
    MoverKind.PIT: PitMover,
    MoverKind.PIDT: PidtMover,
    MoverKind.RAPIDT: RaPidtMover,
    MoverKind.LINKEDCELL: LinkedCellMover,
}


def make_mover(kind, **kwargs) -> Mover:
    if isinstance(kind, str):
        kind = MoverKind(kind.lower())
    return MOVER_CLASSES[kind](**kwargs)


def pit_step(tree: Spacetree, dt: float, **kwargs) -> SortStats:
    return PitMover(**kwargs).step(tree, dt)


def pidt_step(tree: Spacetree, dt: float, **kwargs) -> SortStats:
    return PidtMover(**kwargs).step(tree, dt)


def ra_pidt_step(tree: Spacetree, dt: float, **kwargs) -> SortStats:
    return RaPidtMover(**kwargs).step(tree, dt)


def linked_cell_step(tree: Spacetree, dt: float, **kwargs) -> SortStats:
    return LinkedCellMover(**kwargs).step(tree, dt)


def compute_vmax(cell: Cell, tree: Spacetree, store: Optional[ParticleStore] = None) -> float:
    """Maximum velocity component of the particles on a leaf's adjacent
    vertices; for a refined cell, the maximum over its children."""
    store = store if store is not None else tree.store
    if cell.refined:
        return max((compute_vmax(ch, tree, store) for ch in cell.children), default=0.0)
    vm = 0.0
    for v in cell.vertices:
        blk = store.vertices.get(v.id)
        if blk is not None and len(blk):
            m = float(np.abs(blk.v).max())
            if m > vm:
                vm = m
    return vm


def verify_sorted(tree: Spacetree, mover, store: Optional[ParticleStore] = None) -> bool:
    """True iff every particle's position is covered by its hosting entity:
    the hosting cell's box for cell storage, the hosting vertex's dual cell
    for vertex storage (and no hanging vertex holds anything)."""
    store = store if store is not None else tree.store
    storage = mover.storage if isinstance(mover, Mover) else str(mover)
    if storage in ("cell", "pit"):
        for cid, blk in store.cells.items():
            if not len(blk):
                continue
            cell = tree.cells.get(cid)
            if cell is None or not cell.contains_mask(blk.x).all():
                return False
            if not cell.refined:
                for i in range(len(blk)):
                    if tree.leaf_containing(blk.x[i]) != cid:
                        return False
    else:
        for vid, blk in store.vertices.items():
            if not len(blk):
                continue
            vertex = tree.vertices.get(vid)
            if vertex is None or vertex.hanging:
                return False
            if not tree.dual_contains_mask(vertex, blk.x).all():
                return False
    return True
