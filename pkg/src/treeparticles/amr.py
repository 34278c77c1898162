"""ppc-driven dynamic refinement and coarsening.

A leaf holding more particles than the ppc budget is refined (iteratively,
until the budget holds everywhere or the depth cap is reached); a refined
cell whose children are all leaves and whose combined population fits the
budget is collapsed. Counting is positional: a particle belongs to the leaf
covering its position, independent of which entity currently hosts it, so
the decisions are identical for every mover and rank layout. Neither pass
ever touches positions or velocities.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import ParticleBlock, ParticleStore, Spacetree

log = logging.getLogger(__name__)


@dataclass
class AmrPolicy:
    ppc: int = 1000
    max_depth: Optional[int] = None  # default 12 for d=2, 8 for d=3

    def depth_limit(self, dim: int) -> int:
        if self.max_depth is not None:
            return self.max_depth
        return 12 if dim == 2 else 8

    def __post_init__(self):
        if self.ppc < 1:
            raise ValueError(f"ppc must be >= 1, got {self.ppc}")


def leaf_population(tree: Spacetree, stores) -> dict:
    """Positional per-leaf particle counts over all stores."""
    counts: dict = defaultdict(int)
    for store in stores:
        for cid, blk in store.cells.items():
            if not len(blk):
                continue
            cell = tree.cells[cid]
            if not cell.refined:
                counts[cid] += len(blk)
            else:
                for i in range(len(blk)):
                    counts[tree.leaf_containing(blk.x[i])] += 1
        for vid, blk in store.vertices.items():
            if not len(blk):
                continue
            vertex = tree.vertices[vid]
            matched = np.zeros(len(blk), dtype=bool)
            for cid in vertex.adjacency:
                cell = tree.cells[cid]
                if cell.refined:
                    continue
                m = cell.contains_mask(blk.x) & ~matched
                if m.any():
                    counts[cid] += int(m.sum())
                    matched |= m
            if not matched.all():
                for i in np.nonzero(~matched)[0]:
                    counts[tree.leaf_containing(blk.x[i])] += 1
    return counts


def _rehost_cell_mode(tree: Spacetree, store: ParticleStore, cell) -> None:
    """After refining `cell`, move its resident block into the children."""
    blk = store.pop_cell(cell.id)
    if blk is None or not len(blk):
        return
    codes = cell.child_codes(blk.x)
    for code in np.unique(codes):
        m = codes == code
        store.cell_block(cell.children[code].id, create=True).append(
            ParticleBlock(blk.ids[m], blk.x[m], blk.v[m], blk.stamp[m])
        )


def _rehost_vertex_mode(tree: Spacetree, store: ParticleStore, cell) -> None:
    """After refining `cell`, re-sort particles positioned inside it from its
    corner vertices down to their stable hosts."""
    for vid in cell.vertex_ids:
        blk = store.vertices.get(vid)
        if blk is None or not len(blk):
            continue
        inside = cell.contains_mask(blk.x)
        if not inside.any():
            continue
        out = blk.extract(inside)
        for host, sub in tree.group_by_stable_vertex(out, cell.level + 1):
            store.vertex_block(host, create=True).append(sub)


def apply_refinement(tree: Spacetree, policy: AmrPolicy, storage: str = "cell",
                     stores=None) -> int:
    """Refine every leaf whose positional population exceeds ppc; repeats
    until the budget holds or the depth cap stops it. Returns the number of
    refinements performed."""
    stores = stores if stores is not None else [tree.store]
    limit = policy.depth_limit(tree.dim)
    refined_total = 0
    capped = False
    while True:
        counts = leaf_population(tree, stores)
        over = [cid for cid, n in counts.items() if n > policy.ppc]
        todo = []
        for cid in over:
            if cid[0] >= limit:
                capped = True
            else:
                todo.append(cid)
        if not todo:
            break
        for cid in sorted(todo):
            cell = tree.cells[cid]
            tree.refine(cid)
            for store in stores:
                if storage == "cell":
                    _rehost_cell_mode(tree, store, cell)
                else:
                    _rehost_vertex_mode(tree, store, cell)
            refined_total += 1
    if capped:
        log.warning("ppc=%d still violated at max depth %d", policy.ppc, limit)
    return refined_total


def apply_coarsening(tree: Spacetree, policy: AmrPolicy, storage: str = "cell",
                     stores=None) -> int:
    """Collapse refined cells whose children are all leaves and whose combined
    positional population fits ppc. One bottom-up sweep per call."""
    stores = stores if stores is not None else [tree.store]
    counts = leaf_population(tree, stores)
    candidates = []
    for cid, cell in tree.cells.items():
        if cell.refined and all(not ch.refined for ch in cell.children):
            # never merge across rank boundaries
            if any(ch.rank != cell.rank for ch in cell.children):
                continue
            combined = sum(counts.get(ch.id, 0) for ch in cell.children)
            if combined <= policy.ppc:
                candidates.append(cid)
    for cid in sorted(candidates, key=lambda c: (-c[0], c)):
        tree.coarsen(cid, storage=storage, stores=stores)
    return len(candidates)
