"""k-spacetree grid: a cascade of ragged Cartesian grids over the unit box.

The tree recursively splits the unit box k ways per axis (k=3 by default,
generalizing the quadtree/octree k=2). Cells carry their level and per-axis
index; vertices live on the level lattices and know how many of their
potential adjacent cells exist. Geometry is canonical: every coordinate is
an integer divided by k**level, so shared boundaries of parents, children
and neighbours are bitwise identical floats.

Conventions:
  * cells are half-open boxes [lo, hi) per axis, except that the top domain
    boundary is closed (x == 1.0 belongs to the last cell),
  * a vertex "owns" a position when the position falls on its side of the
    cell midplanes; exact midpoint ties go to the lexicographically smaller
    vertex index,
  * a vertex is hanging when fewer of its in-domain adjacent cell slots
    exist than could.
"""

from __future__ import annotations

import itertools
from typing import Iterator, Optional

import numpy as np

CellId = tuple  # (level, (i0, .., i{d-1}))
VertexId = tuple  # (level, (i0, .., i{d-1}))


class GridError(Exception):
    """Structural misuse of the spacetree (bad refine/coarsen/lookup)."""


class ParticleBlock:
    """Growable struct-of-arrays particle container.

    `stamp` holds the traversal epoch in which a particle was last pushed;
    "has moved this traversal" is stamp == current epoch. An epoch stamp
    instead of a plain flag means in-transit particles never need their flag
    reset, no matter in which order ranks touch the entities they cross.
    """

    __slots__ = ("ids", "x", "v", "stamp")

    def __init__(self, ids, x, v, stamp=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.x = np.asarray(x, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        if stamp is None:
            stamp = np.zeros(len(self.ids), dtype=np.int64)
        self.stamp = np.asarray(stamp, dtype=np.int64)

    @classmethod
    def empty(cls, dim: int) -> "ParticleBlock":
        return cls(
            np.empty(0, dtype=np.int64),
            np.empty((0, dim), dtype=np.float64),
            np.empty((0, dim), dtype=np.float64),
            np.empty(0, dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def append(self, other: "ParticleBlock") -> None:
        if len(other) == 0:
            return
        if len(self.ids) == 0:
            self.ids = other.ids.copy()
            self.x = other.x.copy()
            self.v = other.v.copy()
            self.stamp = other.stamp.copy()
            return
        self.ids = np.concatenate([self.ids, other.ids])
        self.x = np.concatenate([self.x, other.x])
        self.v = np.concatenate([self.v, other.v])
        self.stamp = np.concatenate([self.stamp, other.stamp])

    def extract(self, mask: np.ndarray) -> "ParticleBlock":
        """Remove the masked particles from self and return them as a block."""
        taken = ParticleBlock(self.ids[mask], self.x[mask], self.v[mask], self.stamp[mask])
        keep = ~mask
        self.ids = self.ids[keep]
        self.x = self.x[keep]
        self.v = self.v[keep]
        self.stamp = self.stamp[keep]
        return taken

    def copy(self) -> "ParticleBlock":
        return ParticleBlock(self.ids.copy(), self.x.copy(), self.v.copy(), self.stamp.copy())

    def sorted_by_id(self) -> "ParticleBlock":
        order = np.argsort(self.ids, kind="stable")
        return ParticleBlock(self.ids[order], self.x[order], self.v[order], self.stamp[order])


class ParticleStore:
    """Particle blocks keyed by grid entity, one store per execution context.

    Ranks in the simulated-parallel harness each own a store; the tree's
    default store backs the serial API. Absent key means empty.
    """

    __slots__ = ("cells", "vertices", "dim", "epoch")

    def __init__(self, dim: int):
        self.dim = dim
        self.cells: dict = {}
        self.vertices: dict = {}
        self.epoch = 0  # traversal counter; stamps equal to it mean "pushed"

    def cell_block(self, cid: CellId, create: bool = False) -> Optional[ParticleBlock]:
        blk = self.cells.get(cid)
        if blk is None and create:
            blk = ParticleBlock.empty(self.dim)
            self.cells[cid] = blk
        return blk

    def vertex_block(self, vid: VertexId, create: bool = False) -> Optional[ParticleBlock]:
        blk = self.vertices.get(vid)
        if blk is None and create:
            blk = ParticleBlock.empty(self.dim)
            self.vertices[vid] = blk
        return blk

    def pop_cell(self, cid: CellId) -> Optional[ParticleBlock]:
        return self.cells.pop(cid, None)

    def pop_vertex(self, vid: VertexId) -> Optional[ParticleBlock]:
        return self.vertices.pop(vid, None)

    def prune(self) -> None:
        self.cells = {k: b for k, b in self.cells.items() if len(b)}
        self.vertices = {k: b for k, b in self.vertices.items() if len(b)}

    def total(self) -> int:
        return sum(len(b) for b in self.cells.values()) + sum(
            len(b) for b in self.vertices.values()
        )


class Cell:
    __slots__ = (
        "id",
        "level",
        "index",
        "refined",
        "lo",
        "hi",
        "mid",
        "child_bounds",
        "children",
        "parent",
        "vertex_ids",
        "vertices",
        "vmax",
        "rank",
        "tree",
    )

    def __init__(self, tree: "Spacetree", level: int, index: tuple, parent: Optional["Cell"]):
        k = tree.k
        scale = k**level
        self.id = (level, index)
        self.level = level
        self.index = index
        self.refined = False
        self.lo = np.array([i / scale for i in index])
        self.hi = np.array([(i + 1) / scale for i in index])
        self.mid = np.array([(2 * i + 1) / (2 * scale) for i in index])
        self.child_bounds = None  # (d, k-1) interior child boundaries, set on refine
        self.children = None
        self.parent = parent
        self.vertex_ids = tuple(
            (level, tuple(i + o for i, o in zip(index, off))) for off in tree.corner_offsets
        )
        self.vertices = None  # direct refs, filled by the tree
        self.vmax = 0.0
        self.rank = 0
        self.tree = tree

    @property
    def width(self) -> float:
        return 1.0 / self.tree.k**self.level

    @property
    def particles(self) -> Optional[ParticleBlock]:
        return self.tree.store.cells.get(self.id)

    def contains_mask(self, X: np.ndarray) -> np.ndarray:
        """Vectorized half-open containment (top domain boundary closed)."""
        m = None
        for a in range(X.shape[1]):
            xa = X[:, a]
            ma = xa >= self.lo[a]
            if self.hi[a] == 1.0:
                ma &= xa <= 1.0
            else:
                ma &= xa < self.hi[a]
            m = ma if m is None else m & ma
        return m

    def contains_point(self, x) -> bool:
        for a in range(len(x)):
            if x[a] < self.lo[a]:
                return False
            if self.hi[a] == 1.0:
                if x[a] > 1.0:
                    return False
            elif x[a] >= self.hi[a]:
                return False
        return True

    def child_codes(self, X: np.ndarray) -> np.ndarray:
        """Index into self.children of the child containing each row of X."""
        k = self.tree.k
        code = None
        for a in range(X.shape[1]):
            xa = X[:, a]
            off = np.zeros(len(xa), dtype=np.int64)
            for j in range(k - 1):
                off += xa >= self.child_bounds[a, j]
            code = off if code is None else code * k + off
        return code

    def __repr__(self):
        return f"Cell{self.id}{'*' if self.refined else ''}"


class Vertex:
    __slots__ = ("id", "level", "index", "pos", "n_existing", "n_potential", "tree")

    def __init__(self, tree: "Spacetree", level: int, index: tuple):
        scale = tree.k**level
        self.id = (level, index)
        self.level = level
        self.index = index
        self.pos = np.array([i / scale for i in index])
        self.n_existing = 0
        self.n_potential = 0
        self.tree = tree

    @property
    def hanging(self) -> bool:
        return self.n_existing < self.n_potential

    @property
    def particles(self) -> Optional[ParticleBlock]:
        return self.tree.store.vertices.get(self.id)

    @property
    def adjacency(self) -> list:
        """Ids of the existing adjacent cells on this vertex's level."""
        tree = self.tree
        out = []
        for off in tree.corner_offsets:
            cid = (self.level, tuple(i - o for i, o in zip(self.index, off)))
            if cid in tree.cells:
                out.append(cid)
        return out

    def __repr__(self):
        return f"Vertex{self.id}{'h' if self.hanging else ''}"


class Spacetree:
    """The cell cascade plus vertex lattices, with hash-addressable lookup."""

    def __init__(self, dim: int = 2, k: int = 3, max_depth: int = 20):
        if dim not in (2, 3):
            raise GridError(f"dim must be 2 or 3, got {dim}")
        if k < 2:
            raise GridError(f"k must be >= 2, got {k}")
        self.dim = dim
        self.k = k
        self.max_depth = max_depth
        self.corner_offsets = tuple(itertools.product(range(2), repeat=dim))
        self.child_offsets = tuple(itertools.product(range(k), repeat=dim))
        self.cells: dict = {}
        self.vertices: dict = {}
        self.store = ParticleStore(dim)
        self.version = 0

        root = Cell(self, 0, (0,) * dim, None)
        self.cells[root.id] = root
        self.root = root
        for off in self.corner_offsets:
            v = self._get_or_create_vertex(0, off)
            v.n_existing = 1
            v.n_potential = 1
        root.vertices = tuple(self.vertices[vid] for vid in root.vertex_ids)
        self.leaf_count = 1

    # -- construction ------------------------------------------------------

    def _get_or_create_vertex(self, level: int, index: tuple) -> Vertex:
        vid = (level, index)
        v = self.vertices.get(vid)
        if v is None:
            v = Vertex(self, level, index)
            scale = self.k**level
            n_pot = 0
            for off in self.corner_offsets:
                if all(0 <= i - o <= scale - 1 for i, o in zip(index, off)):
                    n_pot += 1
            v.n_potential = n_pot
            self.vertices[vid] = v
        return v

    def _recount_vertex(self, v: Vertex) -> None:
        n = 0
        for off in self.corner_offsets:
            if (v.level, tuple(i - o for i, o in zip(v.index, off))) in self.cells:
                n += 1
        v.n_existing = n

    def refine(self, cell_id: CellId) -> None:
        """Split a leaf into k^d children, updating the vertex lattice."""
        cell = self.cells.get(cell_id)
        if cell is None:
            raise GridError(f"no such cell: {cell_id}")
        if cell.refined:
            raise GridError(f"cell already refined: {cell_id}")
        if cell.level + 1 > self.max_depth:
            raise GridError(f"refine would exceed max depth {self.max_depth}")
        k = self.k
        level = cell.level + 1
        base = tuple(k * i for i in cell.index)
        children = []
        for off in self.child_offsets:
            child = Cell(self, level, tuple(b + o for b, o in zip(base, off)), cell)
            child.rank = cell.rank  # refinement stays within the owner's region
            self.cells[child.id] = child
            children.append(child)
        cell.children = children
        cell.refined = True
        cell.child_bounds = np.array(
            [[(k * i + j + 1) / k**level for j in range(k - 1)] for i in cell.index]
        )
        # refresh the (k+1)^d lattice vertices covering the new children
        lattice = []
        for off in itertools.product(range(k + 1), repeat=self.dim):
            v = self._get_or_create_vertex(level, tuple(b + o for b, o in zip(base, off)))
            lattice.append(v)
        for v in lattice:
            self._recount_vertex(v)
        for child in children:
            child.vertices = tuple(self.vertices[vid] for vid in child.vertex_ids)
        self.leaf_count += k**self.dim - 1
        self.version += 1

    def coarsen(self, cell_id: CellId, storage: str = "cell", stores=None) -> None:
        """Remove a refined cell's (leaf) children, re-hosting their particles.

        storage selects where orphaned particles land: "cell" merges them
        into the coarsened cell, "vertex" reassigns them to the owning
        non-hanging vertex at the parent level (escalating past hanging
        vertices). Newly hanging vertices are evacuated the same way.
        """
        cell = self.cells.get(cell_id)
        if cell is None:
            raise GridError(f"no such cell: {cell_id}")
        if not cell.refined:
            raise GridError(f"cannot coarsen a leaf: {cell_id}")
        if any(ch.refined for ch in cell.children):
            raise GridError(f"children of {cell_id} are not all leaves")
        if stores is None:
            stores = [self.store]
        k = self.k
        level = cell.level + 1
        base = tuple(k * i for i in cell.index)

        orphans = []  # (store, block)
        for ch in cell.children:
            for store in stores:
                blk = store.pop_cell(ch.id)
                if blk is not None and len(blk):
                    orphans.append((store, blk))
            del self.cells[ch.id]
        cell.children = None
        cell.refined = False
        cell.child_bounds = None

        for off in itertools.product(range(k + 1), repeat=self.dim):
            vid = (level, tuple(b + o for b, o in zip(base, off)))
            v = self.vertices.get(vid)
            if v is None:
                continue
            self._recount_vertex(v)
            if v.n_existing == 0:
                for store in stores:
                    blk = store.pop_vertex(vid)
                    if blk is not None and len(blk):
                        orphans.append((store, blk))
                del self.vertices[vid]
            elif v.hanging:
                for store in stores:
                    blk = store.pop_vertex(vid)
                    if blk is not None and len(blk):
                        orphans.append((store, blk))

        for store, blk in orphans:
            if storage == "cell":
                store.cell_block(cell_id, create=True).append(blk)
            else:
                for host_vid, sub in self.group_by_stable_vertex(blk, cell.level):
                    store.vertex_block(host_vid, create=True).append(sub)
        self.leaf_count -= k**self.dim - 1
        self.version += 1

    # -- geometric queries ---------------------------------------------------

    def _check_in_domain(self, x) -> None:
        for a in range(self.dim):
            if not (0.0 <= x[a] <= 1.0):
                raise GridError(f"position outside unit domain: {tuple(x)}")

    def leaf_containing(self, x) -> CellId:
        """Id of the unique leaf whose (half-open) box contains x."""
        self._check_in_domain(x)
        cur = self.root
        while cur.refined:
            code = 0
            for a in range(self.dim):
                off = 0
                for j in range(self.k - 1):
                    if x[a] >= cur.child_bounds[a, j]:
                        off += 1
                code = code * self.k + off
            cur = cur.children[code]
        return cur.id

    def owning_vertex(self, cell: Cell, x) -> VertexId:
        """The cell corner whose dual cell covers x (ties to the smaller index)."""
        idx = tuple(
            i + (1 if x[a] > cell.mid[a] else 0) for a, i in enumerate(cell.index)
        )
        return (cell.level, idx)

    def owning_indices(self, X: np.ndarray, level: int) -> np.ndarray:
        """Per-row lattice index of the level-`level` vertex owning each position."""
        scale = self.k**level
        c = np.floor(X * scale).astype(np.int64)
        np.clip(c, 0, scale - 1, out=c)
        # fix candidates against the canonical float boundaries
        lo = c / scale
        c -= X < lo
        hi = (c + 1) / scale
        c += (X >= hi) & (c < scale - 1)
        mid = (2 * c + 1) / (2 * scale)
        return c + (X > mid)

    def dual_contains_mask(self, vertex: Vertex, X: np.ndarray) -> np.ndarray:
        idx = self.owning_indices(X, vertex.level)
        return np.all(idx == np.array(vertex.index), axis=1)

    def vertex_parents(self, vertex_id: VertexId) -> set:
        """Coarse vertices v_b such that every cell adjacent to vertex_id has
        a parent adjacent to v_b.

        Adjacency is taken on the full level lattice (slots beyond the domain
        included), which is what makes a vertex coinciding with a coarser one
        have exactly one parent at domain corners as well as in the interior.
        """
        level, index = vertex_id
        if level == 0:
            raise GridError("root-level vertices have no parents")
        if vertex_id not in self.vertices:
            raise GridError(f"no such vertex: {vertex_id}")
        result = None
        for off in self.corner_offsets:
            cidx = tuple(i - o for i, o in zip(index, off))
            pidx = tuple(i // self.k for i in cidx)
            corners = {
                tuple(i + o for i, o in zip(pidx, o2)) for o2 in self.corner_offsets
            }
            result = corners if result is None else result & corners
        scale = self.k ** (level - 1)
        return {
            (level - 1, idx)
            for idx in result
            if all(0 <= i <= scale for i in idx) and (level - 1, idx) in self.vertices
        }

    def stable_vertex_host(self, x, start_level: int) -> VertexId:
        """Deepest non-hanging vertex at level <= start_level whose dual covers x."""
        for level in range(start_level, -1, -1):
            scale = self.k**level
            idx = []
            for a in range(self.dim):
                c = min(int(x[a] * scale), scale - 1)
                if x[a] < c / scale:
                    c -= 1
                elif c < scale - 1 and x[a] >= (c + 1) / scale:
                    c += 1
                idx.append(c + (1 if x[a] > (2 * c + 1) / (2 * scale) else 0))
            v = self.vertices.get((level, tuple(idx)))
            if v is not None and not v.hanging:
                return v.id
        raise GridError(f"no non-hanging host vertex for {tuple(x)}")  # unreachable

    def group_by_stable_vertex(self, block: ParticleBlock, start_level: int):
        """Yield (vertex_id, sub-block) partitioning block by stable host."""
        groups: dict = {}
        for i in range(len(block)):
            groups.setdefault(self.stable_vertex_host(block.x[i], start_level), []).append(i)
        for vid, rows in groups.items():
            rows = np.array(rows)
            yield vid, ParticleBlock(
                block.ids[rows], block.x[rows], block.v[rows], block.stamp[rows]
            )

    # -- iteration helpers ---------------------------------------------------

    def leaves(self) -> Iterator[Cell]:
        stack = [self.root]
        while stack:
            c = stack.pop()
            if c.refined:
                stack.extend(reversed(c.children))
            else:
                yield c

    def depth(self) -> int:
        return max(c.level for c in self.cells.values())

    def uniform_refine(self, levels: int) -> None:
        for _ in range(levels):
            for cid in [c.id for c in self.leaves()]:
                self.refine(cid)


def build_uniform_tree(dim: int, levels: int, k: int = 3) -> Spacetree:
    tree = Spacetree(dim=dim, k=k)
    tree.uniform_refine(levels)
    return tree
