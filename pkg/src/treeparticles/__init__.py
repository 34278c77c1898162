"""Multiscale particle management on k-spacetrees.

Particle-in-tree (PIT), particle-in-dual-tree (PIDT) and reduction-avoiding
PIDT movers over an adaptive Cartesian grid cascade, with simulated
distributed-memory ranks, the linked-cell / SFC-cut / sieve comparison
baselines, and an electrostatic PIC validation harness.
"""

from .amr import AmrPolicy, apply_coarsening, apply_refinement, leaf_population
from .bench import Metrics, Scenario, emit_csv, run_scenario
from .grid import (
    Cell,
    GridError,
    ParticleBlock,
    ParticleStore,
    Spacetree,
    Vertex,
    build_uniform_tree,
)
from .movers import (
    LinkedCellMover,
    Mover,
    MoverError,
    MoverKind,
    PidtMover,
    PitMover,
    RaPidtMover,
    SortStats,
    compute_vmax,
    linked_cell_step,
    make_mover,
    pidt_step,
    pit_step,
    ra_pidt_step,
    verify_sorted,
)
from .parallel import (
    BaselineHarness,
    Coloring,
    HarnessFault,
    Message,
    MessageStats,
    RankHarness,
    check_coloring,
    decompose,
    make_harness,
    run_parallel_step,
    sfc_cut_sort,
    sieve_sort,
)
from .particles import (
    Particle,
    ParticleError,
    SamplingConfig,
    dump_particles,
    push,
    push_block,
    sample_scenario_particles,
)
from .pic import (
    FieldMesh,
    PicError,
    PicSimulation,
    PlasmaConfig,
    compute_and_interpolate_field,
    deposit_charge,
    dispersion_analysis,
    gather_field,
    run_langmuir,
    solve_poisson,
    theoretical_dispersion,
)
from .traversal import EventHooks, TraversalTrace, check_ordering, traverse

__version__ = "0.1.0"
