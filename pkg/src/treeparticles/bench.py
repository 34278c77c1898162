"""Scenario driver: configuration, metrics collection, CSV output, CLI.

A scenario samples particles, warms the grid up under the ppc budget,
decomposes it over simulated ranks, then runs the chosen mover for a fixed
number of steps while recording the sorting counters and message traffic.
Wall-clock derived numbers (updates/s) are recorded on the Metrics object
but kept out of the CSV so reruns of one seed are byte-identical.

CLI: ``python -m treeparticles.bench --help``. Exit codes: 0 ok, 1 config
error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .amr import AmrPolicy, apply_coarsening, apply_refinement
from .grid import GridError, Spacetree
from .movers import MoverError, MoverKind
from .parallel import MESSAGE_KINDS, BaselineHarness, HarnessFault, make_harness
from .particles import ParticleError, SamplingConfig, sample_scenario_particles

MOVER_NAMES = ("pit", "pidt", "rapidt", "linkedcell", "sfc", "sieve")
SYNTHETIC_FLOPS = (0, 128, 256, 1024, 4096)


class ConfigError(Exception):
    pass


@dataclass
class Scenario:
    dim: int = 2
    density: float = 1e4
    ppc: int = 1000
    dt: float = 1e-3
    steps: int = 50
    distribution: str = "homogeneous"  # or "subcube"
    mover: str = "pidt"
    ranks: int = 1
    flops: int = 0
    seed: int = 0
    amr: bool = True
    max_depth: Optional[int] = None
    verify: bool = False

    def validate(self) -> None:
        if self.dim not in (2, 3):
            raise ConfigError(f"dim must be 2 or 3, got {self.dim}")
        if self.density <= 0:
            raise ConfigError(f"density must be positive, got {self.density}")
        if self.ppc < 1:
            raise ConfigError(f"ppc must be >= 1, got {self.ppc}")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.distribution not in ("homogeneous", "subcube"):
            raise ConfigError(f"unknown distribution {self.distribution}")
        if self.mover not in MOVER_NAMES:
            raise ConfigError(f"unknown mover {self.mover} (choose from {MOVER_NAMES})")
        if self.ranks < 1:
            raise ConfigError(f"ranks must be >= 1, got {self.ranks}")
        if self.flops not in SYNTHETIC_FLOPS:
            raise ConfigError(f"flops must be one of {SYNTHETIC_FLOPS}, got {self.flops}")


CSV_COLUMNS = (
    ["step", "particles", "leaves", "lifts", "drops", "neighbour_moves", "tunnels",
     "lifts_per_particle", "drops_per_particle", "neighbour_moves_per_particle"]
    + [f"msg_{k}" for k in MESSAGE_KINDS]
    + [f"payload_{k}" for k in ("particleDrop", "particleLift", "boundaryParticles",
                                "sievePayload")]
)


@dataclass
class Metrics:
    scenario: Scenario
    rows: List[dict] = field(default_factory=list)
    wall_times: List[float] = field(default_factory=list)
    checksums: List[float] = field(default_factory=list)
    velocity_law: str = "uniform-unit-ball"
    harness: object = None

    def add_step(self, step: int, particles: int, leaves: int, stats, msg_stats,
                 wall: float, checksum: float) -> None:
        n = max(particles, 1)
        row = {
            "step": step,
            "particles": particles,
            "leaves": leaves,
            "lifts": stats.lifts,
            "drops": stats.drops,
            "neighbour_moves": stats.neighbour_moves,
            "tunnels": stats.tunnels,
            "lifts_per_particle": stats.lifts / n,
            "drops_per_particle": stats.drops / n,
            "neighbour_moves_per_particle": stats.neighbour_moves / n,
        }
        for k in MESSAGE_KINDS:
            row[f"msg_{k}"] = msg_stats.envelopes[k]
        for k in ("particleDrop", "particleLift", "boundaryParticles", "sievePayload"):
            row[f"payload_{k}"] = msg_stats.payload[k]
        self.rows.append(row)
        self.wall_times.append(wall)
        self.checksums.append(checksum)

    @property
    def updates_per_second(self) -> float:
        total = sum(self.wall_times)
        if total == 0.0:
            return 0.0
        return len(self.rows) * self.rows[0]["particles"] / total if self.rows else 0.0

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]


def emit_csv(metrics: Metrics, path) -> None:
    """Header plus one row per step; deterministic formatting (repr floats)."""
    def fmt(v):
        return repr(v) if isinstance(v, float) else str(v)

    with open(path, "w") as f:
        f.write(",".join(CSV_COLUMNS) + "\n")
        for row in metrics.rows:
            f.write(",".join(fmt(row[c]) for c in CSV_COLUMNS) + "\n")


def build_harness(scenario: Scenario, shuffle_async=None):
    """Sample particles, warm up the grid under the ppc budget, decompose."""
    scenario.validate()
    rng = np.random.default_rng(scenario.seed)
    block = sample_scenario_particles(
        SamplingConfig(
            dim=scenario.dim,
            density=scenario.density,
            distribution=scenario.distribution,
        ),
        rng,
    )
    tree = Spacetree(dim=scenario.dim)
    # warm-up in cell storage (vectorized re-hosting), then reseed per mover
    tree.store.cells[tree.root.id] = block.copy()
    policy = AmrPolicy(ppc=scenario.ppc, max_depth=scenario.max_depth)
    apply_refinement(tree, policy, storage="cell")
    tree.store.cells.clear()
    tree.store.vertices.clear()
    harness = make_harness(
        tree,
        scenario.ranks,
        scenario.mover,
        flops=scenario.flops,
        verify=scenario.verify,
        shuffle_async=shuffle_async,
    )
    harness.seed(block)
    return harness, policy


def run_scenario(scenario: Scenario, shuffle_async=None) -> Metrics:
    harness, policy = build_harness(scenario, shuffle_async=shuffle_async)
    tree = harness.tree
    storage = "cell" if scenario.mover in ("pit", "sfc", "sieve") else "vertex"
    metrics = Metrics(scenario=scenario)
    stores = list(harness.stores.values())
    n = harness.total_particles()
    for step in range(1, scenario.steps + 1):
        t0 = time.perf_counter()
        stats, msg_stats = harness.step(scenario.dt)
        wall = time.perf_counter() - t0
        if scenario.amr:
            apply_refinement(tree, policy, storage=storage, stores=stores)
            apply_coarsening(tree, policy, storage=storage, stores=stores)
        metrics.add_step(
            step, n, tree.leaf_count, stats, msg_stats, wall, harness.last_checksum
        )
    metrics.harness = harness
    return metrics


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def parse_scenario_file(path) -> dict:
    """Line-oriented `key = value` scenario files; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="treeparticles-bench",
        description="Run a particle-sorting scenario on the simulated rank harness "
        "and write per-step metrics as CSV.",
    )
    p.add_argument("--scenario", help="scenario file (key = value lines); flags override it")
    p.add_argument("--dim", type=int, choices=(2, 3), help="spatial dimension (default 2)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--particles", type=float, help="particle count for homogeneous runs")
    group.add_argument("--density", type=float,
                       help="particle density over the populated area (default 1e4)")
    p.add_argument("--ppc", type=int, help="max particles per leaf cell (default 1000)")
    p.add_argument("--dt", type=float, help="time step size (default 1e-3)")
    p.add_argument("--steps", type=int, help="number of steps (default 50)")
    p.add_argument("--distribution", choices=("homogeneous", "subcube"),
                   help="initial particle placement (default homogeneous)")
    p.add_argument("--mover", choices=MOVER_NAMES, help="sorting strategy (default pidt)")
    p.add_argument("--ranks", type=int, help="simulated rank count (default 1)")
    p.add_argument("--flops", type=int, choices=SYNTHETIC_FLOPS,
                   help="synthetic floating point work per particle push (default 0)")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--no-amr", action="store_true", help="freeze the grid after warm-up")
    p.add_argument("--out", help="CSV output path (default: print a summary only)")
    p.add_argument("--dump-messages", help="write the message trace to this path")
    return p


def _scenario_from_args(args) -> Scenario:
    values: dict = {}
    if args.scenario:
        raw = parse_scenario_file(args.scenario)
        casts = {
            "dim": int, "density": float, "particles": float, "ppc": int,
            "dt": float, "steps": int, "distribution": str, "mover": str,
            "ranks": int, "flops": int, "seed": int, "amr": lambda s: s.lower() != "false",
        }
        for key, value in raw.items():
            if key not in casts:
                raise ConfigError(f"unknown scenario key: {key}")
            values[key] = casts[key](value)
    for key in ("dim", "density", "ppc", "dt", "steps", "distribution", "mover",
                "ranks", "flops", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.particles is not None:
        values["density"] = args.particles
        values["distribution"] = values.get("distribution", "homogeneous")
        if values["distribution"] != "homogeneous":
            raise ConfigError("--particles only applies to homogeneous runs; use --density")
    if "particles" in values:
        values["density"] = values.pop("particles")
    if args.no_amr:
        values["amr"] = False
    try:
        scenario = Scenario(**values)
        scenario.validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return scenario


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        scenario = _scenario_from_args(args)
    except (ConfigError, ParticleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        metrics = run_scenario(scenario)
    except (ConfigError, ParticleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (GridError, MoverError, HarnessFault) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 2
    if args.out:
        try:
            emit_csv(metrics, args.out)
        except OSError as exc:
            print(f"runtime fault: {exc}", file=sys.stderr)
            return 2
    if args.dump_messages:
        try:
            metrics.harness.dump_message_trace(args.dump_messages)
        except OSError as exc:
            print(f"runtime fault: {exc}", file=sys.stderr)
            return 2
    total_lifts = sum(metrics.column("lifts"))
    total_drops = sum(metrics.column("drops"))
    print(
        f"{scenario.mover} d={scenario.dim} steps={scenario.steps} "
        f"particles={metrics.rows[0]['particles'] if metrics.rows else 0} "
        f"lifts={total_lifts} drops={total_drops} "
        f"updates/s={metrics.updates_per_second:.3g}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
