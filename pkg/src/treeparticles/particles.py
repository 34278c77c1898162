"""Particle representation, the position update ("push"), and scenario sampling.

The push is an explicit Euler step with reflecting walls: a coordinate that
leaves [0,1] is folded back (x -> 2b - x about the violated bound b) and the
matching velocity component negated, repeated until inside. All block
operations are elementwise, so results are bitwise identical no matter how
particles are grouped across grid entities or ranks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import ParticleBlock


class ParticleError(Exception):
    pass


@dataclass
class Particle:
    """Scalar view of one particle; bulk state lives in ParticleBlock arrays."""

    id: int
    x: np.ndarray
    v: np.ndarray
    moved: bool = False
    charge: float = -1.0
    mass: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)


def reflect_into_unit_box(x: np.ndarray, v: np.ndarray) -> None:
    """Fold positions back into [0,1] in place, negating velocities per fold."""
    while True:
        low = x < 0.0
        if low.any():
            x[low] = -x[low]
            v[low] = -v[low]
        high = x > 1.0
        if high.any():
            x[high] = 2.0 - x[high]
            v[high] = -v[high]
        if not ((x < 0.0).any() or (x > 1.0).any()):
            return


def push_block(x: np.ndarray, v: np.ndarray, dt: float) -> None:
    """Benchmark-mode push, in place: x += dt*v then reflecting fold."""
    if not (np.isfinite(x).all() and np.isfinite(v).all()):
        raise ParticleError("non-finite particle state before push")
    x += dt * v
    reflect_into_unit_box(x, v)


def push(particle: Particle, dt: float, efield=None, q_over_m: Optional[float] = None) -> None:
    """Push one particle; with a field, kick the velocity first (Euler)."""
    if dt <= 0.0:
        raise ParticleError(f"dt must be positive, got {dt}")
    if efield is not None:
        qm = q_over_m if q_over_m is not None else particle.charge / particle.mass
        particle.v = particle.v + dt * qm * np.asarray(efield, dtype=np.float64)
    x = particle.x.reshape(1, -1)
    v = particle.v.reshape(1, -1)
    if not (np.isfinite(x).all() and np.isfinite(v).all()):
        raise ParticleError("non-finite particle state before push")
    x += dt * v
    reflect_into_unit_box(x, v)
    particle.x = x[0]
    particle.v = v[0]
    particle.moved = True


@dataclass
class SamplingConfig:
    dim: int = 2
    density: float = 1e4
    distribution: str = "homogeneous"  # or "subcube"
    subcube_extent: float = 0.1


def sample_scenario_particles(config: SamplingConfig, rng: np.random.Generator) -> ParticleBlock:
    """Particles placed uniformly (unit box or the (0,0.1)^d subcube) with
    velocities uniform over the closed unit ball (rejection sampled)."""
    if config.density <= 0:
        raise ParticleError(f"density must be positive, got {config.density}")
    d = config.dim
    if config.distribution == "homogeneous":
        n = int(round(config.density))
        x = rng.random((n, d))
    elif config.distribution == "subcube":
        n = int(round(config.density * config.subcube_extent**d))
        x = config.subcube_extent * rng.random((n, d))
    else:
        raise ParticleError(f"unknown distribution: {config.distribution}")

    v = np.empty((n, d))
    filled = 0
    while filled < n:
        cand = 2.0 * rng.random((max(n - filled, 64), d)) - 1.0
        ok = np.einsum("ij,ij->i", cand, cand) <= 1.0
        take = cand[ok][: n - filled]
        v[filled : filled + len(take)] = take
        filled += len(take)

    return ParticleBlock(np.arange(n, dtype=np.int64), x, v)


def dump_particles(block: ParticleBlock, path) -> None:
    """CSV dump `id,x0..x{d-1},v0..v{d-1}` for oracle comparisons."""
    d = block.dim
    header = "id," + ",".join(f"x{a}" for a in range(d)) + "," + ",".join(
        f"v{a}" for a in range(d)
    )
    with open(path, "w") as f:
        f.write(header + "\n")
        for i in range(len(block)):
            xs = ",".join(repr(float(c)) for c in block.x[i])
            vs = ",".join(repr(float(c)) for c in block.v[i])
            f.write(f"{block.ids[i]},{xs},{vs}\n")


def load_particles(path, dim: int) -> ParticleBlock:
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    if data.size == 0:
        return ParticleBlock.empty(dim)
    return ParticleBlock(data[:, 0].astype(np.int64), data[:, 1 : 1 + dim], data[:, 1 + dim :])


def synthetic_flops(v: np.ndarray, flops: int) -> float:
    """Fixed-length arithmetic kernel per particle; returns a checksum term.

    Two floating point operations per round per particle, result fed back so
    the work cannot be elided.
    """
    if flops <= 0 or len(v) == 0:
        return 0.0
    acc = np.abs(v[:, 0]) + 1.0
    for _ in range(flops // 2):
        acc = acc * 1.0000000001 + 1e-12
    return float(acc.sum())
