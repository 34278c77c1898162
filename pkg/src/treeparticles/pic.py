"""Electrostatic particle-in-cell validation loop on a regular periodic grid.

Normalization: time in inverse plasma frequencies, space in Debye lengths,
one grid cell per Debye length. The loop is the textbook cycle: cloud-in-
cell charge deposition, spectral Poisson solve for the potential, centred-
difference field, gather with the transposed deposition kernel, leapfrog
push. A thermal run seeds a sea of Langmuir waves whose space-time spectrum
follows omega^2 = 1 + 3 k^2 in these units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np


class PicError(Exception):
    pass


@dataclass
class PlasmaConfig:
    """Thermal-plasma run parameters (defaults: the validation setup)."""

    n: int = 243  # grid cells per axis
    ppc: int = 100  # macro-particles per cell
    dt: float = 0.01
    q_over_m: float = -1.0
    vth: float = 1.0
    ion_density: float = 1.0
    output_stride: int = 150
    steps: int = 6000
    seed: int = 0
    pusher: str = "leapfrog"  # or "euler"
    poisson_eigenvalue: str = "spectral"  # or "discrete"

    def __post_init__(self):
        if self.n < 2 or self.ppc < 1 or self.dt <= 0 or self.vth < 0:
            raise PicError("invalid plasma configuration")

    @classmethod
    def desk(cls, **overrides) -> "PlasmaConfig":
        """Desk-scale variant for CI-grade runs."""
        defaults = dict(n=64, ppc=100, dt=0.01, output_stride=4, steps=2048)
        defaults.update(overrides)
        return cls(**defaults)


class FieldMesh:
    """Regular N x N periodic mesh (d=2): charge density, potential, field."""

    def __init__(self, n: int):
        self.n = n
        self.rho = np.zeros((n, n))
        self.potential = np.zeros((n, n))
        self.e_field = np.zeros((n, n, 2))

    def wave_numbers(self) -> Tuple[np.ndarray, np.ndarray]:
        k = 2.0 * np.pi * np.fft.fftfreq(self.n)
        return np.meshgrid(k, k, indexing="ij")


def _cic_indices(x: np.ndarray, n: int):
    i0 = np.floor(x).astype(np.int64)
    frac = x - i0
    i0 %= n
    i1 = (i0 + 1) % n
    return i0, i1, frac


def deposit_charge(x: np.ndarray, charge: float, mesh: FieldMesh,
                   background: float = 0.0) -> None:
    """Cloud-in-cell deposition onto the 2^d surrounding vertices, plus a
    uniform background; positions are in grid units [0, N)."""
    n = mesh.n
    if len(x) and (x.min() < 0.0 or x.max() >= n):
        raise PicError("particle outside mesh during deposition")
    i0, i1, f = _cic_indices(x, n)
    wx0, wy0 = 1.0 - f[:, 0], 1.0 - f[:, 1]
    wx1, wy1 = f[:, 0], f[:, 1]
    rho = np.zeros(n * n)
    for ix, wx in ((i0[:, 0], wx0), (i1[:, 0], wx1)):
        for iy, wy in ((i0[:, 1], wy0), (i1[:, 1], wy1)):
            rho += np.bincount(ix * n + iy, weights=wx * wy, minlength=n * n)
    mesh.rho = background + charge * rho.reshape(n, n)


def solve_poisson(mesh: FieldMesh, eigenvalue: str = "spectral") -> None:
    """Solve -laplace(V) = rho with periodic BCs in Fourier space.

    eigenvalue="spectral" divides by |k|^2 (continuum operator), "discrete"
    by the 5-point stencil eigenvalue 2(1-cos k) per axis.
    """
    n = mesh.n
    mean = float(mesh.rho.mean())
    scale = float(np.abs(mesh.rho).max()) + 1.0
    if abs(mean) > 1e-8 * scale:
        raise PicError(f"rho has non-zero mean {mean:g}; add a neutralizing background")
    rho_hat = np.fft.fft2(mesh.rho - mean)
    kx, ky = mesh.wave_numbers()
    if eigenvalue == "spectral":
        lam = kx**2 + ky**2
    elif eigenvalue == "discrete":
        lam = (2.0 - 2.0 * np.cos(kx)) + (2.0 - 2.0 * np.cos(ky))
    else:
        raise PicError(f"unknown eigenvalue mode {eigenvalue}")
    lam[0, 0] = 1.0
    v_hat = rho_hat / lam
    v_hat[0, 0] = 0.0
    mesh.potential = np.real(np.fft.ifft2(v_hat))


def compute_field(mesh: FieldMesh) -> None:
    """E = -grad(V) by centred differences with periodic wrap."""
    v = mesh.potential
    mesh.e_field[:, :, 0] = -(np.roll(v, -1, axis=0) - np.roll(v, 1, axis=0)) / 2.0
    mesh.e_field[:, :, 1] = -(np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / 2.0


def gather_field(mesh: FieldMesh, x: np.ndarray) -> np.ndarray:
    """Per-particle field via the transposed (identical) CIC kernel."""
    n = mesh.n
    i0, i1, f = _cic_indices(x, n)
    wx0, wy0 = 1.0 - f[:, 0], 1.0 - f[:, 1]
    wx1, wy1 = f[:, 0], f[:, 1]
    e = mesh.e_field
    out = np.zeros((len(x), 2))
    for c in range(2):
        ec = e[:, :, c]
        out[:, c] = (
            ec[i0[:, 0], i0[:, 1]] * wx0 * wy0
            + ec[i1[:, 0], i0[:, 1]] * wx1 * wy0
            + ec[i0[:, 0], i1[:, 1]] * wx0 * wy1
            + ec[i1[:, 0], i1[:, 1]] * wx1 * wy1
        )
    return out


def compute_and_interpolate_field(mesh: FieldMesh, x: np.ndarray) -> np.ndarray:
    compute_field(mesh)
    return gather_field(mesh, x)


def apply_laplacian_5pt(v: np.ndarray) -> np.ndarray:
    """Discrete -laplace with the 5-point stencil and periodic wrap."""
    return (
        4.0 * v
        - np.roll(v, 1, axis=0)
        - np.roll(v, -1, axis=0)
        - np.roll(v, 1, axis=1)
        - np.roll(v, -1, axis=1)
    )


class PicSimulation:
    """The deposit -> solve -> gather -> push loop with diagnostics."""

    def __init__(self, config: PlasmaConfig, x: Optional[np.ndarray] = None,
                 v: Optional[np.ndarray] = None):
        self.config = config
        n = config.n
        rng = np.random.default_rng(config.seed)
        count = config.ppc * n * n
        if x is None:
            x = rng.random((count, 2)) * n
        if v is None:
            v = rng.normal(0.0, config.vth, size=(len(x), 2)) if config.vth > 0 else np.zeros(
                (len(x), 2)
            )
        self.x = np.asarray(x, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        # electrons at density 1: each macro-particle carries charge -1/ppc
        # and mass 1/ppc against the +ion_density background
        self.macro_charge = -1.0 / config.ppc
        self.mesh = FieldMesh(n)
        self.step_index = 0
        self.momentum_history: List[float] = []
        self._half_kicked = False

    def _field_at_particles(self) -> np.ndarray:
        cfg = self.config
        deposit_charge(self.x, self.macro_charge, self.mesh, background=cfg.ion_density)
        solve_poisson(self.mesh, eigenvalue=cfg.poisson_eigenvalue)
        compute_field(self.mesh)
        return gather_field(self.mesh, self.x)

    def step(self) -> None:
        cfg = self.config
        e_i = self._field_at_particles()
        if not np.isfinite(e_i).all():
            raise PicError(f"field blew up at step {self.step_index}")
        accel = cfg.q_over_m * e_i
        if cfg.pusher == "leapfrog":
            if not self._half_kicked:
                self.v -= 0.5 * cfg.dt * accel  # shift v to t - dt/2
                self._half_kicked = True
            self.v += cfg.dt * accel
            self.x += cfg.dt * self.v
        elif cfg.pusher == "euler":
            self.v += cfg.dt * accel
            self.x += cfg.dt * self.v
        else:
            raise PicError(f"unknown pusher {cfg.pusher}")
        self.x %= cfg.n
        self.momentum_history.append(float(self.v.sum()))
        self.step_index += 1

    def run(self, steps: Optional[int] = None, stride: Optional[int] = None) -> np.ndarray:
        """Run and return potential snapshots, shape (nsnap, N, N)."""
        cfg = self.config
        steps = steps if steps is not None else cfg.steps
        stride = stride if stride is not None else cfg.output_stride
        snaps = []
        for s in range(steps):
            self.step()
            if (s + 1) % stride == 0:
                snaps.append(self.mesh.potential.copy())
        return np.array(snaps)


def run_langmuir(config: PlasmaConfig, out_dir=None) -> np.ndarray:
    """Thermal-plasma run returning potential snapshots; optionally dumps
    one grid file per stride plus a manifest."""
    sim = PicSimulation(config)
    snaps = sim.run()
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        for i, snap in enumerate(snaps):
            np.save(os.path.join(out_dir, f"potential_{i:05d}.npy"), snap)
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(
                {"n": config.n, "dt": config.dt, "stride": config.output_stride,
                 "snapshots": len(snaps)},
                f,
                indent=2,
            )
    return snaps


def theoretical_dispersion(k: np.ndarray) -> np.ndarray:
    """Bohm-Gross branch omega(k) = sqrt(1 + 3 k^2) in normalized units."""
    k = np.asarray(k, dtype=np.float64)
    return np.sqrt(1.0 + 3.0 * k * k)


@dataclass
class SpectralPeak:
    k: float
    omega: float
    power: float


def _parabolic_refine(power: np.ndarray, i: int) -> float:
    """Sub-bin peak location from a log-power parabola through 3 bins."""
    if i <= 0 or i >= len(power) - 1:
        return float(i)
    a, b, c = np.log(power[i - 1] + 1e-300), np.log(power[i] + 1e-300), np.log(
        power[i + 1] + 1e-300
    )
    denom = a - 2.0 * b + c
    if denom == 0.0:
        return float(i)
    return i + 0.5 * (a - c) / denom


def dispersion_analysis(snapshots: np.ndarray, dt_snapshot: float,
                        n_modes: int = 5,
                        omega_window: Tuple[float, float] = (0.2, 4.0)) -> List[SpectralPeak]:
    """Space-time Fourier transform of the potential snapshots: for the
    lowest nonzero |k| bins along one axis, locate the frequency of maximum
    power (parabolic sub-bin refinement) inside the window."""
    snapshots = np.asarray(snapshots)
    if snapshots.ndim != 3 or len(snapshots) < 64:
        raise PicError("dispersion analysis needs >= 64 snapshots of a 2d field")
    nt, n, _ = snapshots.shape
    v_hat = np.fft.fftn(snapshots, axes=(0, 1, 2))
    power = np.abs(v_hat) ** 2
    omegas = 2.0 * np.pi * np.fft.fftfreq(nt, d=dt_snapshot)
    half = nt // 2
    # cut at k2 = 0, fold the two k1 signs together for signal
    peaks: List[SpectralPeak] = []
    lo, hi = omega_window
    for m in range(1, n_modes + 1):
        spec = power[:, m, 0] + power[:, n - m, 0]
        window = np.where((omegas[:half] >= lo) & (omegas[:half] <= hi))[0]
        if len(window) == 0:
            raise PicError("empty frequency window")
        seg = spec[:half][window]
        i_loc = int(np.argmax(seg))
        i = window[i_loc]
        i_ref = _parabolic_refine(spec[:half], i)
        omega = float(i_ref * (omegas[1] - omegas[0]))
        k = 2.0 * np.pi * m / n
        peaks.append(SpectralPeak(k=k, omega=omega, power=float(spec[i])))
    return peaks
