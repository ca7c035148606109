"""Constant-energy (NVE) molecular dynamics with velocity-Verlet integration.

The integrator drives any force provider: the analytic cluster potentials,
the full-precision model, or a quantized model. Total-energy drift over long
trajectories is the diagnostic for non-conservative or symmetry-broken
forces, so the report fits a straight line to the sampled total energy.

Units: positions in Angstrom, velocities in Angstrom/fs, masses in amu,
energies in eV, forces in eV/Angstrom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteForceError

# (eV/Angstrom)/amu expressed as Angstrom/fs^2.
ACCEL_UNIT = 9.648533212331288e-3
KB_EV = 8.617333262e-5  # eV/K


@dataclass
class MDState:
    positions: np.ndarray      # (n, 3)
    velocities: np.ndarray     # (n, 3)
    masses: np.ndarray         # (n,)
    step: int = 0
    dt: float = 0.5            # fs

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (len(self.positions) == len(self.velocities) == len(self.masses)):
            raise ValueError("state arrays must have matching lengths")

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    def kinetic_energy(self) -> float:
        v2 = np.sum(self.velocities * self.velocities, axis=1)
        return float(0.5 * np.sum(self.masses * v2) / ACCEL_UNIT)


def maxwell_boltzmann_velocities(
    masses: np.ndarray, temperature: float, rng: np.random.Generator
) -> np.ndarray:
    """Thermal velocities at the given temperature with zero total momentum."""
    masses = np.asarray(masses, dtype=np.float64)
    sigma = np.sqrt(KB_EV * temperature * ACCEL_UNIT / masses)
    v = sigma[:, None] * rng.standard_normal((masses.shape[0], 3))
    v -= np.sum(masses[:, None] * v, axis=0) / np.sum(masses)
    return v


def _check_forces(forces: np.ndarray) -> np.ndarray:
    forces = np.asarray(forces, dtype=np.float64)
    if not np.all(np.isfinite(forces)):
        raise NonFiniteForceError("force provider returned non-finite values")
    return forces


def step_verlet(state: MDState, forces: np.ndarray, provider):
    """One velocity-Verlet step (half-kick, drift, re-evaluate, half-kick).

    Returns (new_state, new_forces, new_potential). `forces` must be the
    provider output at the current positions.
    """
    forces = _check_forces(forces)
    accel = ACCEL_UNIT * forces / state.masses[:, None]
    v_half = state.velocities + 0.5 * state.dt * accel
    positions = state.positions + state.dt * v_half
    potential, new_forces = provider(positions)
    new_forces = _check_forces(new_forces)
    accel_new = ACCEL_UNIT * new_forces / state.masses[:, None]
    velocities = v_half + 0.5 * state.dt * accel_new
    new_state = MDState(positions, velocities, state.masses, state.step + 1, state.dt)
    return new_state, new_forces, float(potential)


@dataclass
class DriftReport:
    drift_rate: float          # meV/atom/ps, slope of the total-energy fit
    max_excursion: float       # meV/atom
    exploded: bool
    halted_step: int
    n_steps: int
    n_atoms: int


@dataclass
class NVEResult:
    report: DriftReport
    samples: list[tuple[int, float, float, float]] = field(default_factory=list)
    final_state: MDState | None = None


def run_nve(
    initial: MDState,
    provider,
    n_steps: int,
    report_every: int = 10,
    explosion_threshold: float = 1.0,   # eV/atom
    frame_callback=None,
) -> NVEResult:
    """Integrate n_steps or until explosion; fit the drift of the total energy.

    samples holds (step, e_kin, e_pot, e_tot) every report_every steps,
    including step 0. frame_callback(state, e_kin, e_pot) is invoked at the
    same cadence, for trajectory writers.
    """
    state = initial
    try:
        potential, forces = provider(state.positions)
        forces = _check_forces(forces)
    except NonFiniteForceError:
        report = DriftReport(float("inf"), float("inf"), True, 0, n_steps, initial.n_atoms)
        return NVEResult(report, [], initial)
    e_kin = state.kinetic_energy()
    e_tot0 = e_kin + potential
    samples = [(0, e_kin, float(potential), e_kin + float(potential))]
    if frame_callback is not None:
        frame_callback(state, e_kin, float(potential))
    exploded = False
    halted = 0
    max_excursion = 0.0
    for _ in range(n_steps):
        try:
            state, forces, potential = step_verlet(state, forces, provider)
        except NonFiniteForceError:
            exploded = True
            halted = state.step + 1
            break
        if not np.all(np.isfinite(state.positions)):
            exploded = True
            halted = state.step
            break
        e_kin = state.kinetic_energy()
        e_tot = e_kin + potential
        max_excursion = max(max_excursion, abs(e_tot - e_tot0))
        if state.step % report_every == 0 or state.step == n_steps:
            samples.append((state.step, e_kin, potential, e_tot))
            if frame_callback is not None:
                frame_callback(state, e_kin, potential)
        if abs(e_tot - e_tot0) > explosion_threshold * state.n_atoms:
            exploded = True
            halted = state.step
            break
    n = initial.n_atoms
    if len(samples) >= 2:
        steps = np.array([s[0] for s in samples], dtype=np.float64)
        e_tot_series = np.array([s[3] for s in samples])
        t_ps = steps * initial.dt * 1e-3
        slope = np.polyfit(t_ps, e_tot_series, 1)[0]      # eV/ps
        drift_rate = float(slope * 1e3 / n)               # meV/atom/ps
    else:
        drift_rate = float("inf")
    report = DriftReport(
        drift_rate=drift_rate,
        max_excursion=float(max_excursion * 1e3 / n),
        exploded=exploded,
        halted_step=halted if exploded else state.step,
        n_steps=n_steps,
        n_atoms=n,
    )
    return NVEResult(report, samples, state)


def model_force_provider(model, species: np.ndarray):
    """Adapt a trained model to the positions -> (energy, forces) interface."""
    from .dataset import MolecularFrame

    species = np.asarray(species, dtype=np.int64)

    def provider(positions: np.ndarray):
        return model.predict(MolecularFrame(species, positions))

    return provider


def write_trajectory_frame(f, species_symbols, state: MDState, e_kin: float, e_pot: float) -> None:
    f.write(f"{state.n_atoms}\n")
    f.write(f"step={state.step} etot={e_kin + e_pot:.9g} epot={e_pot:.9g} ekin={e_kin:.9g}\n")
    for sym, pos in zip(species_symbols, state.positions):
        f.write(f"{sym} {pos[0]:.9g} {pos[1]:.9g} {pos[2]:.9g}\n")


def write_energy_csv(samples, path: str) -> None:
    rows = ["step,e_kin,e_pot,e_tot"]
    for step, e_kin, e_pot, e_tot in samples:
        rows.append(f"{step},{e_kin:.9g},{e_pot:.9g},{e_tot:.9g}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(rows) + "\n")
