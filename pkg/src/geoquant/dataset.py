"""Molecular frames, synthetic dataset generation, and on-disk formats.

Datasets are stored as a multi-frame XYZ geometry file plus a companion CSV
with the reference energy and flattened force components per frame. Floats
are written with 17 significant digits so a write/read round trip is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import _fibonacci
from .errors import SelfCheckFailedError
from .potentials import POTENTIAL_TAGS, PotentialParams, energy_forces

SPECIES_SYMBOLS = ("C", "O", "H", "N", "S", "P", "F", "Cl")
SPECIES_MASSES = (12.011, 15.999, 1.008, 14.007, 32.06, 30.974, 18.998, 35.45)
MAX_SPECIES = len(SPECIES_SYMBOLS)

_SYMBOL_TO_ID = {s: i for i, s in enumerate(SPECIES_SYMBOLS)}


@dataclass
class MolecularFrame:
    species: np.ndarray                 # (n,) small integers
    positions: np.ndarray               # (n, 3) Angstrom
    energy: float | None = None         # eV
    forces: np.ndarray | None = None    # (n, 3) eV/Angstrom

    def __post_init__(self):
        self.species = np.asarray(self.species, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("frame positions must be finite")
        if (self.energy is None) != (self.forces is None):
            raise ValueError("energy and force labels must be present together")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)

    @property
    def n_atoms(self) -> int:
        return self.species.shape[0]

    def masses(self) -> np.ndarray:
        return np.array([SPECIES_MASSES[z] for z in self.species])


def rotate_frame(frame: MolecularFrame, r: np.ndarray) -> MolecularFrame:
    return MolecularFrame(frame.species.copy(), frame.positions @ np.asarray(r).T)


def translate_frame(frame: MolecularFrame, shift: np.ndarray) -> MolecularFrame:
    return MolecularFrame(frame.species.copy(), frame.positions + np.asarray(shift))


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_frames: int = 64
    atoms_per_frame: int = 4
    potential: str = "morse-pairwise"
    amplitude: float = 0.15             # Angstrom, Gaussian perturbation
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.atoms_per_frame <= 10:
            raise ValueError("atoms_per_frame must be in [2, 10]")
        if self.potential not in POTENTIAL_TAGS:
            raise ValueError(f"unknown potential {self.potential!r}")


def template_positions(n: int, spacing: float) -> np.ndarray:
    """A compact cluster with nearest-neighbour distance equal to spacing."""
    if n == 2:
        return np.array([[0.0, 0.0, 0.0], [spacing, 0.0, 0.0]])
    if n == 3:
        return spacing * np.array(
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, np.sqrt(3.0) / 2.0, 0.0]]
        )
    if n == 4:
        # Vertices (+-1, +-1, +-1) with even parity are 2*sqrt(2) apart.
        return spacing / (2.0 * np.sqrt(2.0)) * np.array(
            [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
        )
    pts = _fibonacci(n)
    dots = np.clip(pts @ pts.T, -1.0, 1.0)
    np.fill_diagonal(dots, -1.0)
    min_chord = np.sqrt(2.0 - 2.0 * np.max(dots))
    return pts * (spacing / min_chord)


def self_check_frame(frame: MolecularFrame, tag: str, p: PotentialParams, h: float = 1e-5) -> float:
    """Max relative deviation of analytic forces from central differences."""
    scale = max(1.0, float(np.max(np.abs(frame.forces))))
    worst = 0.0
    for i in range(frame.n_atoms):
        for axis in range(3):
            plus = frame.positions.copy()
            plus[i, axis] += h
            minus = frame.positions.copy()
            minus[i, axis] -= h
            e_plus, _ = energy_forces(tag, frame.species, plus, p)
            e_minus, _ = energy_forces(tag, frame.species, minus, p)
            fd = -(e_plus - e_minus) / (2.0 * h)
            worst = max(worst, abs(fd - frame.forces[i, axis]) / scale)
    return worst


def generate_dataset(
    spec: SyntheticDatasetSpec, params: PotentialParams | None = None
) -> list[MolecularFrame]:
    params = params or PotentialParams()
    rng = np.random.default_rng(spec.seed)
    n = spec.atoms_per_frame
    template = template_positions(n, params.equilibrium)
    species = np.arange(n, dtype=np.int64) % 2
    frames = []
    for _ in range(spec.n_frames):
        positions = template + spec.amplitude * rng.standard_normal((n, 3))
        energy, forces = energy_forces(spec.potential, species, positions, params)
        frame = MolecularFrame(species.copy(), positions, float(energy), forces)
        err = self_check_frame(frame, spec.potential, params)
        if err > 1e-6:
            raise SelfCheckFailedError(
                f"analytic forces disagree with central differences ({err:.2e})"
            )
        frames.append(frame)
    return frames


# --- on-disk formats --------------------------------------------------------


def write_xyz(frames: list[MolecularFrame], path: str, comments: list[str] | None = None) -> None:
    lines = []
    for k, frame in enumerate(frames):
        lines.append(str(frame.n_atoms))
        lines.append(comments[k] if comments is not None else f"frame={k}")
        for z, pos in zip(frame.species, frame.positions):
            lines.append(
                f"{SPECIES_SYMBOLS[z]} {pos[0]:.17g} {pos[1]:.17g} {pos[2]:.17g}"
            )
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_xyz(path: str) -> list[MolecularFrame]:
    frames = []
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.rstrip("\n") for ln in f]
    pos = 0
    while pos < len(lines) and lines[pos].strip():
        n = int(lines[pos])
        body = lines[pos + 2 : pos + 2 + n]
        species = np.array([_SYMBOL_TO_ID[row.split()[0]] for row in body], dtype=np.int64)
        coords = np.array([[float(v) for v in row.split()[1:4]] for row in body])
        frames.append(MolecularFrame(species, coords))
        pos += 2 + n
    return frames


def write_labels_csv(frames: list[MolecularFrame], path: str) -> None:
    n = frames[0].n_atoms
    header = ["frame", "energy"]
    for i in range(n):
        header += [f"fx_{i}", f"fy_{i}", f"fz_{i}"]
    rows = [",".join(header)]
    for k, frame in enumerate(frames):
        vals = [str(k), f"{frame.energy:.17g}"]
        vals += [f"{v:.17g}" for v in frame.forces.reshape(-1)]
        rows.append(",".join(vals))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(rows) + "\n")


def read_labels_csv(path: str) -> list[tuple[float, np.ndarray]]:
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    labels = []
    for row in lines[1:]:
        vals = row.split(",")
        energy = float(vals[1])
        forces = np.array([float(v) for v in vals[2:]]).reshape(-1, 3)
        labels.append((energy, forces))
    return labels


def labels_path_for(xyz_path: str) -> str:
    return xyz_path[: -len(".xyz")] + ".labels.csv" if xyz_path.endswith(".xyz") else xyz_path + ".labels.csv"


def save_dataset(frames: list[MolecularFrame], xyz_path: str) -> None:
    write_xyz(frames, xyz_path)
    write_labels_csv(frames, labels_path_for(xyz_path))


def load_dataset(xyz_path: str) -> list[MolecularFrame]:
    frames = read_xyz(xyz_path)
    labels = read_labels_csv(labels_path_for(xyz_path))
    if len(labels) != len(frames):
        raise ValueError("geometry and label files disagree on frame count")
    out = []
    for frame, (energy, forces) in zip(frames, labels):
        out.append(MolecularFrame(frame.species, frame.positions, energy, forces))
    return out
