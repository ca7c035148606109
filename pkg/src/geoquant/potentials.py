"""Analytic cluster potentials used as ground-truth oracles.

Pairwise Morse wells with an optional harmonic angular term: smooth,
rotation- and translation-invariant by construction, with closed-form
forces. Pair forces are accumulated antisymmetrically so the total force
is exactly zero and simulated momentum stays conserved to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POTENTIAL_TAGS = ("morse-pairwise", "morse-plus-angular")


@dataclass(frozen=True)
class PotentialParams:
    well_depth: float = 1.0          # eV
    steepness: float = 1.5           # 1/Angstrom
    equilibrium: float = 1.5         # Angstrom
    species_factor: float = 0.1      # well depth grows with species index sum
    angular_strength: float = 0.3    # eV, harmonic-in-cosine term
    angular_cos0: float = -1.0 / 3.0
    angular_cutoff: float = 2.4      # Angstrom


def morse_pair_depth(z_i: int, z_j: int, p: PotentialParams) -> float:
    return p.well_depth * (1.0 + p.species_factor * (z_i + z_j))


def pairwise_energy_forces(
    species: np.ndarray, positions: np.ndarray, p: PotentialParams
) -> tuple[float, np.ndarray]:
    n = positions.shape[0]
    energy = 0.0
    forces = np.zeros((n, 3))
    for i in range(n):
        for j in range(i + 1, n):
            rij = positions[j] - positions[i]
            d = float(np.linalg.norm(rij))
            depth = morse_pair_depth(int(species[i]), int(species[j]), p)
            decay = np.exp(-p.steepness * (d - p.equilibrium))
            energy += depth * (1.0 - decay) ** 2
            dv = 2.0 * depth * (1.0 - decay) * p.steepness * decay
            pair_force = dv * rij / d
            forces[i] += pair_force
            forces[j] -= pair_force
    return energy, forces


def angular_energy_forces(
    positions: np.ndarray, p: PotentialParams
) -> tuple[float, np.ndarray]:
    """Harmonic (cos theta - cos0)^2 terms over bonded triples i-j-k centred at j."""
    n = positions.shape[0]
    energy = 0.0
    forces = np.zeros((n, 3))
    dists = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    for j in range(n):
        neighbors = [i for i in range(n) if i != j and dists[j, i] <= p.angular_cutoff]
        for a_idx in range(len(neighbors)):
            for b_idx in range(a_idx + 1, len(neighbors)):
                i, k = neighbors[a_idx], neighbors[b_idx]
                a = positions[i] - positions[j]
                b = positions[k] - positions[j]
                na, nb = np.linalg.norm(a), np.linalg.norm(b)
                cos = float(a @ b / (na * nb))
                diff = cos - p.angular_cos0
                energy += 0.5 * p.angular_strength * diff * diff
                dcos = p.angular_strength * diff
                grad_a = b / (na * nb) - cos * a / (na * na)
                grad_b = a / (na * nb) - cos * b / (nb * nb)
                forces[i] -= dcos * grad_a
                forces[k] -= dcos * grad_b
                forces[j] += dcos * (grad_a + grad_b)
    return energy, forces


def energy_forces(
    tag: str, species: np.ndarray, positions: np.ndarray, p: PotentialParams
) -> tuple[float, np.ndarray]:
    if tag not in POTENTIAL_TAGS:
        raise ValueError(f"unknown potential tag {tag!r}")
    energy, forces = pairwise_energy_forces(species, positions, p)
    if tag == "morse-plus-angular":
        e2, f2 = angular_energy_forces(positions, p)
        energy += e2
        forces += f2
    return energy, forces


def make_provider(tag: str, species: np.ndarray, p: PotentialParams | None = None):
    """Bind species and parameters into a positions -> (energy, forces) callable."""
    p = p or PotentialParams()
    species = np.asarray(species)

    def provider(positions: np.ndarray) -> tuple[float, np.ndarray]:
        return energy_forces(tag, species, positions, p)

    return provider
