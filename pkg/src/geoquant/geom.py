"""Exact 3D rotation primitives: matrices, Haar sampling, and the output representation.

All reference arithmetic is float64. Rotations are stored as plain 3x3
ndarrays; scalar features transform trivially and vector features transform
by the matrix itself, so no separate representation machinery is needed for
the degrees used here (0 and 1).
"""

from __future__ import annotations

import numpy as np

ORTHOGONALITY_TOL = 1e-12
DETERMINANT_TOL = 1e-12


def identity() -> np.ndarray:
    return np.eye(3)


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(m: np.ndarray, tol: float = ORTHOGONALITY_TOL) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    ortho = np.linalg.norm(m.T @ m - np.eye(3))
    return ortho <= tol and abs(np.linalg.det(m) - 1.0) <= DETERMINANT_TOL


def check_rotation(m: np.ndarray) -> np.ndarray:
    """Validate the rotation invariants and return the matrix as float64."""
    m = np.asarray(m, dtype=np.float64)
    if not is_rotation(m):
        raise ValueError("matrix is not a proper rotation within tolerance")
    return m


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Convert unit quaternions (w, x, y, z) to rotation matrices.

    Accepts shape (4,) or (n, 4); returns (3, 3) or (n, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


class HaarSampler:
    """Deterministic stream of Haar-uniform rotations and sphere directions.

    A unit quaternion drawn from four standard normals is uniform on S^3 and
    maps to a Haar-uniform rotation. The counter tracks how many draws have
    been consumed so replay behaviour is inspectable; a sampler is
    single-owner and not safe for concurrent draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self._rng = np.random.default_rng(self.seed)

    def rotation(self) -> np.ndarray:
        q = self._rng.standard_normal(4)
        self.counter += 1
        return rotation_from_quaternion(q)

    def rotations(self, n: int) -> np.ndarray:
        q = self._rng.standard_normal((n, 4))
        self.counter += n
        return rotation_from_quaternion(q)

    def direction(self) -> np.ndarray:
        return self.directions(1)[0]

    def directions(self, n: int) -> np.ndarray:
        """Uniform unit vectors on S^2, shape (n, 3)."""
        v = self._rng.standard_normal((n, 3))
        self.counter += n
        return v / np.linalg.norm(v, axis=1, keepdims=True)


def rotate(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply rotation r to a vector (3,) or a batch of vectors (..., 3)."""
    return np.asarray(v, dtype=np.float64) @ np.asarray(r, dtype=np.float64).T


def apply_output_rep(
    r: np.ndarray, energies: np.ndarray, forces: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Act on model outputs: scalars are untouched, each force vector rotates."""
    energies = np.array(energies, dtype=np.float64, copy=True)
    if energies.size == 0 or np.asarray(forces).size == 0:
        raise ValueError("output representation expects non-empty outputs")
    return energies, rotate(r, forces)
