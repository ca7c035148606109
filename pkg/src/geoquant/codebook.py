"""Finite codebooks of unit directions on the sphere.

Supported constructions: the octahedron and icosahedron vertex sets (whose
covering radii have closed forms), golden-angle fibonacci lattices, and
spherical k-means centroids fitted to uniform samples. Lookup is an
exhaustive scan; with at most a few hundred codewords nothing faster is
warranted, and the scan order defines the tie-break (lowest index wins).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSizeError, NotUnitError
from .geom import HaarSampler

UNIT_TOL = 1e-9
MIN_PAIRWISE_ANGLE = 1e-6

# Closed-form covering radii used by tests and sanity checks.
OCTAHEDRON_COVERING_RADIUS = float(np.arccos(1.0 / np.sqrt(3.0)))
ICOSAHEDRON_MIN_PAIRWISE_ANGLE = float(np.arccos(1.0 / np.sqrt(5.0)))

_TAG_RE = re.compile(r"^(octahedron|icosahedron|fibonacci\((\d+)\)|kmeans\((\d+),(\d+)\))$")

_DEFAULT_ESTIMATE_SAMPLES = 20_000


def parse_construction(tag: str) -> tuple[str, int | None, int | None]:
    """Split a construction tag into (kind, n, seed)."""
    m = _TAG_RE.match(tag.replace(" ", ""))
    if m is None:
        raise InvalidSizeError(f"unknown codebook construction tag: {tag!r}")
    text = m.group(1)
    if text == "octahedron":
        return "octahedron", None, None
    if text == "icosahedron":
        return "icosahedron", None, None
    if text.startswith("fibonacci"):
        return "fibonacci", int(m.group(2)), None
    return "kmeans", int(m.group(3)), int(m.group(4))


@dataclass
class SphericalCodebook:
    codewords: np.ndarray  # (m, 3), unit rows
    construction: str
    covering_radius_est: float = field(default=0.0)

    def __len__(self) -> int:
        return self.codewords.shape[0]

    def validate(self) -> None:
        norms = np.linalg.norm(self.codewords, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise NotUnitError("codebook contains non-unit codewords")
        dots = np.clip(self.codewords @ self.codewords.T, -1.0, 1.0)
        np.fill_diagonal(dots, -1.0)
        if np.arccos(np.max(dots)) <= MIN_PAIRWISE_ANGLE:
            raise InvalidSizeError("codebook contains duplicate codewords")


def _octahedron() -> np.ndarray:
    eye = np.eye(3)
    return np.concatenate([eye, -eye], axis=0)


def _icosahedron() -> np.ndarray:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            verts.append([0.0, a, b])
            verts.append([a, b, 0.0])
            verts.append([b, 0.0, a])
    verts = np.array(verts)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True)


def _fibonacci(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = np.pi * (3.0 - np.sqrt(5.0)) * i
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    pts = np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _kmeans(n: int, seed: int, max_iter: int = 200) -> np.ndarray:
    sampler = HaarSampler(seed)
    data = sampler.directions(100 * n)
    centers = data[:n].copy()
    labels = np.full(data.shape[0], -1, dtype=np.int64)
    for _ in range(max_iter):
        new_labels = np.argmax(data @ centers.T, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(n):
            members = data[labels == k]
            if members.shape[0] == 0:
                # Reseed an empty cluster from the point farthest from every center.
                worst = np.argmin(np.max(data @ centers.T, axis=1))
                centers[k] = data[worst]
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centers[k] = mean / norm
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def build(construction: str) -> SphericalCodebook:
    """Construct a codebook from its tag, e.g. ``fibonacci(256)``."""
    kind, n, seed = parse_construction(construction)
    if kind == "octahedron":
        words = _octahedron()
    elif kind == "icosahedron":
        words = _icosahedron()
    else:
        if n is None or n < 4:
            raise InvalidSizeError(f"parametric codebooks need n >= 4, got {n}")
        words = _fibonacci(n) if kind == "fibonacci" else _kmeans(n, seed or 0)
    cb = SphericalCodebook(codewords=words, construction=construction.replace(" ", ""))
    cb.validate()
    estimate_covering_radius(cb, _DEFAULT_ESTIMATE_SAMPLES, seed=0)
    return cb


def _check_unit(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > UNIT_TOL:
        raise NotUnitError(f"direction is not unit norm: |u|={np.linalg.norm(u)!r}")
    return u


def nearest(cb: SphericalCodebook, u: np.ndarray) -> tuple[int, np.ndarray]:
    """Nearest codeword in angle; ties resolve to the lowest index."""
    u = _check_unit(u)
    idx = int(np.argmax(cb.codewords @ u))
    return idx, cb.codewords[idx].copy()


def nearest_many(cb: SphericalCodebook, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised nearest lookup for an (..., 3) stack of unit vectors."""
    u = np.asarray(u, dtype=np.float64)
    flat = u.reshape(-1, 3)
    idx = np.argmax(flat @ cb.codewords.T, axis=1)
    words = cb.codewords[idx].reshape(u.shape)
    return idx.reshape(u.shape[:-1]), words


def estimate_covering_radius(cb: SphericalCodebook, n_samples: int, seed: int) -> float:
    """Monte-Carlo estimate of the worst nearest-codeword angle.

    The estimate is a maximum over uniform samples, so it approaches the true
    covering radius from below as n_samples grows.
    """
    sampler = HaarSampler(seed)
    worst = -1.0
    remaining = int(n_samples)
    chunk = 20_000
    while remaining > 0:
        take = min(chunk, remaining)
        pts = sampler.directions(take)
        best_dot = np.max(pts @ cb.codewords.T, axis=1)
        worst = max(worst, float(np.max(np.arccos(np.clip(best_dot, -1.0, 1.0)))))
        remaining -= take
    cb.covering_radius_est = worst
    return worst


def codebook_id(tag: str) -> int:
    """Stable 32-bit FNV-1a hash of the construction tag."""
    h = 0x811C9DC5
    for byte in tag.encode("utf-8"):
        h = ((h ^ byte) * 0x01000193) & 0xFFFFFFFF
    return h


def save_codebook(cb: SphericalCodebook, path: str) -> None:
    lines = [f"codebook {cb.construction} {len(cb)}"]
    for w in cb.codewords:
        lines.append(f"{w[0]:.17g} {w[1]:.17g} {w[2]:.17g}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_codebook(path: str) -> SphericalCodebook:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "codebook":
            raise InvalidSizeError(f"not a codebook file: {path}")
        tag, count = header[1], int(header[2])
        words = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if words.shape != (count, 3):
        raise InvalidSizeError(f"codebook file {path} has wrong shape {words.shape}")
    cb = SphericalCodebook(codewords=words, construction=tag)
    cb.validate()
    return cb
