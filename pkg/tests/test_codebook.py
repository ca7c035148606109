"""Spherical codebooks: constructions, nearest lookup, covering radius."""

import numpy as np
import pytest

from geoquant import codebook as cb
from geoquant.errors import InvalidSizeError, NotUnitError
from geoquant.geom import HaarSampler


def test_octahedron_is_the_axis_set():
    book = cb.build("octahedron")
    assert len(book) == 6
    expected = {(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)}
    got = {tuple(int(round(x)) for x in w) for w in book.codewords}
    assert got == expected


def test_icosahedron_min_pairwise_angle():
    book = cb.build("icosahedron")
    assert len(book) == 12
    # brute force over all vertex pairs
    angles = []
    for i in range(12):
        for j in range(i + 1, 12):
            dot = float(np.clip(book.codewords[i] @ book.codewords[j], -1, 1))
            angles.append(np.arccos(dot))
    assert abs(min(angles) - cb.ICOSAHEDRON_MIN_PAIRWISE_ANGLE) < 1e-12


def test_fibonacci_invariants():
    book = cb.build("fibonacci(64)")
    assert len(book) == 64
    book.validate()
    norms = np.linalg.norm(book.codewords, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_kmeans_build_invariants():
    book = cb.build("kmeans(16,5)")
    assert len(book) == 16
    book.validate()


def test_build_rejects_tiny_sizes():
    with pytest.raises(InvalidSizeError):
        cb.build("fibonacci(3)")
    with pytest.raises(InvalidSizeError):
        cb.build("kmeans(2,0)")
    with pytest.raises(InvalidSizeError):
        cb.build("dodecahedron")


def test_nearest_exact_codeword():
    book = cb.build("octahedron")
    idx, word = cb.nearest(book, np.array([1.0, 0.0, 0.0]))
    assert idx == 0
    np.testing.assert_array_equal(word, [1.0, 0.0, 0.0])


def test_nearest_tie_breaks_to_lowest_index():
    book = cb.build("octahedron")
    u = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    # 45 degrees from both +x and +y; brute-force confirms the tie
    angles = np.arccos(np.clip(book.codewords @ u, -1, 1))
    assert np.sum(np.isclose(angles, angles.min())) == 2
    idx, word = cb.nearest(book, u)
    np.testing.assert_array_equal(word, [1.0, 0.0, 0.0])
    assert idx == int(np.argmax(book.codewords @ u))


def test_nearest_rejects_non_unit():
    book = cb.build("octahedron")
    with pytest.raises(NotUnitError):
        cb.nearest(book, np.array([1.0, 1.0, 0.0]))


def test_nearest_matches_independent_scan():
    book = cb.build("fibonacci(64)")
    samples = HaarSampler(9).directions(1000)
    for u in samples:
        idx, _ = cb.nearest(book, u)
        # independently coded exhaustive scan over angles
        best, best_angle = -1, np.inf
        for k, w in enumerate(book.codewords):
            ang = np.arccos(np.clip(float(w @ u), -1.0, 1.0))
            if ang < best_angle - 1e-15:
                best, best_angle = k, ang
        assert idx == best


def test_nearest_many_agrees_with_single():
    book = cb.build("fibonacci(32)")
    pts = HaarSampler(4).directions(100)
    idx, words = cb.nearest_many(book, pts)
    for k, u in enumerate(pts):
        single = cb.nearest(book, u)
        assert idx[k] == single[0]


def test_octahedron_covering_radius_estimate():
    book = cb.build("octahedron")
    est = cb.estimate_covering_radius(book, 200_000, seed=1)
    assert est <= cb.OCTAHEDRON_COVERING_RADIUS + 1e-9
    assert cb.OCTAHEDRON_COVERING_RADIUS - est < 0.01
    assert book.covering_radius_est == est


def test_single_codeword_covering_radius_approaches_pi():
    lone = cb.SphericalCodebook(codewords=np.array([[0.0, 0.0, 1.0]]), construction="octahedron")
    est = cb.estimate_covering_radius(lone, 50_000, seed=2)
    assert est > np.pi - 0.02


def test_finer_fibonacci_covers_better():
    coarse = cb.build("fibonacci(64)")
    fine = cb.build("fibonacci(256)")
    assert fine.covering_radius_est < coarse.covering_radius_est


def test_nearest_angle_bounded_by_covering_radius():
    book = cb.build("octahedron")
    pts = HaarSampler(12).directions(20_000)
    best_dot = np.max(pts @ book.codewords.T, axis=1)
    angles = np.arccos(np.clip(best_dot, -1, 1))
    assert np.max(angles) <= cb.OCTAHEDRON_COVERING_RADIUS + 1e-9


def test_chord_angle_identity():
    book = cb.build("fibonacci(128)")
    pts = HaarSampler(13).directions(2000)
    idx, words = cb.nearest_many(book, pts)
    chord = np.linalg.norm(pts - words, axis=1)
    theta = np.arccos(np.clip(np.sum(pts * words, axis=1), -1, 1))
    np.testing.assert_allclose(chord, 2.0 * np.sin(theta / 2.0), atol=1e-12)


def test_nearest_is_equivariant_when_codebook_co_rotates():
    book = cb.build("fibonacci(64)")
    sampler = HaarSampler(21)
    for _ in range(20):
        r = sampler.rotation()
        u = sampler.direction()
        idx, word = cb.nearest(book, u)
        rotated = cb.SphericalCodebook(codewords=book.codewords @ r.T, construction=book.construction)
        ru = r @ u
        idx_rot, word_rot = cb.nearest(rotated, ru / np.linalg.norm(ru))
        assert idx_rot == idx
        np.testing.assert_allclose(word_rot, r @ word, atol=1e-12)


def test_serialization_round_trip(tmp_path):
    book = cb.build("fibonacci(64)")
    path = tmp_path / "book.txt"
    cb.save_codebook(book, str(path))
    loaded = cb.load_codebook(str(path))
    assert loaded.construction == book.construction
    np.testing.assert_array_equal(loaded.codewords, book.codewords)
    header = path.read_text().splitlines()[0]
    assert header == "codebook fibonacci(64) 64"


def test_codebook_id_is_stable():
    assert cb.codebook_id("fibonacci(256)") == cb.codebook_id("fibonacci(256)")
    assert cb.codebook_id("fibonacci(256)") != cb.codebook_id("octahedron")
