"""Rotation primitives: exactness, group structure, and Haar uniformity."""

import numpy as np
import pytest

from geoquant import geom

CHI2_CRIT_P01_DF7 = 18.475  # chi-square critical value, p=0.01, 7 dof


def test_identity_rotation_fixes_vectors():
    v = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(geom.rotate(geom.identity(), v), v)


def test_quarter_turn_about_z():
    r = geom.rotation_z(np.pi / 2)
    np.testing.assert_allclose(geom.rotate(r, np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0], atol=1e-15)


def test_rotate_matches_scalar_loop_oracle():
    r = geom.HaarSampler(42).rotation()
    v = np.array([0.0, 0.0, 1.0])
    expected = np.array([sum(r[i, j] * v[j] for j in range(3)) for i in range(3)])
    np.testing.assert_allclose(geom.rotate(r, v), expected, atol=1e-15)


def test_norm_preservation():
    sampler = geom.HaarSampler(7)
    rng = np.random.default_rng(7)
    for _ in range(200):
        r = sampler.rotation()
        v = rng.standard_normal(3) * rng.uniform(0.1, 100.0)
        assert abs(np.linalg.norm(geom.rotate(r, v)) - np.linalg.norm(v)) <= 1e-12 * np.linalg.norm(v)


def test_group_closure():
    sampler = geom.HaarSampler(11)
    rng = np.random.default_rng(11)
    for _ in range(100):
        r1, r2 = sampler.rotation(), sampler.rotation()
        v = rng.standard_normal(3)
        left = geom.rotate(r1, geom.rotate(r2, v))
        right = geom.rotate(r1 @ r2, v)
        np.testing.assert_allclose(left, right, atol=1e-11)


def test_sampled_rotations_satisfy_invariants():
    sampler = geom.HaarSampler(0)
    for _ in range(50):
        assert geom.is_rotation(sampler.rotation())


def test_sampler_determinism():
    a = geom.HaarSampler(123)
    b = geom.HaarSampler(123)
    for _ in range(10):
        np.testing.assert_array_equal(a.rotation(), b.rotation())
    assert a.counter == b.counter == 10


def test_haar_column_octant_uniformity():
    n = 100_000
    cols = geom.HaarSampler(0).rotations(n)[:, :, 0]
    octant = (cols[:, 0] > 0) * 4 + (cols[:, 1] > 0) * 2 + (cols[:, 2] > 0)
    counts = np.bincount(octant, minlength=8)
    expected = n / 8
    # 3-sigma binomial band per octant plus the chi-square test
    sigma = np.sqrt(n * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - expected) < 3 * sigma)
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < CHI2_CRIT_P01_DF7


def test_output_representation():
    energies = np.array([1.5])
    forces = np.array([[1.0, 0.0, 0.0]])
    r = geom.rotation_z(np.pi / 2)
    e2, f2 = geom.apply_output_rep(r, energies, forces)
    np.testing.assert_array_equal(e2, energies)
    np.testing.assert_allclose(f2, [[0.0, 1.0, 0.0]], atol=1e-15)

    sampler = geom.HaarSampler(3)
    rng = np.random.default_rng(3)
    r = sampler.rotation()
    forces = rng.standard_normal((5, 3))
    energies = rng.standard_normal(2)
    e2, f2 = geom.apply_output_rep(r, energies, forces)
    assert e2.tobytes() == energies.tobytes()
    for i in range(5):
        np.testing.assert_allclose(f2[i], geom.rotate(r, forces[i]), atol=1e-15)


def test_output_representation_rejects_empty():
    with pytest.raises(ValueError):
        geom.apply_output_rep(geom.identity(), np.array([]), np.zeros((0, 3)))


def test_check_rotation_rejects_scaled_matrix():
    with pytest.raises(ValueError):
        geom.check_rotation(2.0 * np.eye(3))
