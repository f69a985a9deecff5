import math

import numpy as np
import pytest

from cipca import DomainError, ValidationError, mds_embed


def distances_from_points(pts):
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def pairwise_multiset(coords):
    return np.sort(distances_from_points(coords)[np.triu_indices(len(coords), 1)])


class TestMdsEmbed:
    def test_planar_points_recovered(self, rng):
        pts = rng.standard_normal((12, 2))
        D = distances_from_points(pts)
        emb = mds_embed(D)
        assert emb.stress < 1e-6
        np.testing.assert_allclose(pairwise_multiset(emb.coords),
                                   pairwise_multiset(pts), atol=1e-6)

    def test_equilateral_triangle(self):
        D = np.ones((3, 3)) - np.eye(3)
        emb = mds_embed(D)
        np.testing.assert_allclose(pairwise_multiset(emb.coords),
                                   [1.0, 1.0, 1.0], atol=1e-6)

    def test_unit_square(self):
        s = math.sqrt(2.0)
        D = np.array([
            [0, 1, s, 1],
            [1, 0, 1, s],
            [s, 1, 0, 1],
            [1, s, 1, 0],
        ], dtype=float)
        emb = mds_embed(D)
        np.testing.assert_allclose(pairwise_multiset(emb.coords),
                                   [1, 1, 1, 1, s, s], atol=1e-6)

    def test_stress_nonincreasing(self, rng):
        # a non-embeddable distance set keeps the optimizer busy
        A = rng.uniform(0.5, 2.0, size=(10, 10))
        D = (A + A.T) / 2
        np.fill_diagonal(D, 0.0)
        emb = mds_embed(D)
        path = np.array(emb.stress_path)
        assert np.all(np.diff(path) <= 1e-12)
        assert 0.0 <= emb.stress <= 1.0

    def test_permutation_equivariance(self, rng):
        pts = rng.standard_normal((8, 2))
        D = distances_from_points(pts)
        perm = rng.permutation(8)
        emb1 = mds_embed(D)
        emb2 = mds_embed(D[np.ix_(perm, perm)])
        np.testing.assert_allclose(distances_from_points(emb2.coords),
                                   distances_from_points(emb1.coords)[np.ix_(perm, perm)],
                                   atol=1e-6)

    def test_deterministic_given_seed(self, rng):
        A = rng.uniform(0.5, 2.0, size=(6, 6))
        D = (A + A.T) / 2
        np.fill_diagonal(D, 0.0)
        e1 = mds_embed(D, seed=3)
        e2 = mds_embed(D, seed=3)
        np.testing.assert_array_equal(e1.coords, e2.coords)

    def test_all_zero_rejected(self):
        with pytest.raises(DomainError):
            mds_embed(np.zeros((4, 4)))

    def test_invalid_inputs_rejected(self):
        D = np.ones((3, 3)) - np.eye(3)
        with pytest.raises(ValidationError):
            mds_embed(D - 2.0)  # negative distances
        bad = D.copy()
        bad[0, 1] = 5.0
        with pytest.raises(ValidationError):
            mds_embed(bad)  # asymmetric
        bad = D.copy()
        bad[0, 0] = 1.0
        with pytest.raises(ValidationError):
            mds_embed(bad)  # nonzero diagonal

    def test_line_configuration(self):
        # collinear points have a rank-1 Gram matrix; the second dimension
        # degenerates and the seeded jitter must still converge cleanly
        pts = np.array([[0.0], [1.0], [2.0], [3.5]])
        D = np.abs(pts - pts.T)
        emb = mds_embed(D, seed=0)
        assert emb.stress < 1e-6
