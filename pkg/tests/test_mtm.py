"""Tests for region pooling, the two-layer projector, and the five
modality loss variants."""

import numpy as np
import pytest

from mbridge import mtm, numcore as nc
from mbridge.mtm import (
    MODALITY_LOSSES,
    MtmModel,
    init_mtm,
    median_heuristic_gamma,
    modality_loss,
    pool_regions,
    pool_regions_batch,
    project,
)
from mbridge.numcore import DimensionError, Parameter, grad_check


def model_from(w1, b1, w2, b2):
    return MtmModel(
        w1=Parameter("mtm.W1", w1), b1=Parameter("mtm.b1", b1),
        w2=Parameter("mtm.W2", w2), b2=Parameter("mtm.b2", b2),
    )


class TestPoolRegions:
    def test_two_symmetric_rows(self):
        assert np.array_equal(pool_regions([[0.0, 2.0], [2.0, 0.0]]), [1.0, 1.0])

    def test_single_row_unchanged(self):
        row = np.array([[3.0, -1.0, 0.5]])
        assert np.array_equal(pool_regions(row), row[0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(3, 5))
        manual = np.zeros(5)
        for i in range(3):
            manual += v[i]
        manual /= 3.0
        assert np.allclose(pool_regions(v), manual, atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pool_regions(np.zeros((0, 4)))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            k = int(rng.integers(1, 6))
            v = rng.normal(size=(k, 4))
            perm = rng.permutation(k)
            assert np.allclose(pool_regions(v), pool_regions(v[perm]), atol=1e-14)

    def test_batch_masked_mean(self):
        regions = np.zeros((2, 3, 2))
        regions[0, 0] = [2.0, 4.0]
        regions[0, 1] = [4.0, 2.0]
        regions[1, 0] = [5.0, 5.0]
        mask = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        out = pool_regions_batch(regions, mask)
        assert np.allclose(out, [[3.0, 3.0], [5.0, 5.0]])

    def test_batch_requires_a_region(self):
        with pytest.raises(ValueError):
            pool_regions_batch(np.zeros((1, 2, 3)), np.zeros((1, 2)))


class TestProject:
    def test_zero_model(self):
        m = model_from(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
        assert np.array_equal(project(m, np.ones(3)).data, np.zeros(2))

    def test_identity_passthrough(self):
        m = model_from(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
        v = np.array([0.5, 0.0, 2.0])
        assert np.array_equal(project(m, v).data, v)

    def test_hand_case(self):
        # W1 v = (-1, -1); +b1 = (-0.5, -1.5); W2 h = (0.5, -2.0);
        # +b2 = (0.6, -7.0); relu = (0.6, 0.0)
        m = model_from([[1.0, 2.0], [3.0, 4.0]], [0.5, -0.5],
                       [[2.0, -1.0], [1.0, 1.0]], [0.1, -5.0])
        out = project(m, np.array([1.0, -1.0]))
        assert np.allclose(out.data, [0.6, 0.0], atol=1e-15)

    def test_wrong_width_rejected(self):
        m = model_from(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(DimensionError):
            project(m, np.ones(4))

    def test_output_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            m = init_mtm(4, 3, rng, init_scale=1.0)
            out = project(m, rng.normal(size=4) * 5)
            assert out.data.min() >= 0.0

    def test_batch_matches_per_sample(self):
        rng = np.random.default_rng(3)
        m = init_mtm(5, 4, rng)
        batch = rng.normal(size=(6, 5))
        out = project(m, batch).data
        for i in range(6):
            assert np.allclose(out[i], project(m, batch[i]).data, atol=1e-15)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        m = init_mtm(5, 4, rng, init_scale=0.5)
        v = rng.normal(size=(3, 5))
        target = rng.normal(size=(3, 4))

        def f():
            return modality_loss("mse", project(m, v), target)
        assert grad_check(f, m.parameters()) < 1e-4


class TestModalityLossValues:
    def test_identical_inputs_zero_everywhere(self):
        rng = np.random.default_rng(5)
        batch = np.abs(rng.normal(size=(4, 6))) + 0.1
        for kind in MODALITY_LOSSES:
            assert modality_loss(kind, batch.copy(), batch.copy()).item() == 0.0

    def test_mse_hand_value(self):
        assert modality_loss("mse", np.array([1.0, 1.0]), np.zeros(2)).item() == 1.0

    def test_cos_orthogonal(self):
        loss = modality_loss("cos", np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert abs(loss.item() - 1.0) < 1e-15

    def test_kld_zero_and_positive(self):
        same = np.array([0.3, -1.0, 2.0])
        assert modality_loss("kld", same, same.copy()).item() == 0.0
        other = np.array([2.0, -1.0, 0.3])
        assert modality_loss("kld", same, other).item() > 0.0

    def test_mmd_identical_batches(self):
        rng = np.random.default_rng(6)
        batch = rng.normal(size=(5, 4))
        assert abs(modality_loss("mmd", batch, batch.copy()).item()) < 1e-10

    def test_mmd_separated_batches_positive(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(8, 3))
        b = rng.normal(size=(8, 3)) + 4.0
        assert modality_loss("mmd", a, b).item() > 0.1

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            modality_loss("huber", np.zeros(2), np.zeros(2))

    def test_mmd_needs_2d_rows(self):
        with pytest.raises(ValueError):
            modality_loss("mmd", np.zeros(3), np.zeros(3))

    def test_mmd_single_row_degenerates_to_kernel_distance(self):
        # identical singleton sets: every kernel value is 1, so mmd is 0
        x = np.array([[0.3, -1.2, 0.7]])
        assert modality_loss("mmd", x, x.copy()).item() == 0.0
        y = x + 2.0
        assert modality_loss("mmd", x, y).item() > 0.0

    def test_cos_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            modality_loss("cos", np.zeros(3), np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            modality_loss("mse", np.zeros(3), np.zeros(4))


class TestModalityLossProperties:
    def test_all_variants_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            a = rng.normal(size=(4, 5)) + 0.01
            b = rng.normal(size=(4, 5)) + 0.01
            for kind in MODALITY_LOSSES:
                assert modality_loss(kind, a, b).item() >= 0.0

    def test_mse_mae_zero_iff_equal(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            a = rng.normal(size=6)
            b = a + rng.normal(size=6) * 0.1
            if np.array_equal(a, b):
                continue
            assert modality_loss("mse", a, b).item() > 0.0
            assert modality_loss("mae", a, b).item() > 0.0
            assert modality_loss("mse", a, a.copy()).item() == 0.0
            assert modality_loss("mae", a, a.copy()).item() == 0.0

    def test_cos_zero_for_positive_scaling(self):
        rng = np.random.default_rng(10)
        v = rng.normal(size=5)
        assert modality_loss("cos", 2.5 * v, v).item() < 1e-12
        w = v + np.array([1.0, 0.0, 0.0, 0.0, 0.0]) * 3
        assert modality_loss("cos", w, v).item() > 1e-6

    def test_mse_mae_symmetric(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            a = rng.normal(size=7)
            b = rng.normal(size=7)
            for kind in ("mse", "mae"):
                ab = modality_loss(kind, a, b).item()
                ba = modality_loss(kind, b, a).item()
                assert abs(ab - ba) < 1e-15

    def test_kld_asymmetric(self):
        a = np.array([0.0, 0.0, 5.0])
        b = np.array([0.0, 0.0, 0.0])
        ab = modality_loss("kld", a, b).item()
        ba = modality_loss("kld", b, a).item()
        assert abs(ab - ba) > 1e-3

    def test_relu_floor_on_mse(self):
        """When the target has negative entries the nonnegative projector
        output cannot reach it; the loss floor is the mass below zero."""
        rng = np.random.default_rng(12)
        m = init_mtm(4, 6, rng)
        for _ in range(100):
            target = rng.normal(size=6)
            pred = project(m, rng.normal(size=4))
            floor = np.square(np.minimum(target, 0.0)).mean()
            assert modality_loss("mse", pred, target).item() >= floor - 1e-12

    def test_gradients_all_variants(self):
        rng = np.random.default_rng(13)
        p = Parameter("p", rng.normal(size=(4, 5)) + 0.2)
        target = rng.normal(size=(4, 5))
        gamma = median_heuristic_gamma(p.value, target)
        for kind in MODALITY_LOSSES:
            def f():
                return modality_loss(kind, p.tensor(), target, gamma=gamma)
            assert grad_check(f, [p]) < 1e-4, kind


class TestMedianHeuristic:
    def test_known_distances(self):
        # three points on a line: squared distances 1, 1, 4; median 1
        x = np.array([[0.0], [1.0]])
        y = np.array([[2.0]])
        assert median_heuristic_gamma(x, y) == 0.5

    def test_degenerate_batch_falls_back(self):
        z = np.ones((3, 2))
        assert median_heuristic_gamma(z, z) == 1.0
