import numpy as np
import pytest

from moe_rebasin.checks import relative_deviation, tie_heavy_points
from moe_rebasin.harness import random_params
from moe_rebasin.model import MoEConfig, ShapeError, expert_forward, in_omega, moe_forward
from moe_rebasin.numerics import RngStream
from moe_rebasin.symmetry import (GroupElement, HiddenPerms, apply_group, apply_hidden_perms,
                                  compose, invert_permutation, plant_equivalent,
                                  random_group_element, random_hidden_perms)

CONFIGS = [MoEConfig.dense(4, 3, 5), MoEConfig.sparse(5, 3, 4, 2), MoEConfig.shared(1, 4, 3, 4, 2)]


def max_abs(a, b):
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a.as_dict().values(), b.as_dict().values()))


class TestApplyGroup:
    def test_identity_is_bitwise(self, rng):
        for config in CONFIGS:
            p = random_params(config, rng)
            assert apply_group(p, GroupElement.identity(config.n_gates, config.d)).equals(p)

    def test_swap(self, rng):
        p = random_params(MoEConfig.dense(2, 3, 4), rng)
        q = apply_group(p, GroupElement(np.zeros(3), 0.0, [1, 0]))
        np.testing.assert_array_equal(q.W, p.W[::-1])
        np.testing.assert_array_equal(q.b, p.b[::-1])
        np.testing.assert_array_equal(q.A, p.A[::-1])
        np.testing.assert_array_equal(q.v, p.v[::-1])

    def test_entry_reads_from_tau(self, rng):
        p = random_params(MoEConfig.dense(3, 2, 2), rng)
        g = GroupElement(np.array([1.0, -1.0]), 0.5, [2, 0, 1])
        q = apply_group(p, g)
        for i, src in enumerate([2, 0, 1]):
            np.testing.assert_array_equal(q.W[i], p.W[src] + [1.0, -1.0])
            assert q.b[i] == p.b[src] + 0.5
            np.testing.assert_array_equal(q.B[i], p.B[src])

    def test_inverse_recovers(self, rng):
        for config in CONFIGS:
            p = random_params(config, rng)
            g = random_group_element(config.n_gates, config.d, rng, 1.0)
            assert max_abs(apply_group(apply_group(p, g), g.inverse()), p) <= 1e-15

    def test_group_law(self, rng):
        for config in CONFIGS:
            p = random_params(config, rng)
            g1 = random_group_element(config.n_gates, config.d, rng, 1.0)
            g2 = random_group_element(config.n_gates, config.d, rng, 1.0)
            assert max_abs(apply_group(apply_group(p, g1), g2), apply_group(p, compose(g2, g1))) <= 1e-15

    def test_shared_experts_stay_put(self, rng):
        p = random_params(MoEConfig.shared(2, 3, 3, 4, 2), rng)
        q = apply_group(p, GroupElement(np.zeros(3), 0.0, [2, 0, 1]))
        np.testing.assert_array_equal(q.A[:2], p.A[:2])
        np.testing.assert_array_equal(q.A[2:], p.A[2:][[2, 0, 1]])

    def test_size_mismatch(self, rng):
        p = random_params(MoEConfig.dense(3, 2, 2), rng)
        with pytest.raises(ShapeError):
            apply_group(p, GroupElement.identity(4, 2))
        with pytest.raises(ShapeError):
            apply_group(p, GroupElement.identity(3, 5))

    def test_rejects_non_permutation(self):
        with pytest.raises(ValueError):
            GroupElement(np.zeros(2), 0.0, [0, 0, 1])


class TestHiddenPerms:
    def test_identity(self, rng):
        p = random_params(MoEConfig.dense(3, 2, 4), rng)
        assert apply_hidden_perms(p, HiddenPerms.identity(3, 4)).equals(p)

    def test_swap_single_expert(self, rng):
        p = random_params(MoEConfig.dense(2, 3, 2), rng)
        q = apply_hidden_perms(p, HiddenPerms(([0, 1], [1, 0])))
        np.testing.assert_array_equal(q.A[0], p.A[0])
        np.testing.assert_array_equal(q.A[1], p.A[1][::-1])
        np.testing.assert_array_equal(q.u[1], p.u[1][::-1])
        np.testing.assert_array_equal(q.B[1], p.B[1][:, ::-1])
        np.testing.assert_array_equal(q.v, p.v)
        np.testing.assert_array_equal(q.W, p.W)

    def test_expert_function_unchanged(self, rng):
        for _ in range(50):
            p = random_params(MoEConfig.dense(3, 4, 6), rng)
            q = apply_hidden_perms(p, random_hidden_perms(3, 6, rng))
            X = rng.normal((10, 4))
            for i in range(3):
                np.testing.assert_allclose(expert_forward(X, q.expert(i)), expert_forward(X, p.expert(i)),
                                           rtol=0, atol=1e-12)

    def test_size_mismatch(self, rng):
        p = random_params(MoEConfig.dense(2, 2, 3), rng)
        with pytest.raises(ShapeError):
            apply_hidden_perms(p, HiddenPerms.identity(2, 4))


class TestRandomElements:
    def test_zero_translation(self, rng):
        g = random_group_element(5, 3, rng, 0.0)
        assert not g.c_W.any() and g.c_b == 0.0

    def test_reproducible(self):
        a = random_group_element(6, 3, RngStream(8), 1.0)
        b = random_group_element(6, 3, RngStream(8), 1.0)
        assert a.tau.tolist() == b.tau.tolist() and a.c_W.tobytes() == b.c_W.tobytes()

    def test_single_expert(self, rng):
        for _ in range(10):
            assert random_group_element(1, 2, rng).tau.tolist() == [0]

    def test_all_permutations_reachable(self, rng):
        seen = {tuple(random_group_element(3, 1, rng).tau.tolist()) for _ in range(300)}
        assert len(seen) == 6


class TestPlant:
    def test_trivial_plant(self, rng):
        p = random_params(MoEConfig.dense(3, 2, 4), rng)
        g = GroupElement.identity(3, 2)
        q = apply_hidden_perms(apply_group(p, g), HiddenPerms.identity(3, 4))
        assert q.equals(p)

    @pytest.mark.parametrize("config", CONFIGS, ids=lambda c: c.variant)
    def test_functional_equality(self, rng, config):
        for _ in range(20):
            p = random_params(config, rng)
            q, g, hp = plant_equivalent(p, rng, 1.0)
            assert q.equals(apply_hidden_perms(apply_group(p, g), hp))
            X = rng.normal((100, config.d))
            if config.variant != "dense":
                X = X[in_omega(X, p.gates, 1e-6)]
            assert relative_deviation(moe_forward(X, p), moe_forward(X, q)) <= 1e-9


def test_dense_invariance_many_draws(rng):
    worst = 0.0
    for _ in range(500):
        n, d, h = 2 + int(rng.integers(5, 1)[0]), 2 + int(rng.integers(7, 1)[0]), 2 + int(rng.integers(7, 1)[0])
        p = random_params(MoEConfig.dense(n, d, h), rng)
        x = rng.normal(d)
        y = moe_forward(x, p)
        worst = max(worst, float(np.max(np.abs(y - moe_forward(x, apply_group(p, random_group_element(n, d, rng)))))
                                 / (1 + np.max(np.abs(y)))))
    assert worst <= 1e-9


def test_omega_set_is_invariant(rng):
    p = random_params(MoEConfig.sparse(4, 3, 2, 2), rng)
    g = random_group_element(4, 3, rng, 2.0)
    X = tie_heavy_points(p.gates, rng, 1000)
    inside = in_omega(X, p.gates, 1e-9)
    assert 0 < inside.sum() < 1000
    np.testing.assert_array_equal(inside, in_omega(X, apply_group(p, g).gates, 1e-9))


def test_invert_permutation(rng):
    p = rng.permutation(9)
    np.testing.assert_array_equal(p[invert_permutation(p)], np.arange(9))
