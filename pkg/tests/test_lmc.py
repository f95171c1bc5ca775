import math

import numpy as np
import pytest

from moe_rebasin.harness import TrainConfig, random_params, train_sgd
from moe_rebasin.lmc import (BarrierReport, InterpolationCurve, RankReport, accuracy_auc,
                             accuracy_barrier, barrier_report, brute_force_best_permutation,
                             eval_curve, interpolate_params, loss_barrier, metric_auc,
                             normalized_barrier, ratio_report)
from moe_rebasin.model import MoEConfig, MoEParams
from moe_rebasin.symmetry import plant_equivalent

from conftest import DENSE

SCALAR = MoEConfig.dense(1, 1, 1)


def scalar_model(theta: float) -> MoEParams:
    z = np.zeros((1, 1))
    return MoEParams(SCALAR, W=z, b=np.zeros(1), A=np.zeros((1, 1, 1)), u=z.copy(),
                     B=np.zeros((1, 1, 1)), v=np.array([[theta]]))


def double_well(p: MoEParams) -> float:
    return (p.v[0, 0] ** 2 - 1.0) ** 2


class TestInterpolation:
    def test_endpoints_bitwise(self, rng):
        a, b = random_params(DENSE, rng), random_params(DENSE, rng)
        assert interpolate_params(a, b, 1.0).equals(a)
        assert interpolate_params(a, b, 0.0).equals(b)

    def test_midpoint(self, rng):
        a, b = random_params(DENSE, rng), random_params(DENSE, rng)
        np.testing.assert_allclose(interpolate_params(a, b, 0.5).A, (a.A + b.A) / 2, rtol=0, atol=1e-15)

    def test_rejects_bad_inputs(self, rng):
        a = random_params(DENSE, rng)
        with pytest.raises(ValueError):
            interpolate_params(a, a, 1.5)
        with pytest.raises(ValueError):
            interpolate_params(a, random_params(MoEConfig.dense(3, 8, 16), rng), 0.5)

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            InterpolationCurve([0.0, 0.5], [1.0, 2.0])
        with pytest.raises(ValueError):
            InterpolationCurve([0.0, 1.0], [1.0])


class TestToyBarrier:
    def test_double_well(self):
        curve = eval_curve(scalar_model(1.0), scalar_model(-1.0), double_well, 25)
        assert curve.losses[12] == pytest.approx(1.0, abs=1e-15)
        assert loss_barrier(curve) == pytest.approx(1.0, abs=1e-12)
        s = np.linspace(0.0, 1.0, 100_001)
        f = ((2 * s - 1) ** 2 - 1) ** 2
        oracle = float(np.sum((f[1:] + f[:-1]) / 2 * np.diff(s)))
        assert oracle == pytest.approx(8 / 15, abs=1e-8)
        assert abs(metric_auc(curve) - oracle) <= 1e-2

    def test_convex_has_no_barrier(self):
        curve = eval_curve(scalar_model(2.0), scalar_model(-3.0), lambda p: p.v[0, 0] ** 2, 25)
        assert loss_barrier(curve) <= 1e-12
        assert metric_auc(curve) < 0

    def test_linear_loss_is_zero(self):
        curve = eval_curve(scalar_model(2.0), scalar_model(-3.0), lambda p: 3 * p.v[0, 0] + 1, 25)
        assert abs(loss_barrier(curve)) <= 1e-12 and abs(metric_auc(curve)) <= 1e-12

    def test_accuracy_dip(self):
        ts = np.linspace(0, 1, 5)
        curve = InterpolationCurve(ts, np.zeros(5), [0.9, 0.85, 0.8, 0.85, 0.9])
        assert accuracy_barrier(curve) == pytest.approx(0.1)
        assert accuracy_auc(curve) == pytest.approx(0.05)

    def test_accuracy_bump_is_negative(self):
        ts = np.linspace(0, 1, 3)
        curve = InterpolationCurve(ts, np.zeros(3), [0.5, 0.7, 0.5])
        assert accuracy_auc(curve) < 0
        assert accuracy_barrier(curve) == 0.0

    def test_accuracy_required(self):
        with pytest.raises(ValueError):
            accuracy_barrier(InterpolationCurve([0.0, 1.0], [0.0, 0.0]))

    def test_symmetric_in_endpoints(self):
        loss = lambda p: math.sin(3 * p.v[0, 0]) + p.v[0, 0] ** 2
        r1 = barrier_report(scalar_model(0.7), scalar_model(-1.3), loss)
        r2 = barrier_report(scalar_model(-1.3), scalar_model(0.7), loss)
        assert r1.loss_barrier == pytest.approx(r2.loss_barrier, abs=1e-12)
        assert r1.loss_auc == pytest.approx(r2.loss_auc, abs=1e-12)

    def test_same_model(self, experiment, trained_dense):
        r = barrier_report(trained_dense.params, trained_dense.params, experiment[2])
        assert abs(r.loss_barrier) <= 1e-12 and abs(r.loss_auc) <= 1e-12 and abs(r.acc_barrier) <= 1e-12


class TestRatios:
    def _report(self, lb, la, ab, aa):
        curve = InterpolationCurve([0.0, 1.0], [0.0, 0.0], [1.0, 1.0])
        return BarrierReport(curve, lb, la, ab, aa, (0.0, 0.0))

    def test_ratio_values(self):
        r = ratio_report(self._report(0.1, 0.05, 0.0, 0.02), self._report(0.4, 0.1, 0.2, 1e-13))
        assert r["loss_barrier"] == pytest.approx(25.0)
        assert r["loss_auc"] == pytest.approx(50.0)
        assert r["acc_barrier"] == 0.0
        assert r["acc_auc"] is None

    def test_normalized_barrier(self):
        assert normalized_barrier(0.2, 0.2, 1.0) == 0.0
        assert normalized_barrier(1.0, 0.2, 1.0) == 100.0
        assert normalized_barrier(0.6, 0.2, 1.0) == pytest.approx(50.0)
        assert normalized_barrier(0.2, 0.2, 0.2) == 0.0
        assert normalized_barrier(0.5, 0.2, 0.2) == math.inf


class TestBruteForce:
    def test_single_expert(self, experiment, rng):
        cfg = MoEConfig.dense(1, 8, 4)
        a, b = random_params(cfg, rng, 0.3), random_params(cfg, rng, 0.3)
        rep = brute_force_best_permutation(a, b, experiment[2])
        assert rep.permutations == [(0,)] and rep.rank == 1 and rep.L_hat == 0.0
        assert rep.L_top1 == rep.L_method

    def test_too_many_experts(self, experiment, rng):
        cfg = MoEConfig.dense(9, 8, 2)
        p = random_params(cfg, rng)
        with pytest.raises(ValueError, match="too many"):
            brute_force_best_permutation(p, p, experiment[2])

    def test_planted_pair_is_rank_one(self, experiment, trained_dense, rng):
        q, _, _ = plant_equivalent(trained_dense.params, rng)
        rep = brute_force_best_permutation(trained_dense.params, q, experiment[2])
        assert len(rep.permutations) == 24
        assert rep.rank == 1 and rep.L_method <= 1e-9
        assert rep.L_hat == pytest.approx(0.0, abs=1e-6)
        assert rep.L_naive > rep.L_method

    def test_rank_counts_strictly_smaller(self, experiment, trained_dense, rng):
        data, backbone, loss_fn = experiment
        other = train_sgd(data, backbone, TrainConfig(steps=300, init_seed=3, data_order_seed=4), DENSE).params
        rep = brute_force_best_permutation(trained_dense.params, other, loss_fn, chosen_tau=(3, 2, 1, 0))
        chosen = rep.barriers[rep.permutations.index((3, 2, 1, 0))]
        assert rep.rank == 1 + int(np.sum(rep.barriers < chosen))
        assert rep.L_top1 == rep.barriers.min()
        assert RankReport.from_dict(rep.to_dict()).to_dict() == rep.to_dict()
