"""Randomised self-checks behind the ``oracle`` and ``invariance-check`` commands."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .harness import DatasetSpec, FrozenBackbone, gen_blobs, make_loss_fn, random_params
from .lmc import barrier_report
from .matching import assignment_cost, brute_force_lap, gram_cost_matrix, solve_lap
from .model import MoEConfig, in_omega, moe_forward
from .symmetry import (GroupElement, apply_group, apply_hidden_perms, random_group_element,
                       random_hidden_perms)
from .numerics import RngStream


@dataclass
class CheckResult:
    name: str
    max_deviation: float
    tolerance: float
    trials: int
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return (f"{status} {self.name}: max deviation {self.max_deviation:.3e} "
                f"<= {self.tolerance:.0e} over {self.trials} trials{extra}")


def _result(name, devs, tol, detail=""):
    worst = float(max(devs)) if len(devs) else 0.0
    return CheckResult(name, worst, tol, len(devs), worst <= tol, detail)


def _random_shape(rng: RngStream):
    n, d, h = (int(v) for v in (2 + rng.integers(5, 1)[0], 2 + rng.integers(7, 1)[0],
                                2 + rng.integers(7, 1)[0]))
    return n, d, h


def relative_deviation(y1, y2) -> float:
    return float(np.max(np.abs(y1 - y2)) / (1.0 + np.max(np.abs(y1))))


def dense_invariance(trials: int = 500, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    rng = RngStream(seed)
    devs = []
    for _ in range(trials):
        n, d, h = _random_shape(rng)
        params = random_params(MoEConfig.dense(n, d, h), rng)
        g = random_group_element(n, d, rng, 1.0)
        x = rng.normal(d)
        devs.append(relative_deviation(moe_forward(x, params), moe_forward(x, apply_group(params, g))))
    return _result("dense group invariance", devs, tol)


def sparse_invariance(trials: int = 500, seed: int = 1, k: int = 2, margin: float = 1e-6,
                      tol: float = 1e-9) -> CheckResult:
    rng = RngStream(seed)
    devs, rejected = [], 0
    while len(devs) < trials:
        n, d, h = _random_shape(rng)
        params = random_params(MoEConfig.sparse(n, d, h, min(k, n)), rng)
        g = random_group_element(n, d, rng, 1.0)
        x = rng.normal(d)
        if not in_omega(x, params.gates, margin):
            rejected += 1
            continue
        devs.append(relative_deviation(moe_forward(x, params), moe_forward(x, apply_group(params, g))))
    return _result(f"sparse (k={k}) group invariance on omega", devs, tol,
                   f"{rejected} draws rejected by margin {margin:g}")


def tie_heavy_points(gates, rng: RngStream, count: int) -> np.ndarray:
    """Random points, every other one projected onto a random pairwise tie hyperplane."""
    W, b = gates.W, gates.b
    xs = rng.normal((count, W.shape[1]))
    for j in range(0, count, 2):
        i1, i2 = rng.permutation(len(b))[:2]
        a, c = W[i1] - W[i2], b[i1] - b[i2]
        if a @ a > 0:
            xs[j] -= (a @ xs[j] + c) / (a @ a) * a
    return xs


def omega_agreement(points: int = 1000, seed: int = 2, epsilon: float = 1e-9) -> CheckResult:
    rng = RngStream(seed)
    n, d = 5, 3
    params = random_params(MoEConfig.sparse(n, d, 2, 2), rng)
    g = random_group_element(n, d, rng, 1.0)
    xs = tie_heavy_points(params.gates, rng, points)
    before = in_omega(xs, params.gates, epsilon)
    after = in_omega(xs, apply_group(params, g).gates, epsilon)
    disagree = int(np.sum(before != after))
    return CheckResult("omega set invariance", float(disagree), 0.0, points, disagree == 0,
                       f"{int(before.sum())} of {points} points inside omega")


def barrier_translation(trials: int = 20, seed: int = 3, tol: float = 1e-9, grid: int = 25) -> CheckResult:
    rng = RngStream(seed)
    spec = DatasetSpec(classes=4, samples_per_class=25, input_dim=6, noise_sigma=1.0, seed=seed)
    data = gen_blobs(spec)
    d = 4
    bb = FrozenBackbone.generate(seed + 1, data.input_dim, d, data.classes)
    loss_fn = make_loss_fn(bb, data.X_test, data.y_test)
    devs = []
    for _ in range(trials):
        cfg = MoEConfig.dense(3, d, 5)
        a, b = random_params(cfg, rng), random_params(cfg, rng)
        shift = rng.normal(d + 1)
        hb = apply_group(b, GroupElement.translation(shift[:d], shift[d], 3))
        plain, shifted = barrier_report(a, b, loss_fn, grid), barrier_report(a, hb, loss_fn, grid)
        # whole curve, not just the barrier: untrained pairs often have barrier exactly 0
        devs.append(max(abs(plain.loss_barrier - shifted.loss_barrier),
                        float(np.max(np.abs(plain.curve.losses - shifted.curve.losses)))))
    return _result("barrier translation invariance (whole curve)", devs, tol)


def gram_invariance(trials: int = 200, seed: int = 4, tol: float = 1e-12) -> CheckResult:
    rng = RngStream(seed)
    devs = []
    for _ in range(trials):
        n, d, h = _random_shape(rng)
        a = random_params(MoEConfig.dense(n, d, h), rng)
        b = random_params(MoEConfig.dense(n, d, h), rng)
        pa = apply_hidden_perms(a, random_hidden_perms(n, h, rng))
        pb = apply_hidden_perms(b, random_hidden_perms(n, h, rng))
        base = gram_cost_matrix(a.experts, b.experts)
        devs.append(float(np.max(np.abs(base - gram_cost_matrix(pa.experts, pb.experts)))))
    return _result("gram cost hidden-permutation invariance", devs, tol)


def lap_oracle(trials: int = 200, max_n: int = 7, seed: int = 5) -> CheckResult:
    rng = RngStream(seed)
    mismatches = 0
    for t in range(trials):
        n = 1 + t % max_n
        C = rng.uniform((n, n)) if t % 3 else np.floor(rng.uniform((n, n)) * 4)
        tau = solve_lap(C)
        _, best = brute_force_lap(C)
        mismatches += assignment_cost(C, tau) != best
    return CheckResult("hungarian vs brute force", float(mismatches), 0.0, trials, mismatches == 0,
                       f"n up to {max_n}, {mismatches} cost mismatches")


def run_invariance_checks(trials: int = 500, seed: int = 0, epsilon: float = 1e-6) -> list[CheckResult]:
    return [
        dense_invariance(trials, seed),
        sparse_invariance(trials, seed + 1, margin=epsilon),
        omega_agreement(max(trials, 1000), seed + 2),
        barrier_translation(max(1, trials // 25), seed + 3),
        gram_invariance(max(1, trials // 2), seed + 4),
    ]
