"""Linear mode connectivity between two MoE checkpoints.

The interpolation convention is ``t * A + (1 - t) * B``, so ``t = 1`` is
model A.  The barrier is the grid maximum of the loss minus the chord
between the endpoint losses; AUC is the signed trapezoid integral of the
same difference.  For accuracy the sign is flipped so that dips count as
positive barriers.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .matching import align_moe, match_hidden
from .model import MoEParams
from .numerics import parallel_map, trapezoid_integral, uniform_grid
from .symmetry import GroupElement, apply_group, apply_hidden_perms

MAX_BRUTE_FORCE_EXPERTS = 8
RATIO_FLOOR = 1e-12


@dataclass
class InterpolationCurve:
    ts: np.ndarray
    losses: np.ndarray
    accuracies: np.ndarray | None = None

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=np.float64)
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.accuracies is not None:
            self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
            if self.accuracies.shape != self.ts.shape:
                raise ValueError("accuracies and grid lengths differ")
        if self.losses.shape != self.ts.shape or len(self.ts) < 2:
            raise ValueError("losses and grid must have equal length >= 2")
        if np.any(np.diff(self.ts) <= 0) or self.ts[0] != 0.0 or self.ts[-1] != 1.0:
            raise ValueError("grid must increase strictly from 0 to 1")

    @property
    def endpoint_losses(self) -> tuple[float, float]:
        """(loss_A, loss_B): the values at t = 1 and t = 0."""
        return float(self.losses[-1]), float(self.losses[0])

    @property
    def endpoint_accuracies(self) -> tuple[float, float] | None:
        if self.accuracies is None:
            return None
        return float(self.accuracies[-1]), float(self.accuracies[0])


def chord(ts, value_a: float, value_b: float) -> np.ndarray:
    ts = np.asarray(ts, dtype=np.float64)
    return ts * value_a + (1.0 - ts) * value_b


def interpolate_params(params_a: MoEParams, params_b: MoEParams, t: float) -> MoEParams:
    if params_a.config != params_b.config:
        raise ValueError(f"configs differ: {params_a.config} vs {params_b.config}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if t == 1.0:
        return params_a
    if t == 0.0:
        return params_b
    a, b = params_a.as_dict(), params_b.as_dict()
    return params_a.replace(**{k: t * a[k] + (1.0 - t) * b[k] for k in a})


LossFn = Callable[[MoEParams], "float | tuple[float, float]"]


def eval_curve(params_a: MoEParams, params_b: MoEParams, loss_fn: LossFn,
               grid=25) -> InterpolationCurve:
    """Evaluate ``loss_fn`` along the segment; ``loss_fn`` may return (loss, accuracy)."""
    ts = uniform_grid(grid) if isinstance(grid, int) else np.asarray(grid, dtype=np.float64)
    values = parallel_map(lambda t: loss_fn(interpolate_params(params_a, params_b, float(t))), ts)
    if isinstance(values[0], tuple):
        return InterpolationCurve(ts, [v[0] for v in values], [v[1] for v in values])
    return InterpolationCurve(ts, values)


def _endpoints(curve, endpoints, accuracy=False):
    if endpoints is not None:
        return endpoints
    return curve.endpoint_accuracies if accuracy else curve.endpoint_losses


def loss_barrier(curve: InterpolationCurve, endpoints=None) -> float:
    loss_a, loss_b = _endpoints(curve, endpoints)
    return float(np.max(curve.losses - chord(curve.ts, loss_a, loss_b)))


def metric_auc(curve: InterpolationCurve, endpoints=None) -> float:
    loss_a, loss_b = _endpoints(curve, endpoints)
    return trapezoid_integral(curve.ts, curve.losses - chord(curve.ts, loss_a, loss_b))


def _require_acc(curve):
    if curve.accuracies is None:
        raise ValueError("curve has no accuracies")


def accuracy_barrier(curve: InterpolationCurve, endpoints=None) -> float:
    _require_acc(curve)
    acc_a, acc_b = _endpoints(curve, endpoints, accuracy=True)
    return float(np.max(chord(curve.ts, acc_a, acc_b) - curve.accuracies))


def accuracy_auc(curve: InterpolationCurve, endpoints=None) -> float:
    _require_acc(curve)
    acc_a, acc_b = _endpoints(curve, endpoints, accuracy=True)
    return trapezoid_integral(curve.ts, chord(curve.ts, acc_a, acc_b) - curve.accuracies)


@dataclass
class BarrierReport:
    curve: InterpolationCurve
    loss_barrier: float
    loss_auc: float
    acc_barrier: float | None
    acc_auc: float | None
    endpoints: tuple[float, float]
    label: str = ""

    @classmethod
    def from_curve(cls, curve: InterpolationCurve, label: str = "") -> "BarrierReport":
        has_acc = curve.accuracies is not None
        return cls(curve, loss_barrier(curve), metric_auc(curve),
                   accuracy_barrier(curve) if has_acc else None,
                   accuracy_auc(curve) if has_acc else None,
                   curve.endpoint_losses, label)

    def chord(self) -> np.ndarray:
        return chord(self.curve.ts, *self.endpoints)

    def to_dict(self) -> dict:
        c = self.curve
        return {
            "type": "barrier",
            "label": self.label,
            "ts": c.ts.tolist(),
            "losses": c.losses.tolist(),
            "chord": self.chord().tolist(),
            "accuracies": None if c.accuracies is None else c.accuracies.tolist(),
            "loss_barrier": self.loss_barrier,
            "loss_auc": self.loss_auc,
            "acc_barrier": self.acc_barrier,
            "acc_auc": self.acc_auc,
            "endpoints": list(self.endpoints),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BarrierReport":
        curve = InterpolationCurve(data["ts"], data["losses"], data.get("accuracies"))
        return cls(curve, data["loss_barrier"], data["loss_auc"], data.get("acc_barrier"),
                   data.get("acc_auc"), tuple(data["endpoints"]), data.get("label", ""))


def barrier_report(params_a, params_b, loss_fn: LossFn, grid=25, label: str = "") -> BarrierReport:
    return BarrierReport.from_curve(eval_curve(params_a, params_b, loss_fn, grid), label)


def ratio_report(aligned: BarrierReport, naive: BarrierReport) -> dict[str, float | None]:
    """aligned / naive x 100 per metric; None where the naive metric is <= 1e-12."""
    out = {}
    for name in ("loss_barrier", "loss_auc", "acc_barrier", "acc_auc"):
        num, den = getattr(aligned, name), getattr(naive, name)
        if num is None or den is None or den <= RATIO_FLOOR:
            out[name] = None
        else:
            out[name] = num / den * 100.0
    return out


def normalized_barrier(l_method: float, l_top1: float, l_naive: float) -> float:
    """``(L_method - L_top1) / (L_naive - L_top1) * 100``.

    When naive interpolation is already optimal the denominator vanishes; the
    value is then 0 if the method is optimal too and +inf otherwise.
    """
    den = l_naive - l_top1
    if abs(den) <= RATIO_FLOOR:
        return 0.0 if l_method - l_top1 <= RATIO_FLOOR else math.inf
    return (l_method - l_top1) / den * 100.0


@dataclass
class RankReport:
    permutations: list[tuple[int, ...]]
    barriers: np.ndarray
    chosen_tau: tuple[int, ...]
    rank: int
    L_hat: float
    L_method: float
    L_naive: float
    L_top1: float
    best_tau: tuple[int, ...] = field(default=())
    method: str = ""

    def to_dict(self) -> dict:
        return {
            "type": "rank",
            "method": self.method,
            "permutations": [list(p) for p in self.permutations],
            "barriers": [float(b) for b in self.barriers],
            "chosen_tau": list(self.chosen_tau),
            "best_tau": list(self.best_tau),
            "rank": self.rank,
            "L_hat": self.L_hat,
            "L_method": self.L_method,
            "L_naive": self.L_naive,
            "L_top1": self.L_top1,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RankReport":
        return cls([tuple(p) for p in data["permutations"]], np.asarray(data["barriers"]),
                   tuple(data["chosen_tau"]), int(data["rank"]), data["L_hat"],
                   data["L_method"], data["L_naive"], data["L_top1"],
                   tuple(data.get("best_tau", ())), data.get("method", ""))


def reorder_and_match(params_a: MoEParams, params_b: MoEParams, tau) -> MoEParams:
    """Reorder B's gated experts by ``tau`` and neuron-match every pair to A."""
    tau = np.asarray(tau, dtype=np.int64)
    reordered = apply_group(params_b, GroupElement(np.zeros(params_b.config.d), 0.0, tau))
    identity = np.arange(len(tau))
    return apply_hidden_perms(reordered, match_hidden(params_a, reordered, identity))


def brute_force_best_permutation(params_a: MoEParams, params_b: MoEParams, loss_fn: LossFn,
                                 chosen_tau=None, method: str = "gram", grid=25) -> RankReport:
    """Barrier of every expert order after neuron matching, and the chosen order's rank.

    ``chosen_tau`` defaults to the order found by ``align_moe`` with ``method``.
    """
    m = params_a.config.n_gates
    if m > MAX_BRUTE_FORCE_EXPERTS:
        raise ValueError(
            f"{m}! expert orders is too many to enumerate (limit {MAX_BRUTE_FORCE_EXPERTS}); "
            "sample permutations instead")
    if chosen_tau is None:
        chosen_tau = align_moe(params_a, params_b, method).tau
    chosen = tuple(int(i) for i in chosen_tau)
    perms = list(itertools.permutations(range(m)))

    def barrier_for(tau):
        aligned = reorder_and_match(params_a, params_b, tau)
        return loss_barrier(eval_curve(params_a, aligned, loss_fn, grid))

    barriers = np.array(parallel_map(barrier_for, perms))
    l_naive = loss_barrier(eval_curve(params_a, params_b, loss_fn, grid))
    l_method = float(barriers[perms.index(chosen)])
    l_top1 = float(barriers.min())
    rank = 1 + int(np.sum(barriers < l_method))
    return RankReport(perms, barriers, chosen, rank,
                      normalized_barrier(l_method, l_top1, l_naive),
                      l_method, l_naive, l_top1, perms[int(np.argmin(barriers))], method)
