"""The functional-equivalence group of an MoE layer and its action on weights.

A group element ``(c_W, c_b, tau)`` maps parameters to
``(W[tau[i]] + c_W, b[tau[i]] + c_b, theta[tau[i]])``: slot ``i`` of the
result reads from slot ``tau[i]`` of the input.  With this right-action
convention, applying ``g1`` and then ``g2`` equals applying
``compose(g2, g1)``.

For the shared variant only routed experts are permuted and translated;
shared experts stay in place and can only have their hidden units permuted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MoEParams, ShapeError
from .numerics import RngStream


def is_permutation(p, n: int | None = None) -> bool:
    p = np.asarray(p)
    if p.ndim != 1 or (n is not None and len(p) != n):
        return False
    return np.array_equal(np.sort(p), np.arange(len(p)))


def invert_permutation(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return inv


@dataclass(frozen=True, eq=False)
class GroupElement:
    c_W: np.ndarray
    c_b: float
    tau: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c_W", np.asarray(self.c_W, dtype=np.float64))
        object.__setattr__(self, "c_b", float(self.c_b))
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=np.int64))
        if not is_permutation(self.tau):
            raise ValueError(f"tau {self.tau.tolist()} is not a permutation")

    @classmethod
    def identity(cls, n: int, d: int) -> "GroupElement":
        return cls(np.zeros(d), 0.0, np.arange(n))

    @classmethod
    def translation(cls, c_W, c_b, n: int) -> "GroupElement":
        return cls(c_W, c_b, np.arange(n))

    def inverse(self) -> "GroupElement":
        return GroupElement(-self.c_W, -self.c_b, invert_permutation(self.tau))

    def to_dict(self) -> dict:
        return {"c_W": self.c_W.tolist(), "c_b": self.c_b, "tau": self.tau.tolist()}


def compose(second: GroupElement, first: GroupElement) -> GroupElement:
    """Element equal to applying ``first`` and then ``second``."""
    return GroupElement(first.c_W + second.c_W, first.c_b + second.c_b, first.tau[second.tau])


@dataclass(frozen=True, eq=False)
class HiddenPerms:
    """One permutation of hidden units per expert; unit ``p`` reads from ``perm[p]``."""

    perms: tuple

    def __post_init__(self):
        perms = tuple(np.asarray(p, dtype=np.int64) for p in self.perms)
        for p in perms:
            if not is_permutation(p):
                raise ValueError(f"{p.tolist()} is not a permutation")
        object.__setattr__(self, "perms", perms)

    def __len__(self):
        return len(self.perms)

    def __getitem__(self, i):
        return self.perms[i]

    @classmethod
    def identity(cls, n: int, h: int) -> "HiddenPerms":
        return cls(tuple(np.arange(h) for _ in range(n)))

    def inverse(self) -> "HiddenPerms":
        return HiddenPerms(tuple(invert_permutation(p) for p in self.perms))

    def to_list(self) -> list[list[int]]:
        return [p.tolist() for p in self.perms]


def apply_group(params: MoEParams, g: GroupElement) -> MoEParams:
    c = params.config
    m = c.n_gates
    if len(g.tau) != m or g.c_W.shape != (c.d,):
        raise ShapeError(
            f"group element for n={len(g.tau)}, d={g.c_W.shape} does not fit model with "
            f"{m} gated experts and d={c.d}")
    order = np.concatenate([np.arange(c.n_shared), c.n_shared + g.tau])
    return params.replace(
        W=params.W[g.tau] + g.c_W, b=params.b[g.tau] + g.c_b,
        A=params.A[order], u=params.u[order], B=params.B[order], v=params.v[order])


def permute_expert(A, u, B, v, perm):
    """Hidden-unit permutation of one expert: ``(P A, P u, B P^T, v)``."""
    perm = np.asarray(perm)
    return A[perm], u[perm], B[:, perm], v


def apply_hidden_perms(params: MoEParams, hp: HiddenPerms) -> MoEParams:
    c = params.config
    if len(hp) != c.n or any(len(p) != c.h for p in hp.perms):
        raise ShapeError(f"need {c.n} hidden permutations of length {c.h}")
    P = np.stack(hp.perms)
    rows = np.arange(c.n)[:, None]
    return params.replace(
        A=params.A[rows, P], u=params.u[rows, P],
        B=np.take_along_axis(params.B, P[:, None, :], axis=2))


def random_group_element(n: int, d: int, rng: RngStream, translation_scale: float = 1.0) -> GroupElement:
    if n < 1:
        raise ValueError("n must be positive")
    tau = rng.permutation(n)
    shift = rng.normal(d + 1) * translation_scale
    return GroupElement(shift[:d], shift[d], tau)


def random_hidden_perms(n: int, h: int, rng: RngStream) -> HiddenPerms:
    return HiddenPerms(tuple(rng.permutation(h) for _ in range(n)))


def plant_equivalent(params: MoEParams, rng: RngStream, translation_scale: float = 1.0):
    """Functionally equivalent copy of ``params`` plus the ground-truth transformation.

    Returns ``(planted, g, hp)`` with
    ``planted = apply_hidden_perms(apply_group(params, g), hp)``.
    """
    c = params.config
    g = random_group_element(c.n_gates, c.d, rng, translation_scale)
    hp = random_hidden_perms(c.n, c.h, rng)
    return apply_hidden_perms(apply_group(params, g), hp), g, hp
