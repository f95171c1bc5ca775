"""Mixture-of-Experts parameter containers and forward passes.

Experts are one-hidden-layer ReLU MLPs ``x -> B relu(A x + u) + v``.  A
model stores all experts stacked along a leading axis so that forward
passes vectorise over experts and over a batch of inputs.

Three gating variants are supported:

* ``dense``: softmax over all gate scores.
* ``sparse``: keep the top-k scores (ties go to the smaller index), softmax
  over the kept scores only.
* ``shared``: ``n_shared`` ungated experts are always summed in; the routed
  experts get the full softmax over routed scores, masked to the top-k and
  *not* renormalised.

Indices are 0-based everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import ClassVar

import numpy as np

from .numerics import relu, stable_softmax

VARIANTS = ("dense", "sparse", "shared")


class ShapeError(ValueError):
    pass


class VariantError(ValueError):
    pass


@dataclass(frozen=True)
class MoEConfig:
    variant: str
    n: int
    d: int
    h: int
    k: int | None = None
    n_shared: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}")
        if self.n < 1 or self.d < 1 or self.h < 1:
            raise ValueError("n, d and h must be positive")
        if self.variant == "dense":
            if self.k is not None or self.n_shared:
                raise ValueError("dense gating takes no k or shared experts")
        elif self.variant == "sparse":
            if self.k is None or not 1 <= self.k <= self.n:
                raise ValueError(f"sparse gating needs 1 <= k <= n, got k={self.k}, n={self.n}")
            if self.n_shared:
                raise ValueError("sparse gating has no shared experts")
        else:
            n_routed = self.n - self.n_shared
            if self.n_shared < 1 or n_routed < 1:
                raise ValueError("shared variant needs at least one shared and one routed expert")
            if self.k is None or not 1 <= self.k <= n_routed:
                raise ValueError(f"shared variant needs 1 <= k <= n_routed, got k={self.k}")

    @classmethod
    def dense(cls, n, d, h):
        return cls("dense", n, d, h)

    @classmethod
    def sparse(cls, n, d, h, k):
        return cls("sparse", n, d, h, k=k)

    @classmethod
    def shared(cls, n_shared, n_routed, d, h, k):
        return cls("shared", n_shared + n_routed, d, h, k=k, n_shared=n_shared)

    @property
    def n_gates(self) -> int:
        """Number of gated (permutable) experts."""
        return self.n - self.n_shared

    def to_dict(self) -> dict:
        return {"variant": self.variant, "n": self.n, "d": self.d, "h": self.h,
                "k": self.k, "n_shared": self.n_shared}

    @classmethod
    def from_dict(cls, data: dict) -> "MoEConfig":
        return cls(data["variant"], int(data["n"]), int(data["d"]), int(data["h"]),
                   None if data.get("k") is None else int(data["k"]),
                   int(data.get("n_shared", 0)))


@dataclass(frozen=True)
class ExpertParams:
    A: np.ndarray  # (h, d)
    u: np.ndarray  # (h,)
    B: np.ndarray  # (d, h)
    v: np.ndarray  # (d,)

    def __post_init__(self):
        h, d = np.shape(self.A)
        if np.shape(self.u) != (h,) or np.shape(self.B) != (d, h) or np.shape(self.v) != (d,):
            raise ShapeError(
                f"inconsistent expert shapes A{np.shape(self.A)} u{np.shape(self.u)} "
                f"B{np.shape(self.B)} v{np.shape(self.v)}")

    @property
    def h(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class Gates:
    """Gate rows ``W`` (m, d) and biases ``b`` (m,)."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.ndim(self.W) != 2 or np.shape(self.b) != (np.shape(self.W)[0],):
            raise ShapeError(f"gate shapes W{np.shape(self.W)} b{np.shape(self.b)} disagree")

    def __len__(self):
        return self.W.shape[0]


@dataclass(frozen=True, eq=False)
class MoEParams:
    """Full parameter vector of one MoE layer.

    For the shared variant ``gates`` has one row per routed expert and the
    first ``n_shared`` experts are the shared ones.
    """

    config: MoEConfig
    W: np.ndarray  # (m, d) gate rows
    b: np.ndarray  # (m,)
    A: np.ndarray  # (n, h, d)
    u: np.ndarray  # (n, h)
    B: np.ndarray  # (n, d, h)
    v: np.ndarray  # (n, d)
    ARRAYS: ClassVar[tuple[str, ...]] = ("W", "b", "A", "u", "B", "v")

    def __post_init__(self):
        c = self.config
        expected = {
            "W": (c.n_gates, c.d), "b": (c.n_gates,),
            "A": (c.n, c.h, c.d), "u": (c.n, c.h),
            "B": (c.n, c.d, c.h), "v": (c.n, c.d),
        }
        for name, shape in expected.items():
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != shape:
                raise ShapeError(f"{name} has shape {value.shape}, expected {shape}")
            object.__setattr__(self, name, value)

    @property
    def gates(self) -> Gates:
        return Gates(self.W, self.b)

    def expert(self, i: int) -> ExpertParams:
        return ExpertParams(self.A[i], self.u[i], self.B[i], self.v[i])

    @property
    def experts(self) -> list[ExpertParams]:
        return [self.expert(i) for i in range(self.config.n)]

    @classmethod
    def from_parts(cls, config: MoEConfig, gates: Gates, experts) -> "MoEParams":
        experts = list(experts)
        if len(experts) != config.n:
            raise ShapeError(f"expected {config.n} experts, got {len(experts)}")
        return cls(config, gates.W, gates.b,
                   np.stack([e.A for e in experts]), np.stack([e.u for e in experts]),
                   np.stack([e.B for e in experts]), np.stack([e.v for e in experts]))

    def replace(self, **arrays) -> "MoEParams":
        return replace(self, **arrays)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAYS}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.as_dict().values()])

    def with_flat(self, vector: np.ndarray) -> "MoEParams":
        out, pos = {}, 0
        for name, a in self.as_dict().items():
            out[name] = np.asarray(vector[pos:pos + a.size]).reshape(a.shape)
            pos += a.size
        return self.replace(**out)

    def equals(self, other: "MoEParams") -> bool:
        """Bitwise equality of config and every array."""
        return self.config == other.config and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.as_dict().values(), other.as_dict().values()))


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != d:
        raise ShapeError(f"input of shape {x.shape} does not match dimension {d}")
    return x2, single


def expert_forward(x, theta: ExpertParams) -> np.ndarray:
    x2, single = _as_batch(x, theta.d)
    out = relu(x2 @ theta.A.T + theta.u) @ theta.B.T + theta.v
    return out[0] if single else out


def gate_scores(x, gates: Gates) -> np.ndarray:
    x2, single = _as_batch(x, gates.W.shape[1])
    s = x2 @ gates.W.T + gates.b
    return s[0] if single else s


def top_k_indices(z, k: int) -> np.ndarray:
    """Indices of the k largest entries, sorted ascending; ties prefer the smaller index."""
    z = np.asarray(z, dtype=np.float64)
    if not 1 <= k <= z.shape[-1]:
        raise ValueError(f"k={k} out of range for {z.shape[-1]} scores")
    order = np.argsort(-z, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def top_k_mask(z, k: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    idx = top_k_indices(z, k)
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask


def all_expert_outputs(x2: np.ndarray, params: MoEParams) -> tuple[np.ndarray, np.ndarray]:
    """Pre-activations (N, n, h) and outputs (N, n, d) of every expert."""
    pre = np.einsum("nhd,Nd->Nnh", params.A, x2) + params.u
    out = np.einsum("ndh,Nnh->Nnd", params.B, relu(pre)) + params.v
    return pre, out


def gating_weights(scores: np.ndarray, config: MoEConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert weights (N, n_gates) and the selection mask for the variant.

    For shared, the returned weights cover routed experts only.
    """
    if config.variant == "dense":
        return stable_softmax(scores), np.ones(scores.shape, dtype=bool)
    mask = top_k_mask(scores, config.k)
    if config.variant == "sparse":
        masked = np.where(mask, scores, -np.inf)
        return stable_softmax(masked), mask
    full = stable_softmax(scores)
    return np.where(mask, full, 0.0), mask


def moe_forward(x, params: MoEParams) -> np.ndarray:
    """Forward pass for whichever variant ``params.config`` names."""
    c = params.config
    x2, single = _as_batch(x, c.d)
    _, outs = all_expert_outputs(x2, params)
    weights, _ = gating_weights(x2 @ params.W.T + params.b, c)
    y = np.einsum("Nn,Nnd->Nd", weights, outs[:, c.n_shared:])
    if c.n_shared:
        y = y + outs[:, :c.n_shared].sum(axis=1)
    return y[0] if single else y


def _require(params: MoEParams, variant: str):
    if params.config.variant != variant:
        raise VariantError(f"expected a {variant} model, got {params.config.variant}")


def dense_forward(x, params: MoEParams) -> np.ndarray:
    _require(params, "dense")
    return moe_forward(x, params)


def sparse_forward(x, params: MoEParams) -> np.ndarray:
    _require(params, "sparse")
    return moe_forward(x, params)


def shared_forward(x, params: MoEParams) -> np.ndarray:
    _require(params, "shared")
    return moe_forward(x, params)


def score_margin(x, gates: Gates) -> np.ndarray:
    """Smallest pairwise gap between gate scores (inf for a single gate)."""
    s = np.sort(gate_scores(x, gates), axis=-1)
    if s.shape[-1] < 2:
        return np.full(s.shape[:-1], np.inf)
    return np.diff(s, axis=-1).min(axis=-1)


def in_omega(x, gates: Gates, epsilon: float = 0.0):
    """True where every pair of gate scores differs by more than ``epsilon``."""
    if len(gates) == 0:
        raise ValueError("no gates")
    return score_margin(x, gates) > epsilon
