"""Two-step weight matching between two MoE layers.

Step 1 orders the experts of model B against model A by solving a linear
assignment problem over one of two data-free cost matrices:

* ``gate``: distances between mean-centred gate rows (centering removes the
  softmax translation symmetry);
* ``gram``: distances between the Gram matrices ``A~^T A~`` and ``B~ B~^T``
  of each expert, which do not depend on the order of hidden units.

Step 2 aligns the hidden units of every matched expert pair with a second
assignment over weight similarities.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .model import ExpertParams, Gates, MoEParams, ShapeError
from .numerics import parallel_map
from .symmetry import GroupElement, HiddenPerms, apply_group, apply_hidden_perms

METHODS = {"gate": "gate", "gateweights": "gate", "gram": "gram", "expertgram": "gram", "expert": "gram"}


def normalize_method(method: str) -> str:
    try:
        return METHODS[method.lower().replace("_", "").replace("-", "")]
    except KeyError:
        raise ValueError(f"unknown matching method {method!r}; use 'gate' or 'gram'") from None


def center_gates(gates: Gates) -> Gates:
    return Gates(gates.W - gates.W.mean(axis=0), gates.b - gates.b.mean())


def gate_cost_matrix(gates_a: Gates, gates_b: Gates) -> np.ndarray:
    if gates_a.W.shape != gates_b.W.shape:
        raise ShapeError(f"gate shapes differ: {gates_a.W.shape} vs {gates_b.W.shape}")
    ca, cb = center_gates(gates_a), center_gates(gates_b)
    dW = ca.W[:, None, :] - cb.W[None, :, :]
    db = ca.b[:, None] - cb.b[None, :]
    return np.sqrt((dW ** 2).sum(axis=-1) + db ** 2)


def augmented(A, u, B, v) -> tuple[np.ndarray, np.ndarray]:
    """``[A | u]`` and ``[B | v]`` (stacked over a leading expert axis if present)."""
    return np.concatenate([A, u[..., None]], axis=-1), np.concatenate([B, v[..., None]], axis=-1)


def expert_grams(A, u, B, v) -> tuple[np.ndarray, np.ndarray]:
    At, Bt = augmented(A, u, B, v)
    return np.swapaxes(At, -1, -2) @ At, Bt @ np.swapaxes(Bt, -1, -2)


def gram_cost_matrix(experts_a, experts_b) -> np.ndarray:
    """Cost between experts given as sequences of ExpertParams or stacked (A, u, B, v)."""
    ga_in, gb_in = _stack(experts_a), _stack(experts_b)
    if ga_in[0].shape != gb_in[0].shape:
        raise ShapeError(f"expert shapes differ: {ga_in[0].shape} vs {gb_in[0].shape}")
    Ga, Ha = expert_grams(*ga_in)
    Gb, Hb = expert_grams(*gb_in)
    first = ((Ga[:, None] - Gb[None, :]) ** 2).sum(axis=(-1, -2))
    second = ((Ha[:, None] - Hb[None, :]) ** 2).sum(axis=(-1, -2))
    return np.sqrt(first + second)


def _stack(experts):
    if isinstance(experts, tuple) and len(experts) == 4 and isinstance(experts[0], np.ndarray):
        return experts
    experts = list(experts)
    return (np.stack([e.A for e in experts]), np.stack([e.u for e in experts]),
            np.stack([e.B for e in experts]), np.stack([e.v for e in experts]))


# -- linear assignment ------------------------------------------------------

def assignment_cost(C, perm) -> float:
    """Sum of ``C[i, perm[i]]`` accumulated left to right."""
    C = np.asarray(C, dtype=np.float64)
    return sum(float(C[i, j]) for i, j in enumerate(perm))


def _hungarian(C: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method, O(n^3).

    Returns the row->column assignment and dual potentials (u, v) with
    ``C[i, j] - u[i] - v[j] >= 0`` and equality on the assignment.
    """
    n = C.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: 1-based row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = C[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    assignment[owner[1:] - 1] = np.arange(n)
    return assignment, u[1:], v[1:]


def _lexicographic_tight_matching(tight: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching that uses only tight edges."""
    n = len(assignment)
    match = assignment.copy()
    col_owner = np.empty(n, dtype=np.int64)
    col_owner[match] = np.arange(n)
    locked = np.zeros(n, dtype=bool)

    def augment(row, target, banned, seen):
        # alternating path from an unmatched ``row`` to the free column ``target``
        for col in np.flatnonzero(tight[row]):
            if banned[col] or seen[col]:
                continue
            seen[col] = True
            if col == target or augment(col_owner[col], target, banned, seen):
                match[row] = col
                col_owner[col] = row
                return True
        return False

    for i in range(n):
        for j in np.flatnonzero(tight[i] & ~locked):
            if j == match[i]:
                break
            saved = match.copy(), col_owner.copy()
            freed, displaced = match[i], col_owner[j]
            match[i] = j
            col_owner[j] = i
            banned = locked.copy()
            banned[j] = True
            if augment(displaced, freed, banned, np.zeros(n, dtype=bool)):
                break
            match[:], col_owner[:] = saved
        locked[match[i]] = True
    return match


def solve_lap(C, *, tie_tol: float = 1e-11) -> np.ndarray:
    """Permutation ``tau`` minimising ``sum_i C[i, tau[i]]``.

    Among optimal assignments the lexicographically smallest is returned.
    Optimal assignments are exactly the perfect matchings on edges whose
    reduced cost under the optimal duals is zero (up to ``tie_tol`` relative
    to the largest entry).
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"cost matrix must be square, got shape {C.shape}")
    if np.isnan(C).any():
        raise ValueError("cost matrix contains NaN")
    if not np.isfinite(C).all():
        raise ValueError("cost matrix contains infinite entries")
    n = C.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    assignment, u, v = _hungarian(C)
    scale = max(1.0, float(np.abs(C).max()))
    tight = (C - u[:, None] - v[None, :]) <= tie_tol * scale
    tight[np.arange(n), assignment] = True
    return _lexicographic_tight_matching(tight, assignment)


def brute_force_lap(C) -> tuple[np.ndarray, float]:
    """Enumerate all n! assignments; first (lexicographic) strict minimum wins."""
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    if n > 9:
        raise ValueError(f"brute force over {n}! assignments is not tractable")
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        cost = assignment_cost(C, perm)
        if cost < best_cost:
            best, best_cost = perm, cost
    return np.array(best, dtype=np.int64), best_cost


# -- neuron matching --------------------------------------------------------

def neuron_similarity(theta_a: ExpertParams, theta_b: ExpertParams) -> np.ndarray:
    """``S[p, q]``: similarity of hidden unit p of A to hidden unit q of B."""
    if theta_a.A.shape != theta_b.A.shape:
        raise ShapeError(f"expert shapes differ: {theta_a.A.shape} vs {theta_b.A.shape}")
    At_a, _ = augmented(theta_a.A, theta_a.u, theta_a.B, theta_a.v)
    At_b, _ = augmented(theta_b.A, theta_b.u, theta_b.B, theta_b.v)
    return At_a @ At_b.T + theta_a.B.T @ theta_b.B


def expert_neuron_match(theta_a: ExpertParams, theta_b: ExpertParams) -> np.ndarray:
    """Hidden permutation P so that unit p of A pairs with unit P[p] of B.

    Applying P to ``theta_b`` (rows of A and u, columns of B) aligns it to
    ``theta_a``.  The output bias is not permuted and does not enter the
    similarity.
    """
    return solve_lap(-neuron_similarity(theta_a, theta_b))


# -- full alignment ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AlignmentResult:
    tau: np.ndarray
    hidden: HiddenPerms
    method: str
    cost: np.ndarray | None = None

    def apply(self, params_b: MoEParams) -> MoEParams:
        """Model B reordered and hidden-permuted into model A's coordinates."""
        g = GroupElement(np.zeros(params_b.config.d), 0.0, self.tau)
        return apply_hidden_perms(apply_group(params_b, g), self.hidden)

    def to_dict(self) -> dict:
        out = {"method": self.method, "tau": self.tau.tolist(), "hidden": self.hidden.to_list()}
        if self.cost is not None:
            out["cost_matrix"] = self.cost.tolist()
        return out


def expert_cost(params_a: MoEParams, params_b: MoEParams, method: str) -> np.ndarray:
    method = normalize_method(method)
    s = params_a.config.n_shared
    if method == "gate":
        return gate_cost_matrix(params_a.gates, params_b.gates)
    return gram_cost_matrix(
        (params_a.A[s:], params_a.u[s:], params_a.B[s:], params_a.v[s:]),
        (params_b.A[s:], params_b.u[s:], params_b.B[s:], params_b.v[s:]))


def match_hidden(params_a: MoEParams, params_b: MoEParams, tau) -> HiddenPerms:
    """Step 2 for a fixed expert order: neuron-match A_i against B_order(i)."""
    c = params_a.config
    order = np.concatenate([np.arange(c.n_shared), c.n_shared + np.asarray(tau)])
    perms = parallel_map(
        lambda i: expert_neuron_match(params_a.expert(i), params_b.expert(int(order[i]))),
        range(c.n))
    return HiddenPerms(tuple(perms))


def align_moe(params_a: MoEParams, params_b: MoEParams, method: str = "gram") -> AlignmentResult:
    if params_a.config != params_b.config:
        raise ValueError(f"configs differ: {params_a.config} vs {params_b.config}")
    method = normalize_method(method)
    cost = expert_cost(params_a, params_b, method)
    tau = solve_lap(cost)
    return AlignmentResult(tau, match_hidden(params_a, params_b, tau), method, cost)
