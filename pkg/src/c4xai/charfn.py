"""Characteristic functions over colour-feature coalitions and Shapley values.

A trained network turns a board into a cooperative game: the players
are the occupied cells (colour features), a coalition is the subset
whose colour is revealed, and the payoff is either the policy
probability of the full-information best move (nu_pol) or the value
estimate (nu_val) on the partially revealed board.

Shapley values come in three flavours: exact enumeration (subsetsum or
permutation sum, small ground sets only), plain permutation sampling
with a Hoeffding sample count, and partial permutation sampling that
walks only coalition sizes above a floor so every query stays on the
training manifold of partially-hidden boards.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Callable, Iterable, Optional

import numpy as np

from . import engine, network

EXACT_LIMIT = 12  # 2^t coalition table guard
PERM_LIMIT = 8  # t! enumeration guard


class CharFnError(Exception):
    pass


class GroundSetTooLarge(CharFnError):
    pass


class EmptyPermutationClass(CharFnError):
    """No permutation position satisfies the predecessor-size floor."""


class CharacteristicFn:
    """Set function over a fixed ground set, memoized by coalition bitmask.

    ``fn`` receives a frozenset of ground-set members. Metadata carries
    the decision context (head, board, explained action) when the game
    comes from a network.
    """

    def __init__(
        self,
        ground: Iterable,
        fn: Callable,
        head: str = "synthetic",
        board=None,
        a_star: Optional[int] = None,
        cache_size: int = 1 << 16,
    ):
        self.ground = tuple(ground)
        self._fn = fn
        self.head = head
        self.board = board
        self.a_star = a_star
        self._index = {f: i for i, f in enumerate(self.ground)}
        self._cache = {}
        self._cache_size = cache_size

    @property
    def t(self) -> int:
        return len(self.ground)

    def mask_of(self, coalition: Iterable) -> int:
        mask = 0
        for f in coalition:
            mask |= 1 << self._index[f]
        return mask

    def members(self, mask: int) -> frozenset:
        return frozenset(self.ground[i] for i in range(self.t) if mask >> i & 1)

    def __call__(self, coalition: Iterable) -> float:
        mask = self.mask_of(coalition)
        return self.eval_mask(mask)

    def eval_mask(self, mask: int) -> float:
        hit = self._cache.get(mask)
        if hit is not None:
            return hit
        val = float(self._fn(self.members(mask)))
        if len(self._cache) >= self._cache_size:
            self._cache.clear()
        self._cache[mask] = val
        return val


def nu_pol(params: network.NetworkParams, board: engine.BoardState) -> CharacteristicFn:
    """Policy-head game: P(a*; masked board), a* fixed from full information."""
    return _make_nu(params, board, "policy")


def nu_val(params: network.NetworkParams, board: engine.BoardState) -> CharacteristicFn:
    """Value-head game: V(masked board)."""
    return _make_nu(params, board, "value")


def _make_nu(params, board, head):
    if engine.outcome(board).is_terminal:
        raise CharFnError("characteristic functions are defined on ongoing positions")
    mover = board.to_move
    full_policy, _ = network.policy_value(
        params, engine.encode(board, perspective=mover, dtype=params.dtype)
    )
    a_star = int(np.argmax(full_policy))

    def fn(coalition):
        x = engine.encode(board, coalition, perspective=mover, dtype=params.dtype)
        policy, value = network.policy_value(params, x)
        return policy[a_star] if head == "policy" else value

    return CharacteristicFn(
        ground=board.occupied_cells(), fn=fn, head=head, board=board, a_star=a_star
    )


@dataclass
class ShapleyResult:
    features: tuple
    values: np.ndarray
    n_samples: int = 0  # 0 marks exact enumeration
    p: float = 0.0
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(zip(self.features, self.values))

    def to_csv(self, path, extra_meta: Optional[dict] = None) -> str:
        meta = {
            "n_samples": self.n_samples,
            "p": self.p,
            "epsilon": self.epsilon,
            "delta": self.delta,
        }
        meta.update(self.meta)
        if extra_meta:
            meta.update(extra_meta)
        with open(path, "w", newline="") as fh:
            for key in sorted(meta):
                fh.write(f"# {key}={json.dumps(meta[key])}\n")
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "phi"])
            for (row, col), phi in zip(self.features, self.values):
                writer.writerow([row, col, repr(float(phi))])
        return str(path)


def read_shapley_csv(path) -> ShapleyResult:
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        data_lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = json.loads(val)
            else:
                data_lines.append(line)
    for rec in csv.DictReader(data_lines):
        rows.append(((int(rec["row"]), int(rec["col"])), float(rec["phi"])))
    features = tuple(f for f, _ in rows)
    values = np.array([v for _, v in rows])
    return ShapleyResult(
        features=features,
        values=values,
        n_samples=int(meta.pop("n_samples", 0)),
        p=float(meta.pop("p", 0.0)),
        epsilon=meta.pop("epsilon", None),
        delta=meta.pop("delta", None),
        meta=meta,
    )


def sample_count(epsilon: float, delta: float) -> int:
    """Permutations needed for +-epsilon accuracy at confidence 1 - delta."""
    if not 0 < epsilon < 1 or not 0 < delta < 1:
        raise ValueError("epsilon and delta must lie in (0, 1)")
    return int(math.ceil(0.5 * epsilon**-2 * math.log(2.0 / delta)))


def exact_shapley(nu: CharacteristicFn) -> ShapleyResult:
    """Exact values via the subset-weighted sum over all 2^t coalitions."""
    t = nu.t
    if t > EXACT_LIMIT:
        raise GroundSetTooLarge(f"t = {t} exceeds the exact limit {EXACT_LIMIT}")
    values = np.array([nu.eval_mask(m) for m in range(1 << t)])
    fact = [math.factorial(k) for k in range(t + 1)]
    weights = [fact[s] * fact[t - 1 - s] / fact[t] for s in range(t)]
    phi = np.zeros(t)
    for i in range(t):
        bit = 1 << i
        for mask in range(1 << t):
            if mask & bit:
                continue
            s = bin(mask).count("1")
            phi[i] += weights[s] * (values[mask | bit] - values[mask])
    return ShapleyResult(features=nu.ground, values=phi, meta={"form": "subset"})


def exact_shapley_by_permutations(nu: CharacteristicFn) -> ShapleyResult:
    """Exact values via the full permutation sum; cross-check oracle."""
    t = nu.t
    if t > PERM_LIMIT:
        raise GroundSetTooLarge(f"t = {t} exceeds the permutation limit {PERM_LIMIT}")
    phi = np.zeros(t)
    for perm in permutations(range(t)):
        mask = 0
        prev = nu.eval_mask(0)
        for i in perm:
            mask |= 1 << i
            cur = nu.eval_mask(mask)
            phi[i] += cur - prev
            prev = cur
    phi /= math.factorial(t)
    return ShapleyResult(features=nu.ground, values=phi, meta={"form": "permutation"})


def exact_partial_shapley(nu: CharacteristicFn, p: float, conditional: bool = False) -> ShapleyResult:
    """Enumerate the permutation sum restricted to predecessor sets of
    size >= ceil(p*t), normalized by t! (or by the class size when
    ``conditional`` is set)."""
    t = nu.t
    floor = _predecessor_floor(p, t)
    if t > PERM_LIMIT:
        raise GroundSetTooLarge(f"t = {t} exceeds the permutation limit {PERM_LIMIT}")
    phi = np.zeros(t)
    hits = np.zeros(t)
    for perm in permutations(range(t)):
        mask = 0
        for pos, i in enumerate(perm):
            if pos >= floor:
                before = nu.eval_mask(mask)
                after = nu.eval_mask(mask | (1 << i))
                phi[i] += after - before
                hits[i] += 1
            mask |= 1 << i
    denom = hits if conditional else float(math.factorial(t))
    phi = phi / denom
    return ShapleyResult(
        features=nu.ground, values=phi, p=p, meta={"form": "partial-exact", "conditional": conditional}
    )


def _predecessor_floor(p: float, t: int) -> int:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    floor = int(math.ceil(p * t - 1e-9))
    if floor >= t and t > 0:
        raise EmptyPermutationClass(f"p = {p} leaves no admissible position for t = {t}")
    return floor


def partial_shapley(
    nu: CharacteristicFn,
    p: float,
    n_permutations: int,
    rng: np.random.Generator,
    epsilon: Optional[float] = None,
    delta: Optional[float] = None,
    conditional: bool = False,
) -> ShapleyResult:
    """Sampled partial Shapley values.

    Each sampled permutation is walked from the coalition of its first
    ceil(p*t) entries upward, so no coalition below the floor is ever
    queried. A feature accumulates a marginal only at admissible
    positions; the per-feature mean over admissible hits is rescaled by
    the admissible fraction (t - floor)/t, matching the 1/t!
    normalization of the restricted permutation sum. ``conditional``
    skips that rescale and reports the plain conditional mean.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    t = nu.t
    floor = _predecessor_floor(p, t)
    acc = np.zeros(t)
    hits = np.zeros(t)
    for _ in range(n_permutations):
        perm = rng.permutation(t)
        mask = 0
        for i in perm[:floor]:
            mask |= 1 << int(i)
        prev = nu.eval_mask(mask)
        for i in perm[floor:]:
            i = int(i)
            mask |= 1 << i
            cur = nu.eval_mask(mask)
            acc[i] += cur - prev
            hits[i] += 1
            prev = cur
    with np.errstate(invalid="ignore"):
        cond_mean = np.where(hits > 0, acc / np.maximum(hits, 1), 0.0)
    values = cond_mean if conditional else cond_mean * ((t - floor) / t if t else 0.0)
    return ShapleyResult(
        features=nu.ground,
        values=values,
        n_samples=n_permutations,
        p=p,
        epsilon=epsilon,
        delta=delta,
        meta={"form": "partial-sampled", "conditional": conditional},
    )


def sample_shapley(
    nu: CharacteristicFn,
    n_permutations: int,
    rng: np.random.Generator,
    epsilon: Optional[float] = None,
    delta: Optional[float] = None,
) -> ShapleyResult:
    """Plain permutation-sampling Shapley estimate.

    One sampled permutation updates every feature by walking the order
    once (t + 1 evaluations). Identical to partial_shapley with p = 0,
    including the consumed random stream.
    """
    res = partial_shapley(nu, 0.0, n_permutations, rng, epsilon=epsilon, delta=delta)
    res.meta["form"] = "sampled"
    return res


class QueryLog:
    """Wraps a CharacteristicFn and records every queried coalition size."""

    def __init__(self, nu: CharacteristicFn):
        self._nu = nu
        self.ground = nu.ground
        self.head = nu.head
        self.board = nu.board
        self.a_star = nu.a_star
        self.sizes = []

    @property
    def t(self):
        return self._nu.t

    def mask_of(self, coalition):
        return self._nu.mask_of(coalition)

    def members(self, mask):
        return self._nu.members(mask)

    def __call__(self, coalition):
        return self.eval_mask(self._nu.mask_of(coalition))

    def eval_mask(self, mask: int) -> float:
        self.sizes.append(bin(mask).count("1"))
        return self._nu.eval_mask(mask)

    @property
    def min_size(self) -> int:
        return min(self.sizes) if self.sizes else -1
