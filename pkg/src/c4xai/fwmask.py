"""Frank-Wolfe rate-distortion masks over the k-sparse polytope.

A continuous mask m in [0,1]^{6x7} damps the two colour channels of a
board encoding (the open-cells channel is never touched). Distortion is
the squared drop in the policy probability of the full-information best
move. Minimizing distortion over B_k = {v in [0,1]^42 : sum v <= k}
with the conditional-gradient method yields a saliency map whose large
entries mark the pieces that matter for the decision.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import engine, network

N_CELLS = engine.ROWS * engine.COLS


class FWError(Exception):
    pass


class NonFiniteGradient(FWError):
    pass


@dataclass
class FWConfig:
    k: float = 3
    iterations: int = 50
    step_rule: str = "agnostic"  # "agnostic" 2/(tau+2), or "line_search"
    line_search_grid: int = 33

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_rule not in ("agnostic", "line_search"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass
class FWResult:
    mask: np.ndarray  # best iterate, 6x7
    distortion: float  # distortion of the best iterate
    trace: np.ndarray  # best-so-far distortion per iteration (non-increasing)
    last_mask: np.ndarray  # final iterate regardless of quality
    meta: dict = field(default_factory=dict)


class _Objective:
    """Distortion and its mask gradient for one (params, board) pair."""

    def __init__(self, params: network.NetworkParams, board: engine.BoardState):
        if engine.outcome(board).is_terminal:
            raise FWError("mask optimization is defined on ongoing positions")
        self.params = params
        self.board = board
        mover = board.to_move
        self.x_full = engine.encode(board, perspective=mover, dtype=params.dtype)
        policy, _ = network.policy_value(params, self.x_full)
        self.a_star = int(np.argmax(policy))
        self.p_full = float(policy[self.a_star])

    def masked_input(self, m: np.ndarray) -> np.ndarray:
        x = self.x_full.copy()
        x[0] *= m
        x[1] *= m
        return x

    def value(self, m: np.ndarray) -> float:
        policy, _ = network.policy_value(self.params, self.masked_input(m))
        return (self.p_full - float(policy[self.a_star])) ** 2

    def value_and_grad(self, m: np.ndarray):
        x = self.masked_input(m)
        trace = network.forward(self.params, x)
        p_m = float(trace.policy[0, self.a_star])
        one_hot = np.zeros(network.N_ACTIONS)
        one_hot[self.a_star] = 1.0
        _, input_grad = network.backward(
            self.params, trace, policy_grad=one_hot[None], want_param_grads=False
        )
        # d/dm of (p_full - P(a*; x[m]))^2, channel 2 unaffected by m
        dp_dm = input_grad[0, 0] * self.x_full[0] + input_grad[0, 1] * self.x_full[1]
        grad = -2.0 * (self.p_full - p_m) * dp_dm
        if not np.isfinite(grad).all():
            raise NonFiniteGradient("non-finite distortion gradient")
        return (self.p_full - p_m) ** 2, grad.astype(float)


def distortion(
    params: network.NetworkParams,
    board: engine.BoardState,
    a_star: int,
    m: np.ndarray,
) -> float:
    """Squared drop of P(a_star) when colours are damped by mask m."""
    obj = _Objective(params, board)
    if a_star != obj.a_star:
        # caller pins the explained action; recompute the reference prob
        obj.a_star = int(a_star)
        policy, _ = network.policy_value(params, obj.x_full)
        obj.p_full = float(policy[a_star])
    return obj.value(np.asarray(m, dtype=float))


def distortion_gradient(
    params: network.NetworkParams, board: engine.BoardState, m: np.ndarray
) -> np.ndarray:
    """Exact gradient of the distortion w.r.t. the mask entries."""
    _, grad = _Objective(params, board).value_and_grad(np.asarray(m, dtype=float))
    return grad


def lmo_ksparse(gradient: np.ndarray, k: float) -> np.ndarray:
    """Linear minimization over B_k: indicator of the up-to-k most
    negative gradient entries (positive entries are never selected)."""
    g = np.asarray(gradient, dtype=float).reshape(-1)
    if g.size != N_CELLS:
        raise FWError(f"gradient must have {N_CELLS} entries, got {g.size}")
    v = np.zeros(N_CELLS)
    budget = int(min(k, N_CELLS))
    if budget >= 1:
        order = np.argsort(g, kind="stable")
        take = [i for i in order[:budget] if g[i] < 0]
        v[take] = 1.0
    return v.reshape(engine.ROWS, engine.COLS)


def fw_optimize(
    params: network.NetworkParams,
    board: engine.BoardState,
    config: FWConfig,
    on_iterate: Optional[Callable] = None,
) -> FWResult:
    """Conditional-gradient descent on the distortion over B_k.

    Starts at the uniform feasible point (k/42) * ones. The default step
    2/(tau + 2) needs no curvature knowledge; the line-search rule
    minimizes the objective along the segment on a scalar grid (the
    network output is not quadratic in m, so there is no closed form)
    and is never worse than staying put. Tracks and returns the best
    iterate seen, with the best-so-far distortion trace.
    """
    obj = _Objective(params, board)
    k = min(config.k, N_CELLS)
    m = np.full((engine.ROWS, engine.COLS), k / N_CELLS)
    best_m = m.copy()
    best_d = obj.value(m)
    trace = []
    for tau in range(config.iterations):
        d_val, grad = obj.value_and_grad(m)
        if d_val < best_d:
            best_d, best_m = d_val, m.copy()
        v = lmo_ksparse(grad, config.k)
        direction = v - m
        if config.step_rule == "line_search":
            gammas = np.linspace(0.0, 1.0, config.line_search_grid)
            vals = [obj.value(m + g * direction) for g in gammas]
            gamma = float(gammas[int(np.argmin(vals))])
        else:
            gamma = 2.0 / (tau + 2.0)
        m = m + gamma * direction
        np.clip(m, 0.0, 1.0, out=m)  # guards float drift only; convexity keeps m in B_k
        cur = obj.value(m)
        if cur < best_d:
            best_d, best_m = cur, m.copy()
        trace.append(best_d)
        if on_iterate is not None:
            on_iterate(tau, m.copy())
    return FWResult(
        mask=best_m,
        distortion=best_d,
        trace=np.array(trace),
        last_mask=m,
        meta={
            "k": config.k,
            "iterations": config.iterations,
            "step_rule": config.step_rule,
            "a_star": obj.a_star,
            "p_full": obj.p_full,
        },
    )


def fw_saliency(
    params: network.NetworkParams,
    board: engine.BoardState,
    k: float,
    rng: Optional[np.random.Generator] = None,
    fraction: float = 0.5,
    config: Optional[FWConfig] = None,
):
    """Mask-based saliency plus the revealed coalition it induces.

    The optimized mask restricted to occupied cells is the saliency; the
    top ceil(fraction * t) cells are selected with uniformly random
    tie-breaking (mask entries often saturate at exactly 1.0).
    Returns (FWResult, piece score dict, selected FeatureSet).
    """
    from .attribution import select_top  # local import, avoids a module cycle

    cfg = config if config is not None else FWConfig(k=k)
    result = fw_optimize(params, board, cfg)
    occupied = board.occupied_cells()
    scores = {cell: float(result.mask[cell[0], cell[1]]) for cell in occupied}
    rng = rng or np.random.default_rng()
    selected = select_top(scores, fraction, rng)
    return result, scores, selected


def result_to_csv(result: FWResult, path, extra_meta: Optional[dict] = None) -> str:
    """Per-board record: metadata lines, then one row per cell."""
    meta = dict(result.meta)
    meta["final_distortion"] = result.distortion
    if extra_meta:
        meta.update(extra_meta)
    with open(path, "w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={json.dumps(meta[key])}\n")
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "mask"])
        for row in range(engine.ROWS):
            for col in range(engine.COLS):
                writer.writerow([row, col, repr(float(result.mask[row, col]))])
    return str(path)
