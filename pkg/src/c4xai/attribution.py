"""Saliency methods, per-piece aggregation, and top-fraction selection.

Every method explains the full-information decision of the network (the
policy argmax a*) and produces a 3x6x7 map of relevance scores. The
masker pipeline then sums absolute scores of the two colour channels
per occupied cell, reveals the best-scoring fraction (ties broken
uniformly at random), and re-encodes the board.

Shapley sampling and the Frank-Wolfe mask register here as score
sources too, so tournaments treat every masker uniformly.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from . import charfn, engine, fwmask, network


class AttributionError(Exception):
    pass


class UnknownMethod(AttributionError):
    pass


class ContextMismatch(AttributionError):
    pass


@dataclass
class SaliencyMap:
    scores: np.ndarray  # 3 x 6 x 7
    method: str
    a_star: Optional[int]
    board_key: bytes

    def __post_init__(self):
        if not np.isfinite(self.scores).all():
            raise AttributionError(f"non-finite saliency from {self.method}")


def board_hash(board: engine.BoardState) -> str:
    return hashlib.sha256(board.key()).hexdigest()[:16]


def _full_trace(params, board):
    x = engine.encode(board, perspective=board.to_move, dtype=params.dtype)
    trace = network.forward(params, x)
    return x, trace, int(np.argmax(trace.policy[0]))


def _prob_gradient(params, trace, a_star) -> np.ndarray:
    one_hot = np.zeros((1, network.N_ACTIONS))
    one_hot[0, a_star] = 1.0
    _, g = network.backward(params, trace, policy_grad=one_hot, want_param_grads=False)
    return g[0]


def gradient(params: network.NetworkParams, board: engine.BoardState) -> SaliencyMap:
    """d P(a*) / d input."""
    _, trace, a_star = _full_trace(params, board)
    return SaliencyMap(_prob_gradient(params, trace, a_star), "gradient", a_star, board.key())


def smoothgrad(
    params: network.NetworkParams,
    board: engine.BoardState,
    rng: np.random.Generator,
    n: int = 25,
    sigma: float = 0.15,
) -> SaliencyMap:
    """Mean gradient over n Gaussian-perturbed copies of the encoding.

    Noise lands on all three channels of the encoding as-is; the
    perturbed tensors are generally not valid board encodings."""
    x, _, a_star = _full_trace(params, board)
    acc = np.zeros_like(x, dtype=float)
    for _ in range(n):
        noisy = x + rng.normal(0.0, sigma, size=x.shape) if sigma > 0 else x
        trace = network.forward(params, noisy)
        acc += _prob_gradient(params, trace, a_star)
    return SaliencyMap(acc / n, "smoothgrad", a_star, board.key())


def guided_backprop(params: network.NetworkParams, board: engine.BoardState) -> SaliencyMap:
    """Backward pass from the a* logit where every ReLU passes signal
    only if both its forward activation and the incoming signal are
    positive."""
    _, trace, a_star = _full_trace(params, board)
    one_hot = np.zeros((1, network.N_ACTIONS))
    one_hot[0, a_star] = 1.0
    _, g = network.backward(
        params,
        trace,
        policy_grad=one_hot,
        at_logits=True,
        relu_rule="guided",
        want_param_grads=False,
    )
    return SaliencyMap(g[0], "guided_backprop", a_star, board.key())


def _stabilized(z: np.ndarray, eps: Optional[float]) -> np.ndarray:
    e = 1e-7 * float(np.mean(np.abs(z))) if eps is None else float(eps)
    e = max(e, 1e-12)
    return np.where(z >= 0, z + e, z - e)


def lrp_eps(
    params: network.NetworkParams, board: engine.BoardState, eps: Optional[float] = None
) -> SaliencyMap:
    """Epsilon-stabilized z-rule relevance propagation from the a* logit.

    ``eps`` None scales the stabilizer per layer to 1e-7 of the mean
    absolute pre-activation; pass a number for an absolute epsilon.
    """
    t = params.tensors
    _, trace, a_star = _full_trace(params, board)

    z = trace.policy_logits[0]
    relevance = np.zeros(network.N_ACTIONS)
    relevance[a_star] = z[a_star]
    s = relevance / _stabilized(z, eps)
    r_vec = trace.fc_a[-1][0] * (s @ t["policy_w"])

    for i in range(network.N_FC, 0, -1):
        z = trace.fc_z[i - 1][0]
        a_in = trace.fc_a[i - 2][0] if i >= 2 else trace.flat[0]
        s = r_vec / _stabilized(z, eps)
        r_vec = a_in * (s @ t[f"fc{i}_w"])

    c = params.arch.conv_channels
    r_map = r_vec.reshape(1, c, *network.CONV_HW[-1])
    for i in range(len(network.CONV_PADS), 0, -1):
        z = trace.conv_z[i - 1]
        a_in = trace.conv_a[i - 2] if i >= 2 else trace.x
        s = r_map / _stabilized(z, eps)
        r_map = a_in * network.conv_input_backward(
            s, t[f"conv{i}_w"], a_in.shape[2:], network.CONV_PADS[i - 1]
        )
    return SaliencyMap(r_map[0], "lrp_eps", a_star, board.key())


def deeplift_rescale(
    params: network.NetworkParams,
    board: engine.BoardState,
    baseline: Optional[np.ndarray] = None,
) -> SaliencyMap:
    """Rescale-rule contributions against a reference input.

    The default baseline is the colour-blind encoding (every piece
    hidden), which stays on the training manifold of partially-hidden
    boards. Each ReLU's local slope becomes (delta out)/(delta in),
    falling back to the plain subgradient where the pre-activation
    barely moves. Contributions are multiplier * (x - baseline) at the
    a* logit; they sum to the logit difference.
    """
    x, trace, a_star = _full_trace(params, board)
    if baseline is None:
        baseline = engine.encode(board, frozenset(), perspective=board.to_move, dtype=params.dtype)
    trace0 = network.forward(params, baseline)

    local = {}
    for i in range(1, len(network.CONV_PADS) + 1):
        local[f"conv{i}"] = _rescale_slope(trace.conv_z[i - 1], trace0.conv_z[i - 1])
    for i in range(1, network.N_FC + 1):
        local[f"fc{i}"] = _rescale_slope(trace.fc_z[i - 1], trace0.fc_z[i - 1])

    one_hot = np.zeros((1, network.N_ACTIONS))
    one_hot[0, a_star] = 1.0
    _, mult = network.backward(
        params,
        trace,
        policy_grad=one_hot,
        at_logits=True,
        relu_local_grad=local,
        want_param_grads=False,
    )
    contrib = mult[0] * (x - np.asarray(baseline, dtype=x.dtype))
    return SaliencyMap(contrib, "deeplift_rescale", a_star, board.key())


def _rescale_slope(z: np.ndarray, z0: np.ndarray) -> np.ndarray:
    dz = z - z0
    da = np.maximum(z, 0.0) - np.maximum(z0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = da / dz
    return np.where(np.abs(dz) > 1e-9, slope, (z > 0).astype(z.dtype))


def random_saliency(
    params: network.NetworkParams, board: engine.BoardState, rng: np.random.Generator
) -> SaliencyMap:
    """Standard-normal noise per entry; the null baseline."""
    _, _, a_star = _full_trace(params, board)
    return SaliencyMap(rng.standard_normal((3, engine.ROWS, engine.COLS)), "random", a_star, board.key())


def input_saliency(params: network.NetworkParams, board: engine.BoardState) -> SaliencyMap:
    """The encoding itself: every piece equally salient."""
    x, _, a_star = _full_trace(params, board)
    return SaliencyMap(x.astype(float), "input", a_star, board.key())


_MAP_METHODS: Dict[str, Callable] = {
    "gradient": lambda params, board, rng, opts: gradient(params, board),
    "smoothgrad": lambda params, board, rng, opts: smoothgrad(
        params, board, rng, n=opts.get("n", 25), sigma=opts.get("sigma", 0.15)
    ),
    "guided_backprop": lambda params, board, rng, opts: guided_backprop(params, board),
    "lrp_eps": lambda params, board, rng, opts: lrp_eps(params, board, eps=opts.get("eps")),
    "deeplift_rescale": lambda params, board, rng, opts: deeplift_rescale(
        params, board, baseline=opts.get("baseline")
    ),
    "random": lambda params, board, rng, opts: random_saliency(params, board, rng),
    "input": lambda params, board, rng, opts: input_saliency(params, board),
}


def saliency(
    method: str,
    params: network.NetworkParams,
    board: engine.BoardState,
    rng: Optional[np.random.Generator] = None,
    **opts,
) -> SaliencyMap:
    """Dispatch a map-producing method by name."""
    fn = _MAP_METHODS.get(method)
    if fn is None:
        raise UnknownMethod(f"{method!r}; map methods: {sorted(_MAP_METHODS)}")
    if rng is None:
        rng = np.random.default_rng()
    return fn(params, board, rng, opts)


def aggregate(smap: SaliencyMap, board: engine.BoardState) -> dict:
    """Per-piece scores: |channel 0| + |channel 1| on occupied cells.

    Scores on empty cells and on the open-fields channel are ignored.
    """
    if smap.board_key != board.key():
        raise ContextMismatch("saliency map was computed for a different position")
    s = smap.scores
    return {
        (row, col): float(abs(s[0, row, col]) + abs(s[1, row, col]))
        for row, col in board.occupied_cells()
    }


def select_top(
    scores: dict,
    fraction: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    count: Optional[int] = None,
) -> frozenset:
    """Reveal the ceil(fraction * t) best-scoring cells.

    Exact score ties are broken uniformly at random via a random
    secondary sort key, so equal-scoring cells at the cut boundary are
    each selected with equal probability. ``count`` overrides the
    fraction-derived size (used by the top-3 ground-truth check).
    """
    cells = sorted(scores)
    t = len(cells)
    if count is None:
        if fraction is None or not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
        # the 1e-9 slack keeps float noise in fraction*t from inflating the ceil
        count = math.ceil(fraction * t - 1e-9)
    count = min(count, t)
    if count <= 0 or t == 0:
        return frozenset()
    vals = np.array([scores[c] for c in cells], dtype=float)
    rng = rng or np.random.default_rng()
    order = np.lexsort((rng.permutation(t), -vals))
    return frozenset(cells[i] for i in order[:count])


@dataclass(frozen=True)
class MethodSpec:
    """A masker: scores pieces of a position, given network and budget.

    ``fraction_override`` pins the reveal fraction regardless of the
    match setting; the input baseline shows the complete board, so it
    reveals everything.
    """

    name: str
    scorer: Callable  # (params, board, rng, fraction, opts) -> {cell: score}
    fraction_override: Optional[float] = None
    default_opts: dict = field(default_factory=dict)


def _map_scorer(method_name):
    def scorer(params, board, rng, fraction, opts):
        smap = saliency(method_name, params, board, rng, **opts)
        return aggregate(smap, board)

    return scorer


def _shapley_scorer(params, board, rng, fraction, opts):
    nu = charfn.nu_pol(params, board)
    p = opts.get("p", 0.5)
    n = opts.get("n")
    if n is None:
        epsilon, delta = opts.get("epsilon", 0.25), opts.get("delta", 0.1)
        n = charfn.sample_count(epsilon, delta)
    if nu.t == 0:
        return {}
    try:
        res = charfn.partial_shapley(nu, p, n, rng)
    except charfn.EmptyPermutationClass:
        # tiny t can leave no admissible position; fall back to plain sampling
        res = charfn.sample_shapley(nu, n, rng)
    return res.as_dict()


def _fw_scorer(params, board, rng, fraction, opts):
    t = board.turn
    if t == 0:
        return {}
    k = opts.get("k")
    if k is None:
        k = max(1, math.ceil(fraction * t - 1e-9))
    cfg = fwmask.FWConfig(
        k=k,
        iterations=opts.get("iterations", 50),
        step_rule=opts.get("step_rule", "agnostic"),
    )
    result = fwmask.fw_optimize(params, board, cfg)
    return {cell: float(result.mask[cell[0], cell[1]]) for cell in board.occupied_cells()}


METHODS: Dict[str, MethodSpec] = {
    **{name: MethodSpec(name, _map_scorer(name)) for name in _MAP_METHODS},
    "shapley": MethodSpec("shapley", _shapley_scorer),
    "fw": MethodSpec("fw", _fw_scorer),
}
METHODS["input"] = MethodSpec("input", _map_scorer("input"), fraction_override=1.0)


def method_names() -> tuple:
    return tuple(sorted(METHODS))


def _resolve(method: str, fraction: float, opts: Optional[dict]):
    spec = METHODS.get(method)
    if spec is None:
        raise UnknownMethod(f"{method!r}; registered: {method_names()}")
    merged = dict(spec.default_opts)
    if opts:
        merged.update(opts)
    frac = spec.fraction_override if spec.fraction_override is not None else fraction
    return spec, frac, merged


def piece_scores(
    method: str,
    params: network.NetworkParams,
    board: engine.BoardState,
    rng: np.random.Generator,
    fraction: float = 0.5,
    opts: Optional[dict] = None,
) -> dict:
    spec, frac, merged = _resolve(method, fraction, opts)
    return spec.scorer(params, board, rng, frac, merged)


def select_features(
    method: str,
    params: network.NetworkParams,
    board: engine.BoardState,
    fraction: float,
    rng: np.random.Generator,
    opts: Optional[dict] = None,
) -> frozenset:
    """The masker pipeline up to the coalition: score, then select."""
    spec, frac, merged = _resolve(method, fraction, opts)
    scores = spec.scorer(params, board, rng, frac, merged)
    return select_top(scores, frac, rng)


def explain_and_mask(
    method: str,
    params: network.NetworkParams,
    board: engine.BoardState,
    fraction: float,
    rng: np.random.Generator,
    perspective: Optional[int] = None,
    opts: Optional[dict] = None,
) -> np.ndarray:
    """Full masker pipeline: the re-encoded tensor the player will see."""
    revealed = select_features(method, params, board, fraction, rng, opts=opts)
    return engine.encode(board, revealed, perspective=perspective, dtype=params.dtype)


def dump_csv(maps, path, extra_rows: Optional[dict] = None) -> str:
    """Write maps as rows (method, board, channel, row, col, value)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "board", "channel", "row", "col", "value"])
        for smap in maps:
            bh = hashlib.sha256(smap.board_key).hexdigest()[:16]
            for ch in range(3):
                for row in range(engine.ROWS):
                    for col in range(engine.COLS):
                        writer.writerow(
                            [smap.method, bh, ch, row, col, repr(float(smap.scores[ch, row, col]))]
                        )
    return str(path)
