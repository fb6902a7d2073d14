"""Evaluation harness: ground-truth scoring, information-performance
curves, and the masker round-robin tournament.

The tournament protocol: each side owns an attribution method (the
masker). Before a move, the mover's masker scores the pieces of the
full-information board, the top fraction is revealed, and the network
picks its move from the masked view by sampling (non-competitive play).
Colours alternate between games; an illegal move loses the game for the
offender and is also tallied separately.

All randomness flows from one root seed through per-game child seeds,
so results are identical for any worker count and bit-exact on reruns.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import attribution, engine, mcts, network


class HarnessError(Exception):
    pass


class InsufficientCases(HarnessError):
    def __init__(self, message, collected=None):
        super().__init__(message)
        self.collected = collected or []


# ---------------------------------------------------------------------------
# ground truth: positions one move before a confident win
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruthCase:
    board: engine.BoardState  # position before the winning move
    winning_move: int
    cells: frozenset  # the already-placed pieces completing the line(s)
    confidence: float


def harvest_ground_truth(
    params: network.NetworkParams,
    n_cases: int,
    rng: np.random.Generator,
    confidence: float = 0.9,
    game_cap: Optional[int] = None,
) -> list:
    """Self-play until ``n_cases`` games end in a win whose final move
    was the policy argmax with at least ``confidence`` probability.

    The registered case is the position just before that move; its
    ground-truth cells are the union of all completed lines minus the
    cell the winning move lands on."""
    if game_cap is None:
        game_cap = max(200, 60 * n_cases)
    cases = []
    for _ in range(game_cap):
        if len(cases) >= n_cases:
            break
        board = engine.new_board()
        last = None  # (board before move, action, argmax flag, confidence)
        while True:
            out = engine.outcome(board)
            if out.is_terminal:
                if out.kind in (engine.RED_WINS, engine.BLUE_WINS) and last is not None:
                    pre, action, was_argmax, conf = last
                    if was_argmax and conf >= confidence:
                        landing = (pre.column_height(action), action)
                        cells = frozenset(out.winning_cells) - {landing}
                        cases.append(
                            GroundTruthCase(
                                board=pre,
                                winning_move=action,
                                cells=cells,
                                confidence=conf,
                            )
                        )
                break
            x = engine.encode(board, perspective=board.to_move, dtype=params.dtype)
            policy, _ = network.policy_value(params, x)
            probs = np.asarray(policy, dtype=np.float64)
            probs /= probs.sum()
            action = int(rng.choice(network.N_ACTIONS, p=probs))
            if board.column_height(action) >= engine.ROWS:
                break  # illegal self-play move forfeits the game, no case
            last = (board, action, action == int(np.argmax(policy)), float(policy[action]))
            board = engine.apply_move(board, action)
    if len(cases) < n_cases:
        raise InsufficientCases(
            f"collected {len(cases)}/{n_cases} cases in {game_cap} games "
            f"(confidence floor {confidence})",
            collected=cases,
        )
    return cases


def ground_truth_score(
    cases: Sequence[GroundTruthCase],
    method: Union[str, Callable],
    params: network.NetworkParams,
    rng: np.random.Generator,
    fraction: float = 0.5,
) -> np.ndarray:
    """Histogram over {0,1,2,3}: per case, how many of the top-3 salient
    pieces are ground-truth pieces (the union for multi-line wins)."""
    hist = np.zeros(4, dtype=int)
    for case in cases:
        if callable(method):
            scores = method(params, case.board, rng)
        else:
            scores = attribution.piece_scores(
                method, params, case.board, rng, fraction=fraction
            )
        top3 = attribution.select_top(scores, rng=rng, count=3)
        hist[min(len(top3 & case.cells), 3)] += 1
    return hist


# ---------------------------------------------------------------------------
# game runners
# ---------------------------------------------------------------------------

def _run_game(move_fns: dict):
    """Play out a game; returns (winner colour or None, illegal offender
    colour or None, plies played). Draws return (None, None, 42)."""
    board = engine.new_board()
    length = 0
    while True:
        out = engine.outcome(board)
        if out.is_terminal:
            if out.kind == engine.RED_WINS:
                return engine.RED, None, length
            if out.kind == engine.BLUE_WINS:
                return engine.BLUE, None, length
            return None, None, length
        mover = board.to_move
        col = move_fns[mover](board)
        if col not in board.legal_moves():
            return None, mover, length
        board = engine.apply_move(board, col)
        length += 1


def masked_policy_mover(
    params: network.NetworkParams,
    method: str,
    fraction: float,
    rng: np.random.Generator,
    competitive: bool = False,
    opts: Optional[dict] = None,
) -> Callable:
    """The masker/player pipeline as a move function."""

    def move(board):
        revealed = attribution.select_features(method, params, board, fraction, rng, opts=opts)
        x = engine.encode(board, revealed, perspective=board.to_move, dtype=params.dtype)
        policy, _ = network.policy_value(params, x)
        if competitive:
            return int(np.argmax(policy))
        probs = np.asarray(policy, dtype=np.float64)
        probs /= probs.sum()
        return int(rng.choice(network.N_ACTIONS, p=probs))

    return move


def full_info_mover(
    params: network.NetworkParams, rng: np.random.Generator, competitive: bool = False
) -> Callable:
    def move(board):
        x = engine.encode(board, perspective=board.to_move, dtype=params.dtype)
        policy, _ = network.policy_value(params, x)
        if competitive:
            return int(np.argmax(policy))
        probs = np.asarray(policy, dtype=np.float64)
        probs /= probs.sum()
        return int(rng.choice(network.N_ACTIONS, p=probs))

    return move


def random_mover(rng: np.random.Generator) -> Callable:
    def move(board):
        legal = board.legal_moves()
        return int(legal[int(rng.integers(len(legal)))])

    return move


# ---------------------------------------------------------------------------
# match / tournament accounting
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    """Counts for one pairing. wins_a + wins_b + draws = n_games; a win
    by the opponent's illegal move counts as a win and is additionally
    tallied in illegal_a/illegal_b against the offender."""

    method_a: str
    method_b: str
    wins_a: int = 0
    wins_b: int = 0
    draws: int = 0
    illegal_a: int = 0
    illegal_b: int = 0
    n_games: int = 0
    fraction: float = 0.5
    seed: Optional[int] = None

    @property
    def score_a(self) -> float:
        return self.wins_a + self.draws / 2.0

    @property
    def score_b(self) -> float:
        return self.wins_b + self.draws / 2.0

    def verify(self):
        assert self.wins_a + self.wins_b + self.draws == self.n_games
        assert self.illegal_a <= self.wins_b and self.illegal_b <= self.wins_a
        return self


def _match_game(args):
    (params, method_a, method_b, fraction, competitive, opts_a, opts_b, idx, ss) = args
    rng = np.random.default_rng(ss)
    a_is_red = idx % 2 == 0
    mover_a = masked_policy_mover(params, method_a, fraction, rng, competitive, opts_a)
    mover_b = masked_policy_mover(params, method_b, fraction, rng, competitive, opts_b)
    fns = {engine.RED: mover_a if a_is_red else mover_b, engine.BLUE: mover_b if a_is_red else mover_a}
    winner, offender, length = _run_game(fns)
    side_of = {engine.RED: "a" if a_is_red else "b", engine.BLUE: "b" if a_is_red else "a"}
    if offender is not None:
        # offender loses: the opponent takes the win
        return idx, side_of[engine.RED if offender == engine.BLUE else engine.BLUE], side_of[offender], length
    if winner is None:
        return idx, "draw", None, length
    return idx, side_of[winner], None, length


def play_match(
    method_a: str,
    method_b: str,
    params: network.NetworkParams,
    n_games: int,
    fraction: float = 0.5,
    seed: int = 0,
    workers: int = 1,
    competitive: bool = False,
    opts_a: Optional[dict] = None,
    opts_b: Optional[dict] = None,
) -> MatchResult:
    """Masker-vs-masker match; method A moves first in ceil(n/2) games."""
    if n_games < 1:
        raise ValueError("n_games must be >= 1")
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_games)
    jobs = [
        (params, method_a, method_b, fraction, competitive, opts_a, opts_b, i, ss)
        for i, ss in enumerate(children)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_match_game, jobs, chunksize=max(1, n_games // (4 * workers))))
    else:
        outcomes = [_match_game(j) for j in jobs]
    result = MatchResult(
        method_a=method_a, method_b=method_b, n_games=n_games, fraction=fraction, seed=seed
    )
    for _, win_side, offender, _ in sorted(outcomes):
        if win_side == "draw":
            result.draws += 1
        elif win_side == "a":
            result.wins_a += 1
        else:
            result.wins_b += 1
        if offender == "a":
            result.illegal_a += 1
        elif offender == "b":
            result.illegal_b += 1
    return result.verify()


@dataclass
class RoundRobinResult:
    methods: tuple
    matches: list
    n_games_per_pair: int

    def scores(self) -> dict:
        total = {m: 0.0 for m in self.methods}
        for match in self.matches:
            total[match.method_a] += match.score_a
            total[match.method_b] += match.score_b
        return total

    def to_csv(self, path) -> str:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "method_a",
                    "method_b",
                    "wins_a",
                    "wins_b",
                    "draws",
                    "illegal_a",
                    "illegal_b",
                    "score_a",
                    "score_b",
                    "n_games",
                ]
            )
            for m in self.matches:
                writer.writerow(
                    [
                        m.method_a,
                        m.method_b,
                        m.wins_a,
                        m.wins_b,
                        m.draws,
                        m.illegal_a,
                        m.illegal_b,
                        m.score_a,
                        m.score_b,
                        m.n_games,
                    ]
                )
        return str(path)


def round_robin(
    methods: Sequence[str],
    params: network.NetworkParams,
    n_games_per_pair: int,
    fraction: float = 0.5,
    seed: int = 0,
    workers: int = 1,
) -> RoundRobinResult:
    """Every unordered pair once; no self-pairings."""
    methods = tuple(methods)
    if len(methods) < 2:
        raise ValueError("need at least two methods")
    pairs = list(combinations(methods, 2))
    pair_seeds = np.random.SeedSequence(seed).spawn(len(pairs))
    matches = []
    for (ma, mb), ss in zip(pairs, pair_seeds):
        sub_seed = int(ss.generate_state(1)[0])
        matches.append(
            play_match(ma, mb, params, n_games_per_pair, fraction, seed=sub_seed, workers=workers)
        )
    return RoundRobinResult(methods=methods, matches=matches, n_games_per_pair=n_games_per_pair)


# ---------------------------------------------------------------------------
# information-performance curves and simple benchmarks
# ---------------------------------------------------------------------------

def _opponent_mover(opponent, params, rng):
    if opponent == "self":
        return full_info_mover(params, rng)
    if opponent == "random":
        return random_mover(rng)
    if isinstance(opponent, tuple) and opponent and opponent[0] == "mcts":
        config = mcts.MCTSConfig(simulations=int(opponent[1]))
        return lambda board: mcts.mcts_move(board, config, rng)
    if hasattr(opponent, "best_move"):
        return lambda board: opponent.best_move(board)[0]
    raise ValueError(f"unknown opponent {opponent!r}")


def _curve_game(args):
    (params, selector, opponent, fraction, competitive, idx, ss) = args
    rng = np.random.default_rng(ss)
    agent_colour = engine.RED if idx % 2 == 0 else engine.BLUE
    agent = masked_policy_mover(params, selector, fraction, rng, competitive)
    other = _opponent_mover(opponent, params, rng)
    fns = {
        agent_colour: agent,
        (engine.BLUE if agent_colour == engine.RED else engine.RED): other,
    }
    winner, offender, length = _run_game(fns)
    if offender is not None:
        tag = "illegal" if offender == agent_colour else "win"
    elif winner is None:
        tag = "draw"
    else:
        tag = "win" if winner == agent_colour else "loss"
    return idx, tag, length


def info_perf_curve(
    params: network.NetworkParams,
    selector: str,
    opponent,
    fractions: Iterable[float],
    n_games: int,
    seed: int = 0,
    competitive: bool = False,
    workers: int = 1,
) -> list:
    """Win rate (and mean game length) per revealed fraction.

    ``selector`` is any registered method; 'random' reproduces uniform
    random hiding. ``opponent`` is 'self' (full-information twin),
    'random', ('mcts', sims), or a MoveOracle.
    """
    rows = []
    for f_idx, fraction in enumerate(fractions):
        # seed keyed on (seed, fraction index): fractions can be re-run singly
        children = np.random.SeedSequence([seed, f_idx]).spawn(n_games)
        jobs = [
            (params, selector, opponent, float(fraction), competitive, i, ss)
            for i, ss in enumerate(children)
        ]
        if workers > 1 and not hasattr(opponent, "best_move"):
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_curve_game, jobs, chunksize=max(1, n_games // (4 * workers))))
        else:
            outcomes = [_curve_game(j) for j in jobs]
        wins = draws = losses = illegal = 0
        lengths = []
        for _, tag, length in sorted(outcomes):
            lengths.append(length)
            if tag == "win":
                wins += 1
            elif tag == "draw":
                draws += 1
            elif tag == "loss":
                losses += 1
            else:
                illegal += 1
                losses += 1
        rows.append(
            {
                "fraction": float(fraction),
                "n_games": n_games,
                "wins": wins,
                "draws": draws,
                "losses": losses,
                "illegal": illegal,
                "win_rate": wins / n_games,
                "mean_length": float(np.mean(lengths)),
            }
        )
    return rows


CURVE_COLUMNS = ("fraction", "n_games", "wins", "draws", "losses", "illegal", "win_rate", "mean_length")


def curve_to_csv(rows, path) -> str:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in CURVE_COLUMNS])
    return str(path)


def play_vs_random(
    params: network.NetworkParams, n_games: int, seed: int = 0
) -> mcts.WinStats:
    """Competitive (argmax) full-information agent against a uniform
    random mover, colours alternating."""
    children = np.random.SeedSequence(seed).spawn(n_games)
    wins = draws = losses = illegal = 0
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        agent_colour = engine.RED if i % 2 == 0 else engine.BLUE
        fns = {
            agent_colour: lambda board: mcts.agent_move(params, board),
            (engine.BLUE if agent_colour == engine.RED else engine.RED): random_mover(rng),
        }
        winner, offender, _ = _run_game(fns)
        if offender is not None:
            if offender == agent_colour:
                illegal += 1
            else:
                wins += 1
        elif winner is None:
            draws += 1
        elif winner == agent_colour:
            wins += 1
        else:
            losses += 1
    return mcts.WinStats(wins=wins, draws=draws, losses=losses, illegal=illegal, n_games=n_games)


# ---------------------------------------------------------------------------
# sidecar metadata
# ---------------------------------------------------------------------------

def write_sidecar(
    csv_path,
    command: Sequence[str],
    seed: Optional[int],
    checkpoint_path=None,
    config_obj=None,
) -> str:
    """JSON sidecar naming the producing command, seed, and content
    hashes of the checkpoint and config used."""
    meta = {
        "command": list(command),
        "seed": seed,
        "checkpoint_sha256": network.file_sha256(checkpoint_path) if checkpoint_path else None,
        "config_sha256": (
            hashlib.sha256(
                json.dumps(config_obj, sort_keys=True, default=str).encode()
            ).hexdigest()
            if config_obj is not None
            else None
        ),
    }
    path = str(csv_path) + ".meta.json"
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
