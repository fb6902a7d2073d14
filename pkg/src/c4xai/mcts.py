"""UCT Monte-Carlo tree search opponent and the external move oracle.

The tree policy is plain UCB1 with uniform-random rollouts to the end
of the game. Node statistics are kept from the perspective of the
player whose move created the node, so selection always maximizes the
parent mover's interest. Rollouts run on a bitboard (7 bits per column,
one guard bit) and are cross-checked against the authoritative engine
in the test suite.

A MoveOracle is anything with best_move(board) -> (column, score|None).
The built-in fallback wraps a high-simulation search; an external
perfect solver can plug in over a line protocol on standard streams.
"""

from __future__ import annotations

import hashlib
import math
import os
import select as _select
import subprocess
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from . import engine, network

_SHIFTS = (1, 7, 8, 6)  # vertical, horizontal, both diagonals
_COL_BITS = 7  # six playable rows plus a guard bit


class MCTSError(Exception):
    pass


class IllegalRecord(MCTSError):
    pass


class OracleError(MCTSError):
    pass


@dataclass(frozen=True)
class MCTSConfig:
    simulations: int = 500
    exploration: float = math.sqrt(2.0)
    seed: Optional[int] = None

    def __post_init__(self):
        if self.simulations < 1:
            raise ValueError("simulations must be >= 1")


def _bb_win(stones: int) -> bool:
    for s in _SHIFTS:
        m = stones & (stones >> s)
        if m & (m >> (2 * s)):
            return True
    return False


def _bb_from_board(board: engine.BoardState):
    """(side-to-move stones, all stones, per-column heights)."""
    cur = 0
    occ = 0
    heights = [0] * engine.COLS
    for col in range(engine.COLS):
        for row in range(engine.ROWS):
            v = board.cells[row][col]
            if v == engine.EMPTY:
                break
            bit = 1 << (col * _COL_BITS + row)
            occ |= bit
            if v == board.to_move:
                cur |= bit
            heights[col] = row + 1
    return cur, occ, heights


class _Node:
    __slots__ = ("cur", "occ", "heights", "ply", "terminal", "children", "n", "w")

    def __init__(self, cur, occ, heights, ply, terminal):
        self.cur = cur
        self.occ = occ
        self.heights = heights
        self.ply = ply
        self.terminal = terminal  # None, "win" (for the move's maker), "draw"
        self.children = {}
        self.n = 0
        self.w = 0.0

    def legal(self):
        return [c for c in range(engine.COLS) if self.heights[c] < engine.ROWS]


def _child(node: _Node, col: int) -> _Node:
    bit = 1 << (col * _COL_BITS + node.heights[col])
    moved = node.cur | bit
    occ = node.occ | bit
    heights = list(node.heights)
    heights[col] += 1
    ply = node.ply + 1
    if _bb_win(moved):
        terminal = "win"
    elif ply == engine.ROWS * engine.COLS:
        terminal = "draw"
    else:
        terminal = None
    # the new side to move owns the other colour's stones
    return _Node(occ ^ moved, occ, heights, ply, terminal)


def _rollout(node: _Node, rng: np.random.Generator) -> float:
    """Random playout; +1/0/-1 from the perspective of the player whose
    move created ``node``."""
    if node.terminal == "win":
        return 1.0
    if node.terminal == "draw":
        return 0.0
    cur, occ = node.cur, node.occ
    heights = list(node.heights)
    ply = node.ply
    total = engine.ROWS * engine.COLS
    # sign of the outcome for node's creator: the creator is the opponent
    # of the player to move at node, who moves first in the rollout
    sign = -1.0
    while True:
        legal = [c for c in range(engine.COLS) if heights[c] < engine.ROWS]
        col = legal[int(rng.integers(len(legal)))]
        bit = 1 << (col * _COL_BITS + heights[col])
        moved = cur | bit
        occ |= bit
        heights[col] += 1
        ply += 1
        if _bb_win(moved):
            return sign
        if ply == total:
            return 0.0
        cur = occ ^ moved
        sign = -sign


@dataclass
class SearchResult:
    column: int
    visits: dict
    values: dict  # mean value per root move, creator's perspective
    simulations: int


def mcts_search(
    board: engine.BoardState, config: MCTSConfig, rng: np.random.Generator
) -> SearchResult:
    if engine.outcome(board).is_terminal:
        raise MCTSError("search from a terminal position")
    cur, occ, heights = _bb_from_board(board)
    root = _Node(cur, occ, heights, board.turn, None)
    c = config.exploration
    for _ in range(config.simulations):
        node = root
        path = [node]
        # select: first visit of any node plays out from the node itself
        while node.terminal is None and node.n > 0:
            legal = node.legal()
            fresh = [col for col in legal if col not in node.children]
            if fresh:
                col = fresh[int(rng.integers(len(fresh)))]
                node.children[col] = _child(node, col)
                node = node.children[col]
                path.append(node)
                break
            log_n = math.log(node.n)
            best, best_score = None, -math.inf
            for col in legal:
                ch = node.children[col]
                score = ch.w / ch.n + c * math.sqrt(log_n / ch.n)
                if score > best_score:
                    best, best_score = ch, score
            node = best
            path.append(node)
        value = _rollout(node, rng)
        # value is signed for the creator of the leaf; creators alternate
        for depth, visited in enumerate(reversed(path)):
            visited.n += 1
            visited.w += value if depth % 2 == 0 else -value
    visits = {col: ch.n for col, ch in root.children.items()}
    values = {col: (ch.w / ch.n if ch.n else 0.0) for col, ch in root.children.items()}
    if visits:
        top = max(visits.values())
        best_cols = [col for col, n in visits.items() if n == top]
        column = int(best_cols[int(rng.integers(len(best_cols)))])
    else:
        # a one-simulation search only visits the root; pick uniformly
        legal = root.legal()
        column = int(legal[int(rng.integers(len(legal)))])
    return SearchResult(column=column, visits=visits, values=values, simulations=config.simulations)


def mcts_move(board: engine.BoardState, config: MCTSConfig, rng: np.random.Generator) -> int:
    return mcts_search(board, config, rng).column


# ---------------------------------------------------------------------------
# benchmarking a trained agent against the search
# ---------------------------------------------------------------------------

@dataclass
class WinStats:
    """Disjoint outcome counts from the agent's perspective."""

    wins: int
    draws: int
    losses: int
    illegal: int
    n_games: int
    game_seeds: tuple = ()

    @property
    def win_rate(self) -> float:
        return self.wins / self.n_games if self.n_games else 0.0


def _as_params(agent) -> network.NetworkParams:
    if isinstance(agent, network.NetworkParams):
        return agent
    return network.load(agent)


def agent_move(params: network.NetworkParams, board: engine.BoardState) -> int:
    """Competitive play: the most likely action under full information."""
    x = engine.encode(board, perspective=board.to_move, dtype=params.dtype)
    policy, _ = network.policy_value(params, x)
    return int(np.argmax(policy))


def benchmark(
    agent,
    mcts_config: MCTSConfig,
    n_games: int,
    rng: Optional[np.random.Generator] = None,
    seed: Optional[int] = None,
) -> WinStats:
    """Agent (argmax policy, full information) vs the search, colours
    alternating between games. An illegal agent move ends its game and
    lands in the separate ``illegal`` bucket."""
    if n_games < 1:
        raise ValueError("n_games must be >= 1")
    params = _as_params(agent)
    root = np.random.SeedSequence(
        seed if seed is not None else (int(rng.integers(2**63)) if rng else 0)
    )
    seeds = root.spawn(n_games)
    game_seeds = tuple(int(ss.generate_state(1)[0]) for ss in seeds)
    wins = draws = losses = illegal = 0
    for g, ss in enumerate(seeds):
        game_rng = np.random.default_rng(ss)
        agent_colour = engine.RED if g % 2 == 0 else engine.BLUE
        board = engine.new_board()
        while True:
            out = engine.outcome(board)
            if out.is_terminal:
                if out.kind == engine.DRAW:
                    draws += 1
                elif (out.kind == engine.RED_WINS) == (agent_colour == engine.RED):
                    wins += 1
                else:
                    losses += 1
                break
            if board.to_move == agent_colour:
                col = agent_move(params, board)
                if board.column_height(col) >= engine.ROWS:
                    illegal += 1
                    break
                board = engine.apply_move(board, col)
            else:
                board = engine.apply_move(board, mcts_move(board, mcts_config, game_rng))
    return WinStats(
        wins=wins,
        draws=draws,
        losses=losses,
        illegal=illegal,
        n_games=n_games,
        game_seeds=game_seeds,
    )


def count_optimal_moves(agent, game_record) -> int:
    """How many of a 41-move reference game the agent predicts (argmax
    equals the recorded move at each of the 41 positions)."""
    params = _as_params(agent)
    record = [int(c) for c in game_record]
    if len(record) != 41:
        raise IllegalRecord(f"expected 41 moves, got {len(record)}")
    board = engine.new_board()
    count = 0
    for i, col in enumerate(record):
        if engine.outcome(board).is_terminal:
            raise IllegalRecord(f"game over before move {i}")
        if col not in board.legal_moves():
            raise IllegalRecord(f"illegal move {col} at ply {i}")
        if agent_move(params, board) == col:
            count += 1
        board = engine.apply_move(board, col)
    return count


# ---------------------------------------------------------------------------
# move oracle plug-in
# ---------------------------------------------------------------------------

class MoveOracle(Protocol):
    def best_move(self, board: engine.BoardState) -> tuple:  # (column, score or None)
        ...


@dataclass
class MCTSOracle:
    """Built-in fallback oracle: a fixed-budget search, deterministic per
    position (the seed folds in the position key)."""

    config: MCTSConfig = field(default_factory=lambda: MCTSConfig(simulations=5000))

    def best_move(self, board: engine.BoardState) -> tuple:
        digest = hashlib.sha256(board.key()).digest()
        entropy = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(np.random.SeedSequence([self.config.seed or 0, entropy]))
        result = mcts_search(board, self.config, rng)
        return result.column, None


class ExternalOracle:
    """Line-protocol client for an external solver process.

    Request:  ``POS <row6>/<row5>/.../<row1>`` (text board, top row first)
    Response: ``MOVE <col>`` optionally followed by ``SCORE <int>``.
    """

    def __init__(self, cmd, timeout: float = 10.0):
        self.cmd = list(cmd)
        self.timeout = timeout
        self._proc = None

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.cmd,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.DEVNULL,
                )
            except OSError as exc:
                raise OracleError(f"cannot start oracle {self.cmd!r}: {exc}") from exc
        return self._proc

    def _read_line(self, proc) -> str:
        fd = proc.stdout.fileno()
        buf = bytearray()
        deadline = time.monotonic() + self.timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise OracleError(f"oracle timed out after {self.timeout}s")
            ready, _, _ = _select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, 4096)
            if not chunk:
                raise OracleError("oracle closed its output stream")
            buf.extend(chunk)
            if b"\n" in buf:
                line, _, rest = bytes(buf).partition(b"\n")
                if rest:
                    raise OracleError("oracle sent more than one line")
                return line.decode("utf-8", "replace").strip()

    def best_move(self, board: engine.BoardState) -> tuple:
        proc = self._ensure()
        request = "POS " + engine.board_to_text(board).replace("\n", "/") + "\n"
        try:
            proc.stdin.write(request.encode("utf-8"))
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise OracleError(f"oracle pipe failed: {exc}") from exc
        line = self._read_line(proc)
        parts = line.split()
        if len(parts) not in (2, 4) or parts[0] != "MOVE":
            raise OracleError(f"malformed oracle response {line!r}")
        try:
            col = int(parts[1])
        except ValueError as exc:
            raise OracleError(f"non-integer column in {line!r}") from exc
        score = None
        if len(parts) == 4:
            if parts[2] != "SCORE":
                raise OracleError(f"malformed oracle response {line!r}")
            try:
                score = int(parts[3])
            except ValueError as exc:
                raise OracleError(f"non-integer score in {line!r}") from exc
        if col not in board.legal_moves():
            raise OracleError(f"oracle chose illegal column {col}")
        return col, score

    def close(self):
        if self._proc is not None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def play_oracle_game(oracle_a: MoveOracle, oracle_b: Optional[MoveOracle] = None) -> list:
    """Full game between two oracles; returns the column sequence."""
    oracle_b = oracle_b or oracle_a
    board = engine.new_board()
    record = []
    while not engine.outcome(board).is_terminal:
        oracle = oracle_a if board.to_move == engine.RED else oracle_b
        col, _ = oracle.best_move(board)
        record.append(int(col))
        board = engine.apply_move(board, col)
    return record
