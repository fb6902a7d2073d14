"""Connect Four rules, board encoding, and colour-feature masking.

Boards are immutable values. Rows are indexed bottom-up (row 0 is the
bottom row), columns left to right. Coalitions of revealed colour
features are sets of (row, col) coordinates over occupied cells, with
the canonical feature order being column-major, bottom-up.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional

import numpy as np

ROWS = 6
COLS = 7
CONNECT = 4

EMPTY = 0
RED = 1
BLUE = 2

# Outcome kinds
ONGOING = "ongoing"
RED_WINS = "red_wins"
BLUE_WINS = "blue_wins"
DRAW = "draw"

_WIN_KIND = {RED: RED_WINS, BLUE: BLUE_WINS}

_CELL_CHARS = {EMPTY: ".", RED: "r", BLUE: "b"}
_CHAR_CELLS = {v: k for k, v in _CELL_CHARS.items()}
HIDDEN_CHAR = "?"

# Scan directions for line detection: right, up, up-right, up-left.
_DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))


class EngineError(Exception):
    pass


class InvalidColumn(EngineError):
    """Column index outside 0..6."""


class ColumnFull(EngineError):
    """Move into a column that already holds six pieces."""


class RevealedEmptyCell(EngineError):
    """A coalition member points at an empty cell."""


class UnreachablePosition(EngineError):
    """A cell grid that no legal move sequence produces."""


@dataclass(frozen=True)
class BoardState:
    """A position plus the move history that produced it.

    cells[row][col] holds EMPTY / RED / BLUE with row 0 at the bottom.
    Invariants: gravity (no floating pieces), piece balance
    (red count - blue count is 0 or 1, 1 exactly when blue moves next),
    and replay of ``history`` from the empty board reproduces ``cells``.
    """

    cells: tuple = field(default_factory=lambda: ((EMPTY,) * COLS,) * ROWS)
    to_move: int = RED
    history: tuple = ()

    @property
    def turn(self) -> int:
        """Number of pieces on the board."""
        return len(self.history)

    def column_height(self, col: int) -> int:
        h = 0
        while h < ROWS and self.cells[h][col] != EMPTY:
            h += 1
        return h

    def legal_moves(self) -> tuple:
        return tuple(c for c in range(COLS) if self.cells[ROWS - 1][c] == EMPTY)

    def occupied_cells(self) -> tuple:
        """Occupied coordinates in canonical order: column-major, bottom-up."""
        out = []
        for col in range(COLS):
            for row in range(ROWS):
                if self.cells[row][col] == EMPTY:
                    break
                out.append((row, col))
        return tuple(out)

    def key(self) -> bytes:
        """Stable position identifier (cells plus side to move)."""
        flat = bytes(self.cells[r][c] for r in range(ROWS) for c in range(COLS))
        return flat + bytes([self.to_move])


@dataclass(frozen=True)
class Outcome:
    kind: str
    winning_cells: frozenset = frozenset()

    @property
    def is_terminal(self) -> bool:
        return self.kind != ONGOING


def new_board() -> BoardState:
    return BoardState()


def apply_move(board: BoardState, column: int) -> BoardState:
    """Drop the mover's piece into ``column``; returns the new position."""
    if not isinstance(column, (int, np.integer)) or isinstance(column, bool):
        raise InvalidColumn(f"column must be an integer, got {column!r}")
    if not 0 <= column < COLS:
        raise InvalidColumn(f"column {column} outside 0..{COLS - 1}")
    row = board.column_height(column)
    if row >= ROWS:
        raise ColumnFull(f"column {column} already holds {ROWS} pieces")
    cells = [list(r) for r in board.cells]
    cells[row][column] = board.to_move
    return BoardState(
        cells=tuple(tuple(r) for r in cells),
        to_move=BLUE if board.to_move == RED else RED,
        history=board.history + ((column, board.to_move),),
    )


def _lines_through(cells, player: int) -> set:
    """All cells lying on some completed four-in-a-row of ``player``.

    Walks maximal runs: any run of length L >= 4 contributes all L cells,
    which equals the union of its length-4 windows.
    """
    out = set()
    for row in range(ROWS):
        for col in range(COLS):
            if cells[row][col] != player:
                continue
            for dr, dc in _DIRECTIONS:
                # only start at the run's first cell to avoid rescanning
                pr, pc = row - dr, col - dc
                if 0 <= pr < ROWS and 0 <= pc < COLS and cells[pr][pc] == player:
                    continue
                run = []
                r, c = row, col
                while 0 <= r < ROWS and 0 <= c < COLS and cells[r][c] == player:
                    run.append((r, c))
                    r += dr
                    c += dc
                if len(run) >= CONNECT:
                    out.update(run)
    return out


def outcome(board: BoardState) -> Outcome:
    """Terminal status with the union of all completed lines."""
    red_line = _lines_through(board.cells, RED)
    blue_line = _lines_through(board.cells, BLUE)
    if red_line and blue_line:
        # unreachable through legal play; favour the side that moved last
        last = RED if board.to_move == BLUE else BLUE
        line = red_line if last == RED else blue_line
        return Outcome(_WIN_KIND[last], frozenset(line))
    if red_line:
        return Outcome(RED_WINS, frozenset(red_line))
    if blue_line:
        return Outcome(BLUE_WINS, frozenset(blue_line))
    if board.turn == ROWS * COLS:
        return Outcome(DRAW)
    return Outcome(ONGOING)


def encode(
    board: BoardState,
    revealed: Optional[Iterable] = None,
    perspective: Optional[int] = None,
    dtype=np.float64,
) -> np.ndarray:
    """Three-channel input tensor: revealed red, revealed blue, open cells.

    A hidden occupied cell is the all-zero channel triple, which keeps it
    distinguishable from an empty cell (channel 2 stays 0). ``revealed``
    defaults to every occupied cell. ``perspective`` swaps the two colour
    channels so channel 0 is always the given player's own pieces; None
    keeps the absolute convention (channel 0 red).
    """
    occ = set(board.occupied_cells())
    if revealed is None:
        revealed_set = occ
    else:
        revealed_set = set(revealed)
        bad = revealed_set - occ
        if bad:
            raise RevealedEmptyCell(f"not occupied: {sorted(bad)}")
    x = np.zeros((3, ROWS, COLS), dtype=dtype)
    ch = {RED: 0, BLUE: 1}
    if perspective == BLUE:
        ch = {BLUE: 0, RED: 1}
    elif perspective not in (None, RED):
        raise ValueError(f"perspective must be RED, BLUE or None, got {perspective!r}")
    for row in range(ROWS):
        for col in range(COLS):
            v = board.cells[row][col]
            if v == EMPTY:
                x[2, row, col] = 1.0
            elif (row, col) in revealed_set:
                x[ch[v], row, col] = 1.0
    return x


def sample_hidden(board: BoardState, p_h: float, rng: np.random.Generator) -> frozenset:
    """Hide floor(p_h * t) pieces uniformly; returns the revealed set."""
    if not 0.0 <= p_h <= 1.0:
        raise ValueError(f"p_h must lie in [0, 1], got {p_h}")
    occ = board.occupied_cells()
    t = len(occ)
    n_hidden = int(np.floor(p_h * t))
    if n_hidden == 0:
        return frozenset(occ)
    hidden_idx = rng.choice(t, size=n_hidden, replace=False)
    hidden = {occ[i] for i in hidden_idx}
    return frozenset(c for c in occ if c not in hidden)


# ---------------------------------------------------------------------------
# Text format: 6 lines of 7 characters from {., r, b, ?}, top row first.
# ---------------------------------------------------------------------------

def board_to_text(board: BoardState, revealed: Optional[Iterable] = None) -> str:
    """Render a board, with '?' on occupied cells outside ``revealed``."""
    shown = set(board.occupied_cells()) if revealed is None else set(revealed)
    lines = []
    for row in range(ROWS - 1, -1, -1):
        chars = []
        for col in range(COLS):
            v = board.cells[row][col]
            if v != EMPTY and (row, col) not in shown:
                chars.append(HIDDEN_CHAR)
            else:
                chars.append(_CELL_CHARS[v])
        lines.append("".join(chars))
    return "\n".join(lines)


def text_to_cells(text: str) -> tuple:
    """Parse the text format into a cell grid; '?' maps to the value 3."""
    raw = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(raw) != ROWS:
        raise ValueError(f"expected {ROWS} rows, got {len(raw)}")
    grid = [[EMPTY] * COLS for _ in range(ROWS)]
    for i, line in enumerate(raw):
        if len(line) != COLS:
            raise ValueError(f"row {i} has {len(line)} characters, expected {COLS}")
        row = ROWS - 1 - i
        for col, chr_ in enumerate(line):
            if chr_ == HIDDEN_CHAR:
                grid[row][col] = 3
            elif chr_ in _CHAR_CELLS:
                grid[row][col] = _CHAR_CELLS[chr_]
            else:
                raise ValueError(f"bad character {chr_!r} at row {i}, col {col}")
    return tuple(tuple(r) for r in grid)


def tensor_to_text(x: np.ndarray) -> str:
    """Render an encoded tensor; hidden occupied cells print as '?'."""
    if x.shape != (3, ROWS, COLS):
        raise ValueError(f"expected shape (3, {ROWS}, {COLS}), got {x.shape}")
    lines = []
    for row in range(ROWS - 1, -1, -1):
        chars = []
        for col in range(COLS):
            r, b, o = x[0, row, col], x[1, row, col], x[2, row, col]
            if o:
                chars.append(".")
            elif r:
                chars.append("r")
            elif b:
                chars.append("b")
            else:
                chars.append(HIDDEN_CHAR)
        lines.append("".join(chars))
    return "\n".join(lines)


def text_to_tensor(text: str, dtype=np.float64) -> np.ndarray:
    """Inverse of tensor_to_text (channel 0 red, channel 1 blue)."""
    grid = text_to_cells(text)
    x = np.zeros((3, ROWS, COLS), dtype=dtype)
    for row in range(ROWS):
        for col in range(COLS):
            v = grid[row][col]
            if v == EMPTY:
                x[2, row, col] = 1.0
            elif v == RED:
                x[0, row, col] = 1.0
            elif v == BLUE:
                x[1, row, col] = 1.0
            # value 3 (hidden) stays the all-zero triple
    return x


def _win_at(cells, row: int, col: int) -> bool:
    """Does the piece at (row, col) sit on a completed line?"""
    player = cells[row][col]
    for dr, dc in _DIRECTIONS:
        run = 1
        for sign in (1, -1):
            r, c = row + sign * dr, col + sign * dc
            while 0 <= r < ROWS and 0 <= c < COLS and cells[r][c] == player:
                run += 1
                r, c = r + sign * dr, c + sign * dc
        if run >= CONNECT:
            return True
    return False


def board_from_text(text: str) -> BoardState:
    """Reconstruct a BoardState, synthesizing a legal move order.

    The grid must contain no '?' (full information), respect gravity and
    piece balance, and admit an ordering in which colours alternate and
    no four-in-a-row appears before the final piece. Raises
    UnreachablePosition otherwise.
    """
    grid = text_to_cells(text)
    for row in range(ROWS):
        for col in range(COLS):
            if grid[row][col] == 3:
                raise UnreachablePosition("hidden cells cannot be replayed")
            if grid[row][col] != EMPTY and row > 0 and grid[row - 1][col] == EMPTY:
                raise UnreachablePosition(f"floating piece at ({row}, {col})")
    n_red = sum(r.count(RED) for r in grid)
    n_blue = sum(r.count(BLUE) for r in grid)
    if n_red - n_blue not in (0, 1):
        raise UnreachablePosition(f"piece counts red={n_red} blue={n_blue}")

    total = n_red + n_blue
    targets = [[grid[r][c] for r in range(ROWS)] for c in range(COLS)]
    col_totals = [sum(1 for v in targets[c] if v != EMPTY) for c in range(COLS)]

    # Depth-first search over column push orders. Placement row and colour
    # are forced per column, so the state is just the height tuple; prune
    # states that complete a line before the last piece.
    dead = set()

    def search(heights, cells, ply, order):
        if ply == total:
            return order
        key = tuple(heights)
        if key in dead:
            return None
        colour = RED if ply % 2 == 0 else BLUE
        for col in range(COLS):
            h = heights[col]
            if h >= col_totals[col] or targets[col][h] != colour:
                continue
            cells[h][col] = colour
            if ply == total - 1 or not _win_at(cells, h, col):
                heights[col] += 1
                found = search(heights, cells, ply + 1, order + [col])
                heights[col] -= 1
                if found is not None:
                    cells[h][col] = EMPTY
                    return found
            cells[h][col] = EMPTY
        dead.add(key)
        return None

    order = search([0] * COLS, [[EMPTY] * COLS for _ in range(ROWS)], 0, [])
    if order is None:
        raise UnreachablePosition("no legal move sequence reaches this position")
    board = new_board()
    for col in order:
        board = apply_move(board, col)
    assert board.cells == grid
    return board


def replay(columns: Iterable[int]) -> BoardState:
    """Apply a column sequence from the empty board."""
    board = new_board()
    for col in columns:
        board = apply_move(board, int(col))
    return board


@lru_cache(maxsize=1)
def all_lines() -> tuple:
    """The 69 possible four-in-a-row cell quadruples."""
    lines = []
    for row in range(ROWS):
        for col in range(COLS):
            for dr, dc in _DIRECTIONS:
                end_r, end_c = row + 3 * dr, col + 3 * dc
                if 0 <= end_r < ROWS and 0 <= end_c < COLS:
                    lines.append(tuple((row + i * dr, col + i * dc) for i in range(4)))
    return tuple(lines)
