"""Hazard-World-Grid: a small seeded gridworld with goal objects and hazard terrain.

The agent collects ``ball``, ``box`` and ``key`` (rewards 1, 2, 3, decaying
linearly over the episode) while lava, water and grass tiles lie around.
Which hazard is forbidden is set per episode; the ground-truth cost computed
here is meant for evaluation and for the oracle baseline only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Cell(enum.IntEnum):
    EMPTY = 0
    LAVA = 1
    WATER = 2
    GRASS = 3
    BALL = 4
    BOX = 5
    KEY = 6
    WALL = 7


N_CELL_TYPES = len(Cell)
HAZARDS = (Cell.LAVA, Cell.WATER, Cell.GRASS)
GOALS = (Cell.BALL, Cell.BOX, Cell.KEY)
GOAL_REWARD = {Cell.BALL: 1.0, Cell.BOX: 2.0, Cell.KEY: 3.0}
HAZARD_NAMES = {"lava": Cell.LAVA, "water": Cell.WATER, "grass": Cell.GRASS}


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


N_ACTIONS = len(Action)
_MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
    Action.STAY: (0, 0),
}


class Event(str, enum.Enum):
    ENTERED_LAVA = "entered-lava"
    ENTERED_WATER = "entered-water"
    ENTERED_GRASS = "entered-grass"
    PICKED_BALL = "picked-ball"
    PICKED_BOX = "picked-box"
    PICKED_KEY = "picked-key"
    MOVED = "moved"
    BUMPED_WALL = "bumped-wall"


_CELL_EVENT = {
    Cell.EMPTY: Event.MOVED,
    Cell.LAVA: Event.ENTERED_LAVA,
    Cell.WATER: Event.ENTERED_WATER,
    Cell.GRASS: Event.ENTERED_GRASS,
    Cell.BALL: Event.PICKED_BALL,
    Cell.BOX: Event.PICKED_BOX,
    Cell.KEY: Event.PICKED_KEY,
}
HAZARD_EVENT = {h: _CELL_EVENT[h] for h in HAZARDS}


class LayoutError(ValueError):
    """Raised when a grid cannot be generated or parsed."""


@dataclass(frozen=True)
class GridConfig:
    width: int = 12
    height: int = 12
    layout: str = "random"
    max_steps: int = 300
    seed: int = 0
    hazard_density: float = 0.1
    view_size: int = 7

    def __post_init__(self):
        if self.width < 5 or self.height < 5:
            raise ValueError(f"grid must be at least 5x5, got {self.width}x{self.height}")
        if self.layout not in ("random", "longpath"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 <= self.hazard_density <= 0.3:
            raise ValueError("hazard_density must lie in [0, 0.3]")
        if self.view_size < 1 or self.view_size % 2 == 0:
            raise ValueError("view_size must be a positive odd number")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def with_seed(self, seed: int) -> "GridConfig":
        return GridConfig(self.width, self.height, self.layout, self.max_steps,
                          seed, self.hazard_density, self.view_size)


@dataclass
class GridState:
    config: GridConfig
    cells: np.ndarray
    start: tuple[int, int]
    agent_pos: tuple[int, int]
    collected: set = field(default_factory=set)
    t: int = 0
    active_constraint: str | None = None
    prohibited: Cell | None = None
    done: bool = False
    _padded: np.ndarray | None = field(default=None, repr=False)

    def copy(self) -> "GridState":
        return GridState(self.config, self.cells.copy(), self.start, self.agent_pos,
                         set(self.collected), self.t, self.active_constraint,
                         self.prohibited, self.done)

    def set_constraint(self, constraint_id: str | None, prohibited) -> None:
        self.active_constraint = constraint_id
        self.prohibited = None if prohibited is None else to_hazard(prohibited)

    def count(self, cell: Cell) -> int:
        return int(np.count_nonzero(self.cells == cell))


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    oracle_cost: int
    done: bool
    event: Event


def to_hazard(value) -> Cell:
    if isinstance(value, Cell):
        if value not in HAZARDS:
            raise ValueError(f"{value!r} is not a hazard")
        return value
    try:
        return HAZARD_NAMES[str(value).lower()]
    except KeyError:
        raise ValueError(f"unknown hazard {value!r}") from None


def decayed_reward(base: float, t: int, max_steps: int) -> float:
    """Goal reward after linear decay: full at t=0, a tenth of it at t=max_steps."""
    if not 0 <= t <= max_steps:
        raise ValueError(f"t={t} outside [0, {max_steps}]")
    return base * (1.0 - 0.9 * t / max_steps)


def hazard_count(config: GridConfig) -> int:
    """Tiles per hazard type on the random layout.

    Available cells exclude the start and the three goal cells; the count is
    ``floor(density * available + 0.5)``.
    """
    available = config.width * config.height - 1 - len(GOALS)
    return int(np.floor(config.hazard_density * available + 0.5))


def build_grid(config: GridConfig) -> GridState:
    if config.layout == "random":
        cells, start = _random_layout(config)
    else:
        cells, start = _longpath_layout(config)
    return GridState(config=config, cells=cells, start=start, agent_pos=start)


def _random_layout(config: GridConfig):
    rng = np.random.default_rng(config.seed)
    n_cells = config.width * config.height
    n_haz = hazard_count(config)
    needed = 1 + len(GOALS) + n_haz * len(HAZARDS)
    if needed > n_cells:
        raise LayoutError(f"cannot place {needed} objects on {n_cells} cells")
    order = rng.permutation(n_cells)
    flat = np.full(n_cells, Cell.EMPTY, dtype=np.int8)
    start_idx = int(order[0])
    for i, goal in enumerate(GOALS, start=1):
        flat[order[i]] = goal
    pos = 1 + len(GOALS)
    for hazard in HAZARDS:
        flat[order[pos:pos + n_haz]] = hazard
        pos += n_haz
    cells = flat.reshape(config.height, config.width)
    return cells, divmod(start_idx, config.width)


def serpentine_path(height: int, width: int) -> list[tuple[int, int]]:
    """Boustrophedon path: full even rows joined by one cell on alternating ends."""
    path = []
    rows = list(range(0, height, 2))
    for i, r in enumerate(rows):
        cols = range(width) if i % 2 == 0 else range(width - 1, -1, -1)
        path.extend((r, c) for c in cols)
        if r + 2 < height:
            path.append((r + 1, width - 1 if i % 2 == 0 else 0))
    return path


def _longpath_layout(config: GridConfig):
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    transpose = h == w and bool(rng.integers(2))
    flip_rows, flip_cols = bool(rng.integers(2)), bool(rng.integers(2))
    path = serpentine_path(h, w)
    if len(path) < 1 + len(GOALS):
        raise LayoutError("path too short for the goal objects")
    cells = np.full((h, w), Cell.LAVA, dtype=np.int8)

    def place(r, c):
        if transpose:
            r, c = c, r
        if flip_rows:
            r = h - 1 - r
        if flip_cols:
            c = w - 1 - c
        return r, c

    path = [place(r, c) for r, c in path]
    for rc in path:
        cells[rc] = Cell.EMPTY
    for rc, goal in zip(path[-len(GOALS):], GOALS):
        cells[rc] = goal
    return cells, path[0]


def longpath_route(state: GridState) -> list[tuple[int, int]]:
    """Walk the safe path of a longpath grid starting from the state's start cell."""
    route = [state.start]
    seen = {state.start}
    h, w = state.cells.shape
    while True:
        r, c = route[-1]
        nxt = [(r + dr, c + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
               if 0 <= r + dr < h and 0 <= c + dc < w and (r + dr, c + dc) not in seen
               and state.cells[r + dr, c + dc] not in (Cell.LAVA, Cell.WALL)]
        if not nxt:
            return route
        if len(nxt) > 1:
            raise LayoutError("safe path branches")
        route.append(nxt[0])
        seen.add(nxt[0])


def action_towards(src: tuple[int, int], dst: tuple[int, int]) -> Action:
    delta = (dst[0] - src[0], dst[1] - src[1])
    for action, move in _MOVES.items():
        if move == delta:
            return action
    raise ValueError(f"{dst} is not adjacent to {src}")


def _padded(state: GridState) -> np.ndarray:
    if state._padded is None:
        pad = state.config.view_size // 2
        state._padded = np.pad(state.cells, pad, constant_values=Cell.WALL)
    return state._padded


_EYE = np.eye(N_CELL_TYPES)


def observation_size(config: GridConfig) -> int:
    return config.view_size ** 2 * N_CELL_TYPES + 3 + len(GOALS)


def observe(state: GridState) -> np.ndarray:
    """Egocentric one-hot window, normalized position, step fraction, goal flags."""
    k = state.config.view_size
    r, c = state.agent_pos
    window = _padded(state)[r:r + k, c:c + k]
    h, w = state.cells.shape
    extra = [r / (h - 1), c / (w - 1), state.t / state.config.max_steps]
    extra.extend(1.0 if g in state.collected else 0.0 for g in GOALS)
    return np.concatenate([_EYE[window.ravel()].ravel(), extra])


def step(state: GridState, action) -> StepResult:
    """Advance the state in place by one action.

    Walls and the grid border block movement. ``STAY`` re-contacts the
    current tile, so standing on a hazard keeps counting as a violation.
    """
    if state.done:
        raise RuntimeError("step() called on a finished episode")
    action = Action(action)
    dr, dc = _MOVES[action]
    r, c = state.agent_pos[0] + dr, state.agent_pos[1] + dc
    h, w = state.cells.shape
    reward = 0.0
    if not (0 <= r < h and 0 <= c < w) or state.cells[r, c] == Cell.WALL:
        event = Event.BUMPED_WALL
    else:
        state.agent_pos = (r, c)
        cell = Cell(int(state.cells[r, c]))
        event = _CELL_EVENT[cell]
        if cell in GOAL_REWARD:
            reward = decayed_reward(GOAL_REWARD[cell], state.t, state.config.max_steps)
            state.collected.add(cell)
            state.cells[r, c] = Cell.EMPTY
            state._padded = None
    cost = int(state.prohibited is not None and event == HAZARD_EVENT[state.prohibited])
    state.t += 1
    state.done = len(state.collected) == len(GOALS) or state.t >= state.config.max_steps
    return StepResult(observe(state), reward, cost, state.done, event)


class HazardWorld:
    """Resettable environment wrapper around :func:`build_grid` and :func:`step`."""

    def __init__(self, config: GridConfig, template: GridState | None = None):
        self.config = config
        self._template = build_grid(config) if template is None else template
        self.state: GridState | None = None

    @property
    def observation_size(self) -> int:
        return observation_size(self.config)

    def reset(self, constraint_id: str | None = None, prohibited=None) -> np.ndarray:
        self.state = self._template.copy()
        self.state.set_constraint(constraint_id, prohibited)
        return observe(self.state)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        return step(self.state, action)


# --- plain-text layouts -------------------------------------------------------

_CHAR = {Cell.EMPTY: ".", Cell.LAVA: "L", Cell.WATER: "W", Cell.GRASS: "G",
         Cell.BALL: "b", Cell.BOX: "x", Cell.KEY: "k", Cell.WALL: "#"}
_FROM_CHAR = {v: k for k, v in _CHAR.items()}


def to_text(state: GridState) -> str:
    rows = []
    for r, row in enumerate(state.cells):
        chars = [_CHAR[Cell(int(v))] for v in row]
        if r == state.agent_pos[0]:
            chars[state.agent_pos[1]] = "@"
        rows.append("".join(chars))
    return "\n".join(rows) + "\n"


def from_text(text: str, config: GridConfig | None = None) -> GridState:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or len({len(ln) for ln in lines}) != 1:
        raise LayoutError("layout rows must be non-empty and equally long")
    h, w = len(lines), len(lines[0])
    cells = np.zeros((h, w), dtype=np.int8)
    start = None
    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch == "@":
                if start is not None:
                    raise LayoutError("more than one agent start")
                start = (r, c)
            elif ch in _FROM_CHAR:
                cells[r, c] = _FROM_CHAR[ch]
            else:
                raise LayoutError(f"unknown layout character {ch!r}")
    if start is None:
        raise LayoutError("layout has no agent start '@'")
    for goal in GOALS:
        if np.count_nonzero(cells == goal) != 1:
            raise LayoutError(f"layout must hold exactly one {goal.name.lower()}")
    if config is None:
        config = GridConfig(width=w, height=h)
    elif (config.width, config.height) != (w, h):
        raise LayoutError("layout size does not match config")
    return GridState(config=config, cells=cells, start=start, agent_pos=start)
