"""Deterministic multi-agent gridworld engine.

Cooperative door/key/switch maps on a square grid. All transitions are
deterministic; the only stochasticity is the seeded map generation. The
team receives a single sparse reward when every agent stands on a goal
cell, scaled by completion time.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

# Cell kinds (channel 0 of a cell triple / observation tensor).
KIND_UNSEEN = 0
KIND_EMPTY = 1
KIND_WALL = 2
KIND_DOOR = 3
KIND_KEY = 4
KIND_SWITCH = 5
KIND_GOAL = 6
KIND_AGENT = 7

KIND_NAMES = ("unseen", "empty", "wall", "door", "key", "switch", "goal", "agent")

# Colors (channel 1).
COLOR_RED = 0
COLOR_GREEN = 1
COLOR_BLUE = 2
COLOR_PURPLE = 3
COLOR_YELLOW = 4
COLOR_GREY = 5

# Door states (channel 2 for doors).
DOOR_OPEN = 0
DOOR_CLOSED = 1
DOOR_LOCKED = 2

# Switch states (channel 2 for switches).
SWITCH_OFF = 0
SWITCH_ON = 1

# Directions and their unit vectors (x grows right, y grows down).
DIR_NORTH = 0
DIR_EAST = 1
DIR_SOUTH = 2
DIR_WEST = 3
DIR_VEC = ((0, -1), (1, 0), (0, 1), (-1, 0))

# Discrete per-agent actions.
ACT_LEFT = 0
ACT_RIGHT = 1
ACT_FORWARD = 2
ACT_PICKUP = 3
ACT_DROP = 4
ACT_TOGGLE = 5
ACT_NOOP = 6
NUM_ACTIONS = 7

# Map suite: kind -> (required agent count, allowed grid sizes).
MAP_SUITE = {
    "DoorKeyB": (2, (6, 8)),
    "DoorSwitchA": (2, (8, 12, 16)),
    "DoorSwitchB": (2, (8, 10, 16)),
    "DoorSwitchC": (3, (8, 12, 16)),
    "DoorSwitchD": (3, (10, 12, 14)),
}

_GEN_ATTEMPTS = 64
_EXACT_SOLVE_CAP = 200_000


class ConfigurationError(ValueError):
    """Invalid environment configuration (map kind / size / agent count)."""


class GenerationError(RuntimeError):
    """Map generation could not produce a solvable layout."""


class UsageError(RuntimeError):
    """API misuse, e.g. stepping a terminated episode."""


class ReplayError(ValueError):
    """Malformed replay file."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class CellObject(NamedTuple):
    kind: int
    color: int = 0
    state: int = 0


EMPTY_CELL = CellObject(KIND_EMPTY, 0, 0)
WALL_CELL = CellObject(KIND_WALL, 0, 0)


@dataclass(frozen=True)
class EnvConfig:
    map_kind: str
    grid_size: int
    num_agents: int
    seed: int = 0
    horizon: int = 0  # 0 -> 4 * grid_size**2
    view_size: int = 7

    def __post_init__(self):
        if self.map_kind not in MAP_SUITE:
            raise ConfigurationError(f"unknown map kind {self.map_kind!r}")
        agents, sizes = MAP_SUITE[self.map_kind]
        if self.grid_size not in sizes:
            raise ConfigurationError(
                f"{self.map_kind} supports sizes {sizes}, got {self.grid_size}"
            )
        if self.num_agents != agents:
            raise ConfigurationError(
                f"{self.map_kind} requires {agents} agents, got {self.num_agents}"
            )
        if self.horizon == 0:
            object.__setattr__(self, "horizon", 4 * self.grid_size**2)
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.view_size < 3 or self.view_size % 2 == 0:
            raise ConfigurationError("view_size must be odd and >= 3")


@dataclass
class AgentState:
    agent_id: int
    pos: tuple[int, int]
    direction: int
    carrying: CellObject | None = None
    done: bool = False


@dataclass
class GridState:
    config: EnvConfig
    cells: np.ndarray  # (n, n, 3) int16, indexed [x, y]
    agents: list[AgentState]
    t: int = 0

    def copy(self) -> "GridState":
        return GridState(
            config=self.config,
            cells=self.cells.copy(),
            agents=[copy.copy(a) for a in self.agents],
            t=self.t,
        )

    def cell(self, x: int, y: int) -> CellObject:
        return CellObject(*(int(v) for v in self.cells[x, y]))

    def set_cell(self, x: int, y: int, obj: CellObject):
        self.cells[x, y] = obj

    def key(self) -> tuple:
        """Hashable snapshot for bit-identical comparisons."""
        return (
            self.cells.tobytes(),
            tuple((a.pos, a.direction, a.carrying, a.done) for a in self.agents),
            self.t,
        )


class StepOutcome(NamedTuple):
    done: np.ndarray  # (K,) bool, per-agent "on a goal"
    terminated: bool
    completed: bool
    reward: float


@dataclass(frozen=True)
class Observation:
    view: np.ndarray  # (v, v, 3) int16, egocentric, agent bottom-center facing up
    direction: int
    carrying_kind: int  # kind id of carried object, 0 when empty-handed


def team_reward(completed: bool, t: int, t_max: int) -> float:
    """Sparse team reward: 2 - t/t_max on completion, 0 otherwise."""
    if not 0 < t <= t_max:
        raise UsageError(f"t={t} outside (0, {t_max}]")
    if not completed:
        return 0.0
    return 2.0 - t / t_max


# ---------------------------------------------------------------------------
# Map generation


def _blank_grid(n: int) -> np.ndarray:
    cells = np.zeros((n, n, 3), dtype=np.int16)
    cells[:, :, 0] = KIND_EMPTY
    cells[[0, n - 1], :, 0] = KIND_WALL
    cells[:, [0, n - 1], 0] = KIND_WALL
    return cells


def _region(x0, x1, y0, y1):
    """All (x, y) with x in [x0, x1], y in [y0, y1], inclusive."""
    return [(x, y) for x in range(x0, x1 + 1) for y in range(y0, y1 + 1)]


def _sample_distinct(rng, cells_list, count):
    idx = rng.choice(len(cells_list), size=count, replace=False)
    return [cells_list[i] for i in idx]


def _walkable_kind(kind: int, state: int) -> bool:
    if kind in (KIND_EMPTY, KIND_GOAL):
        return True
    if kind == KIND_DOOR:
        return state == DOOR_OPEN
    return False


def _free_for_placement(cells, pos):
    return cells[pos[0], pos[1], 0] == KIND_EMPTY


def _place(cells, pos, obj: CellObject):
    cells[pos[0], pos[1]] = obj


def _connected_without(region_cells, blocked, required):
    """True if `required` cells lie in one 4-connected component of
    region_cells minus blocked."""
    free = set(region_cells) - set(blocked)
    required = [c for c in required if c in free]
    if not required:
        return True
    seen = {required[0]}
    stack = [required[0]]
    while stack:
        x, y = stack.pop()
        for dx, dy in DIR_VEC:
            nxt = (x + dx, y + dy)
            if nxt in free and nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return all(c in seen for c in required)


def _build_door_key_b(n, rng):
    cells = _blank_grid(n)
    xw = n // 2
    cells[xw, 1 : n - 1, 0] = KIND_WALL
    door_y = int(rng.integers(1, n - 1))
    _place(cells, (xw, door_y), CellObject(KIND_DOOR, COLOR_YELLOW, DOOR_LOCKED))
    left = _region(1, xw - 1, 1, n - 2)
    right = _region(xw + 1, n - 2, 1, n - 2)
    key_pos, a0 = _sample_distinct(rng, left, 2)
    a1, g0, g1 = _sample_distinct(rng, right, 3)
    _place(cells, key_pos, CellObject(KIND_KEY, COLOR_YELLOW, 0))
    _place(cells, g0, CellObject(KIND_GOAL, COLOR_GREEN, 0))
    _place(cells, g1, CellObject(KIND_GOAL, COLOR_GREEN, 0))
    # key must not disconnect the left chamber or block the door approach
    if not _connected_without(left, [key_pos], [a0, (xw - 1, door_y)]):
        return None
    agents = [(a0, int(rng.integers(4))), (a1, int(rng.integers(4)))]
    return cells, agents


def _build_door_switch_a(n, rng):
    cells = _blank_grid(n)
    xw = n // 2
    cells[xw, 1 : n - 1, 0] = KIND_WALL
    door_y = int(rng.integers(1, n - 1))
    _place(cells, (xw, door_y), CellObject(KIND_DOOR, COLOR_RED, DOOR_CLOSED))
    left = _region(1, xw - 1, 1, n - 2)
    right = _region(xw + 1, n - 2, 1, n - 2)
    sw, a0, a1 = _sample_distinct(rng, left, 3)
    g0, g1 = _sample_distinct(rng, right, 2)
    _place(cells, sw, CellObject(KIND_SWITCH, COLOR_RED, SWITCH_OFF))
    _place(cells, g0, CellObject(KIND_GOAL, COLOR_GREEN, 0))
    _place(cells, g1, CellObject(KIND_GOAL, COLOR_GREEN, 0))
    if not _connected_without(left, [sw], [a0, a1, (xw - 1, door_y)]):
        return None
    agents = [(a0, int(rng.integers(4))), (a1, int(rng.integers(4)))]
    return cells, agents


def _build_door_switch_b(n, rng):
    # Switch sits on the far side of the door: the agent already there must
    # open it for its teammate to transit.
    cells = _blank_grid(n)
    xw = n // 2
    cells[xw, 1 : n - 1, 0] = KIND_WALL
    door_y = int(rng.integers(1, n - 1))
    _place(cells, (xw, door_y), CellObject(KIND_DOOR, COLOR_RED, DOOR_CLOSED))
    left = _region(1, xw - 1, 1, n - 2)
    right = _region(xw + 1, n - 2, 1, n - 2)
    (a0,) = _sample_distinct(rng, left, 1)
    sw, a1, g0, g1 = _sample_distinct(rng, right, 4)
    _place(cells, sw, CellObject(KIND_SWITCH, COLOR_RED, SWITCH_OFF))
    _place(cells, g0, CellObject(KIND_GOAL, COLOR_GREEN, 0))
    _place(cells, g1, CellObject(KIND_GOAL, COLOR_GREEN, 0))
    if not _connected_without(right, [sw], [a1, g0, g1, (xw + 1, door_y)]):
        return None
    agents = [(a0, int(rng.integers(4))), (a1, int(rng.integers(4)))]
    return cells, agents


def _build_door_switch_c(n, rng):
    # Three chambers in sequence; each door is opened by a switch in the
    # chamber beyond it.
    cells = _blank_grid(n)
    if n == 8:
        x1, x2 = 2, 4
    else:
        x1, x2 = n // 3, 2 * n // 3
    cells[x1, 1 : n - 1, 0] = KIND_WALL
    cells[x2, 1 : n - 1, 0] = KIND_WALL
    d1y = int(rng.integers(1, n - 1))
    d2y = int(rng.integers(1, n - 1))
    _place(cells, (x1, d1y), CellObject(KIND_DOOR, COLOR_RED, DOOR_CLOSED))
    _place(cells, (x2, d2y), CellObject(KIND_DOOR, COLOR_GREEN, DOOR_CLOSED))
    left = _region(1, x1 - 1, 1, n - 2)
    mid = _region(x1 + 1, x2 - 1, 1, n - 2)
    right = _region(x2 + 1, n - 2, 1, n - 2)
    (a0,) = _sample_distinct(rng, left, 1)
    sw1, a1 = _sample_distinct(rng, mid, 2)
    sw2, a2, g0, g1, g2 = _sample_distinct(rng, right, 5)
    _place(cells, sw1, CellObject(KIND_SWITCH, COLOR_RED, SWITCH_OFF))
    _place(cells, sw2, CellObject(KIND_SWITCH, COLOR_GREEN, SWITCH_OFF))
    for g in (g0, g1, g2):
        _place(cells, g, CellObject(KIND_GOAL, COLOR_GREEN, 0))
    ok = _connected_without(mid, [sw1], [a1, (x1 + 1, d1y), (x2 - 1, d2y)])
    ok = ok and _connected_without(right, [sw2], [a2, g0, g1, g2, (x2 + 1, d2y)])
    if not ok:
        return None
    agents = [(a0, int(rng.integers(4))), (a1, int(rng.integers(4))), (a2, int(rng.integers(4)))]
    return cells, agents


def _build_door_switch_d(n, rng):
    # Two parallel corridors, each gated; the switch for each gate sits in
    # the other corridor, so the teams must unlock each other.
    cells = _blank_grid(n)
    yw = n // 2
    cells[1 : n - 1, yw, 0] = KIND_WALL
    xg = n // 2
    cells[xg, 1:yw, 0] = KIND_WALL
    cells[xg, yw + 1 : n - 1, 0] = KIND_WALL
    dty = int(rng.integers(1, yw))
    dby = int(rng.integers(yw + 1, n - 1))
    _place(cells, (xg, dty), CellObject(KIND_DOOR, COLOR_RED, DOOR_CLOSED))
    _place(cells, (xg, dby), CellObject(KIND_DOOR, COLOR_GREEN, DOOR_CLOSED))
    top_left = _region(1, xg - 1, 1, yw - 1)
    bot_left = _region(1, xg - 1, yw + 1, n - 2)
    top_right = _region(xg + 1, n - 2, 1, yw - 1)
    bot_right = _region(xg + 1, n - 2, yw + 1, n - 2)
    # green switch (bottom door) in the top corridor, red switch in the bottom
    sw_g, a0, a1 = _sample_distinct(rng, top_left, 3)
    sw_r, a2 = _sample_distinct(rng, bot_left, 2)
    g0, g1 = _sample_distinct(rng, top_right, 2)
    (g2,) = _sample_distinct(rng, bot_right, 1)
    _place(cells, sw_g, CellObject(KIND_SWITCH, COLOR_GREEN, SWITCH_OFF))
    _place(cells, sw_r, CellObject(KIND_SWITCH, COLOR_RED, SWITCH_OFF))
    for g in (g0, g1, g2):
        _place(cells, g, CellObject(KIND_GOAL, COLOR_GREEN, 0))
    ok = _connected_without(top_left, [sw_g], [a0, a1, (xg - 1, dty)])
    ok = ok and _connected_without(bot_left, [sw_r], [a2, (xg - 1, dby)])
    if not ok:
        return None
    agents = [(a0, int(rng.integers(4))), (a1, int(rng.integers(4))), (a2, int(rng.integers(4)))]
    return cells, agents


_BUILDERS = {
    "DoorKeyB": _build_door_key_b,
    "DoorSwitchA": _build_door_switch_a,
    "DoorSwitchB": _build_door_switch_b,
    "DoorSwitchC": _build_door_switch_c,
    "DoorSwitchD": _build_door_switch_d,
}


def generate_map(config: EnvConfig) -> GridState:
    """Build a solvable seeded initial state; same config -> same grid."""
    builder = _BUILDERS[config.map_kind]
    for attempt in range(_GEN_ATTEMPTS):
        ss = np.random.SeedSequence(
            entropy=config.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(attempt,)
        )
        rng = np.random.default_rng(ss)
        built = builder(config.grid_size, rng)
        if built is None:
            continue
        cells, agent_specs = built
        agents = [
            AgentState(agent_id=i, pos=pos, direction=d)
            for i, (pos, d) in enumerate(agent_specs)
        ]
        state = GridState(config=config, cells=cells, agents=agents, t=0)
        solvable = solvable_exact(state, max_states=_EXACT_SOLVE_CAP)
        if solvable is None:
            solvable = solvable_relaxed(state)
        if solvable:
            return state
    raise GenerationError(
        f"no solvable {config.map_kind}{config.grid_size} layout "
        f"within {_GEN_ATTEMPTS} attempts (seed {config.seed})"
    )


# ---------------------------------------------------------------------------
# Transition


def _passable(state: GridState, pos, occupied) -> bool:
    x, y = pos
    n = state.config.grid_size
    if not (0 <= x < n and 0 <= y < n):
        return False
    if pos in occupied:
        return False
    kind = state.cells[x, y, 0]
    return _walkable_kind(int(kind), int(state.cells[x, y, 2]))


def _toggle(state: GridState, agent: AgentState, target):
    x, y = target
    kind = int(state.cells[x, y, 0])
    color = int(state.cells[x, y, 1])
    cstate = int(state.cells[x, y, 2])
    if kind == KIND_SWITCH:
        state.cells[x, y, 2] = SWITCH_ON if cstate == SWITCH_OFF else SWITCH_OFF
        doors = (state.cells[:, :, 0] == KIND_DOOR) & (state.cells[:, :, 1] == color)
        ds = state.cells[:, :, 2]
        flip_open = doors & (ds == DOOR_CLOSED)
        flip_closed = doors & (ds == DOOR_OPEN)
        ds[flip_open] = DOOR_OPEN
        ds[flip_closed] = DOOR_CLOSED
    elif kind == KIND_DOOR:
        switch_colors = state.cells[state.cells[:, :, 0] == KIND_SWITCH, 1]
        if color in switch_colors:
            return  # switch-controlled doors ignore direct toggles
        if cstate == DOOR_LOCKED:
            if agent.carrying is not None and agent.carrying.color == color:
                state.cells[x, y, 2] = DOOR_OPEN
        elif cstate == DOOR_CLOSED:
            state.cells[x, y, 2] = DOOR_OPEN
        else:
            state.cells[x, y, 2] = DOOR_CLOSED


def step(state: GridState, joint_action) -> tuple[GridState, StepOutcome]:
    """Advance one tick. Simultaneous actions, fixed agent-index priority
    for movement conflicts; swaps are blocked; done agents act as noop."""
    cfg = state.config
    if len(joint_action) != cfg.num_agents:
        raise UsageError(
            f"expected {cfg.num_agents} actions, got {len(joint_action)}"
        )
    if state.t >= cfg.horizon or all(a.done for a in state.agents):
        raise UsageError("episode already terminated")

    nxt = state.copy()
    agents = nxt.agents
    positions = {a.pos for a in agents}

    # rotations first: they never conflict
    for a, act in zip(agents, joint_action):
        act = int(act)
        if a.done:
            continue
        if act == ACT_LEFT:
            a.direction = (a.direction - 1) % 4
        elif act == ACT_RIGHT:
            a.direction = (a.direction + 1) % 4

    intended = {}
    for a, act in zip(agents, joint_action):
        if int(act) == ACT_FORWARD and not a.done:
            dx, dy = DIR_VEC[a.direction]
            intended[a.agent_id] = (a.pos[0] + dx, a.pos[1] + dy)

    # swap attempts are mutually blocked
    blocked = set()
    for i, ti in intended.items():
        for j, tj in intended.items():
            if i < j and ti == agents[j].pos and tj == agents[i].pos:
                blocked.add(i)
                blocked.add(j)

    for a in agents:  # ascending agent_id: lower index wins contested cells
        target = intended.get(a.agent_id)
        if target is None or a.agent_id in blocked:
            continue
        if _passable(nxt, target, positions):
            positions.discard(a.pos)
            a.pos = target
            positions.add(target)

    for a, act in zip(agents, joint_action):
        act = int(act)
        if a.done or act in (ACT_LEFT, ACT_RIGHT, ACT_FORWARD, ACT_NOOP):
            continue
        dx, dy = DIR_VEC[a.direction]
        tx, ty = a.pos[0] + dx, a.pos[1] + dy
        if not (0 <= tx < cfg.grid_size and 0 <= ty < cfg.grid_size):
            continue
        if act == ACT_PICKUP:
            if a.carrying is None and nxt.cells[tx, ty, 0] == KIND_KEY:
                a.carrying = nxt.cell(tx, ty)
                nxt.set_cell(tx, ty, EMPTY_CELL)
        elif act == ACT_DROP:
            if a.carrying is not None and nxt.cells[tx, ty, 0] == KIND_EMPTY:
                if (tx, ty) not in positions:
                    nxt.set_cell(tx, ty, a.carrying)
                    a.carrying = None
        elif act == ACT_TOGGLE:
            _toggle(nxt, a, (tx, ty))

    for a in agents:
        if nxt.cells[a.pos[0], a.pos[1], 0] == KIND_GOAL:
            a.done = True

    nxt.t = state.t + 1
    done = np.array([a.done for a in agents], dtype=bool)
    completed = bool(done.all())
    terminated = completed or nxt.t >= cfg.horizon
    reward = team_reward(completed, nxt.t, cfg.horizon) if completed else 0.0
    return nxt, StepOutcome(done=done, terminated=terminated, completed=completed, reward=reward)


# ---------------------------------------------------------------------------
# Observation

_BLOCKS_SIGHT = {KIND_WALL: True}


def _blocks_sight(kind: int, cstate: int) -> bool:
    if kind == KIND_WALL:
        return True
    if kind == KIND_DOOR:
        return cstate != DOOR_OPEN
    return False


def _visibility_mask(view: np.ndarray) -> np.ndarray:
    """MiniGrid-style occlusion sweep from the agent cell at bottom-center.

    view is already rotated so the agent looks toward -y (row 0)."""
    v = view.shape[0]
    mask = np.zeros((v, v), dtype=bool)
    mask[v // 2, v - 1] = True
    opaque = np.zeros((v, v), dtype=bool)
    for i in range(v):
        for j in range(v):
            opaque[i, j] = _blocks_sight(int(view[i, j, 0]), int(view[i, j, 2]))
    for j in reversed(range(v)):
        for i in range(v - 1):
            if mask[i, j] and not opaque[i, j]:
                mask[i + 1, j] = True
                if j > 0:
                    mask[i + 1, j - 1] = True
                    mask[i, j - 1] = True
        for i in reversed(range(1, v)):
            if mask[i, j] and not opaque[i, j]:
                mask[i - 1, j] = True
                if j > 0:
                    mask[i - 1, j - 1] = True
                    mask[i, j - 1] = True
    return mask


def _view_extents(pos, direction, v):
    x, y = pos
    if direction == DIR_NORTH:
        return x - v // 2, y - v + 1
    if direction == DIR_EAST:
        return x, y - v // 2
    if direction == DIR_SOUTH:
        return x - v // 2, y
    return x - v + 1, y - v // 2


# rot90 turns applied to the sliced window so the agent faces row 0
_VIEW_ROT = {DIR_NORTH: 0, DIR_EAST: 3, DIR_SOUTH: 2, DIR_WEST: 1}


def observe(state: GridState, agent_id: int) -> Observation:
    """Egocentric partial view; pure function of the state."""
    cfg = state.config
    v = cfg.view_size
    me = state.agents[agent_id]
    top_x, top_y = _view_extents(me.pos, me.direction, v)

    n = cfg.grid_size
    view = np.full((v, v, 3), 0, dtype=np.int16)
    view[:, :, 0] = KIND_WALL
    x0, x1 = max(top_x, 0), min(top_x + v, n)
    y0, y1 = max(top_y, 0), min(top_y + v, n)
    if x0 < x1 and y0 < y1:
        view[x0 - top_x : x1 - top_x, y0 - top_y : y1 - top_y] = state.cells[x0:x1, y0:y1]

    for other in state.agents:
        if other.agent_id == agent_id:
            continue
        ox, oy = other.pos[0] - top_x, other.pos[1] - top_y
        if 0 <= ox < v and 0 <= oy < v:
            rel_dir = (other.direction - me.direction) % 4
            view[ox, oy] = (KIND_AGENT, other.agent_id, rel_dir)

    view = np.rot90(view, k=_VIEW_ROT[me.direction], axes=(0, 1)).copy()
    mask = _visibility_mask(view)
    view[~mask] = (KIND_UNSEEN, 0, 0)

    carrying = me.carrying.kind if me.carrying is not None else 0
    return Observation(view=view, direction=me.direction, carrying_kind=int(carrying))


# ---------------------------------------------------------------------------
# ASCII rendering

_RENDER_CHARS = {
    KIND_EMPTY: ".",
    KIND_WALL: "#",
    KIND_KEY: "K",
    KIND_SWITCH: "S",
    KIND_GOAL: "G",
}


def render_ascii(state: GridState) -> str:
    n = state.config.grid_size
    rows = []
    agent_at = {a.pos: a.agent_id for a in state.agents}
    for y in range(n):
        row = []
        for x in range(n):
            if (x, y) in agent_at:
                row.append(str(agent_at[(x, y)]))
                continue
            kind = int(state.cells[x, y, 0])
            if kind == KIND_DOOR:
                row.append("d" if state.cells[x, y, 2] == DOOR_OPEN else "D")
            else:
                row.append(_RENDER_CHARS.get(kind, "?"))
        rows.append("".join(row))
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# Replay files


def write_replay(path, config: EnvConfig, joint_actions) -> None:
    """Line format: header `map_kind,size,agents,seed,T_max`, then one line
    of comma-separated action ints per step."""
    with open(path, "w") as fh:
        fh.write(
            f"{config.map_kind},{config.grid_size},{config.num_agents},"
            f"{config.seed},{config.horizon}\n"
        )
        for joint in joint_actions:
            fh.write(",".join(str(int(a)) for a in joint) + "\n")


def read_replay(path) -> tuple[EnvConfig, list[tuple[int, ...]]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ReplayError("empty replay file", lineno=1)
    head = lines[0].split(",")
    if len(head) != 5:
        raise ReplayError("header must be map_kind,size,agents,seed,T_max", lineno=1)
    try:
        config = EnvConfig(
            map_kind=head[0],
            grid_size=int(head[1]),
            num_agents=int(head[2]),
            seed=int(head[3]),
            horizon=int(head[4]),
        )
    except (ValueError, ConfigurationError) as exc:
        raise ReplayError(str(exc), lineno=1) from exc
    actions = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != config.num_agents:
            raise ReplayError(
                f"expected {config.num_agents} actions, got {len(parts)}", lineno=lineno
            )
        try:
            joint = tuple(int(p) for p in parts)
        except ValueError as exc:
            raise ReplayError(f"non-integer action in {line!r}", lineno=lineno) from exc
        if any(not 0 <= a < NUM_ACTIONS for a in joint):
            raise ReplayError(f"action out of range in {line!r}", lineno=lineno)
        actions.append(joint)
    return config, actions


# ---------------------------------------------------------------------------
# Solvability

_ABSTRACT_MOVES = tuple(DIR_VEC)


def _door_positions(state: GridState):
    xs, ys = np.nonzero(state.cells[:, :, 0] == KIND_DOOR)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def solvable_exact(state: GridState, max_states: int = _EXACT_SOLVE_CAP):
    """Abstract cooperative search: one agent acts per round with moves,
    key pickups and toggles; directions are abstracted away. Returns True /
    False, or None when the state cap is hit (caller should fall back)."""
    cfg = state.config
    n = cfg.grid_size
    cells = state.cells
    doors = _door_positions(state)
    door_index = {p: i for i, p in enumerate(doors)}
    door_colors = [int(cells[x, y, 1]) for x, y in doors]
    switch_cells = {}
    key_cell = None
    goal_set = set()
    for x in range(n):
        for y in range(n):
            kind = int(cells[x, y, 0])
            if kind == KIND_SWITCH:
                switch_cells[(x, y)] = int(cells[x, y, 1])
            elif kind == KIND_KEY:
                key_cell = (x, y)
            elif kind == KIND_GOAL:
                goal_set.add((x, y))

    init_mask = 0
    for i, (x, y) in enumerate(doors):
        if cells[x, y, 2] == DOOR_OPEN:
            init_mask |= 1 << i
    start = (
        tuple(a.pos for a in state.agents),
        -2 if key_cell is not None else -1,  # -2 floor, -1 absent, k carried
        init_mask,
    )

    def passable(pos, mask, positions, key_on_floor):
        x, y = pos
        if not (0 <= x < n and 0 <= y < n) or pos in positions:
            return False
        if key_on_floor and pos == key_cell:
            return False
        kind = int(cells[x, y, 0])
        if kind in (KIND_EMPTY, KIND_GOAL, KIND_KEY):
            return True
        if kind == KIND_DOOR:
            return bool(mask & (1 << door_index[pos]))
        return False

    seen = {start}
    frontier = [start]
    steps = 0
    while frontier:
        nxt_frontier = []
        for positions, key_holder, mask in frontier:
            if all(p in goal_set for p in positions):
                return True
            pos_set = set(positions)
            for k, pos in enumerate(positions):
                if pos in goal_set:
                    continue  # frozen
                others = pos_set - {pos}
                candidates = []
                for dx, dy in _ABSTRACT_MOVES:
                    tgt = (pos[0] + dx, pos[1] + dy)
                    if passable(tgt, mask, others, key_holder == -2):
                        new_pos = positions[:k] + (tgt,) + positions[k + 1 :]
                        candidates.append((new_pos, key_holder, mask))
                    if key_holder == -2 and tgt == key_cell:
                        candidates.append((positions, k, mask))
                    if tgt in switch_cells:
                        color = switch_cells[tgt]
                        flip = 0
                        for i, c in enumerate(door_colors):
                            if c == color:
                                flip |= 1 << i
                        candidates.append((positions, key_holder, mask ^ flip))
                    if tgt in door_index and not mask & (1 << door_index[tgt]):
                        x, y = tgt
                        if (
                            cells[x, y, 2] == DOOR_LOCKED
                            and key_holder == k
                        ):
                            candidates.append(
                                (positions, key_holder, mask | (1 << door_index[tgt]))
                            )
                for cand in candidates:
                    if cand not in seen:
                        seen.add(cand)
                        if len(seen) > max_states:
                            return None
                        nxt_frontier.append(cand)
        frontier = nxt_frontier
        steps += 1
        if steps > 4 * n * n:
            return False
    return False


def solvable_relaxed(state: GridState) -> bool:
    """Cheap necessary check for large maps: doors become openable once
    their opener (key or same-color switch) is reachable; every agent must
    then reach a distinct goal. Ignores agent-body blocking."""
    cfg = state.config
    n = cfg.grid_size
    cells = state.cells
    doors = _door_positions(state)
    open_set = {
        p for p in doors if cells[p[0], p[1], 2] == DOOR_OPEN
    }

    def reach_from(srcs, open_doors):
        seen = set(srcs)
        stack = list(srcs)
        while stack:
            x, y = stack.pop()
            for dx, dy in DIR_VEC:
                nx_, ny_ = x + dx, y + dy
                if not (0 <= nx_ < n and 0 <= ny_ < n) or (nx_, ny_) in seen:
                    continue
                kind = int(cells[nx_, ny_, 0])
                ok = kind in (KIND_EMPTY, KIND_GOAL, KIND_KEY) or (
                    kind == KIND_DOOR and (nx_, ny_) in open_doors
                )
                if ok:
                    seen.add((nx_, ny_))
                    stack.append((nx_, ny_))
        return seen

    starts = [a.pos for a in state.agents]
    while True:
        reach = reach_from(starts, open_set)
        adjacent = set()
        for x, y in reach:
            for dx, dy in DIR_VEC:
                adjacent.add((x + dx, y + dy))
        progressed = False
        for p in doors:
            if p in open_set:
                continue
            x, y = p
            color = int(cells[x, y, 1])
            locked = cells[x, y, 2] == DOOR_LOCKED
            if locked:
                xs, ys = np.nonzero(
                    (cells[:, :, 0] == KIND_KEY) & (cells[:, :, 1] == color)
                )
                openers = {(int(a), int(b)) for a, b in zip(xs, ys)}
                openers |= {
                    a.pos for a in state.agents
                    if a.carrying is not None and a.carrying.color == color
                }
            else:
                xs, ys = np.nonzero(
                    (cells[:, :, 0] == KIND_SWITCH) & (cells[:, :, 1] == color)
                )
                openers = {(int(a), int(b)) for a, b in zip(xs, ys)}
            if any(o in adjacent or o in reach for o in openers):
                open_set.add(p)
                progressed = True
        if not progressed:
            break

    goals = [
        (x, y)
        for x in range(n)
        for y in range(n)
        if cells[x, y, 0] == KIND_GOAL
    ]
    per_agent = [reach_from([a.pos], open_set) | {a.pos} for a in state.agents]
    import itertools

    for assignment in itertools.permutations(range(len(goals)), len(per_agent)):
        if all(goals[g] in per_agent[i] for i, g in enumerate(assignment)):
            return True
    return False
