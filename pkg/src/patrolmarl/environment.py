"""Discrete-time stochastic patrolling world.

State lives in an :class:`EnvState` that the functions in this module update
in place (and also return, so calls chain).  Rewards are deliberately not
computed here; see :mod:`patrolmarl.rewards`.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AgentUnavailable,
    AlreadyFailed,
    CapacityExceeded,
    InvalidAction,
    MissingAction,
    TooManyAgents,
    UnknownAgent,
)
from .gridmap import MOVES, GridMap, Loc, valid_actions

# battery at or below this counts as exhausted; absorbs float drift of 1/b_max steps
BATTERY_EPS = 1e-9


@dataclass(frozen=True)
class EnvConfig:
    b_max: float = 550.0
    b_swap_range: tuple[int, int] = (80, 150)
    p_dyn_range: tuple[float, float] = (0.0, 0.05)
    drain_extra_max: float = 0.05
    idle_jitter: float = 0.05
    b_l: float = 0.1
    max_agents: int = 5
    c_norm: float = 150.0
    idle_cap_factor: float = 10.0

    def __post_init__(self):
        lo, hi = self.p_dyn_range
        if self.b_max <= 0:
            raise ValueError("b_max must be positive")
        if not (0 <= lo <= hi <= 1):
            raise ValueError("p_dyn_range must lie in [0, 1]")
        if not (0 < self.b_l < 1):
            raise ValueError("b_l must lie in (0, 1)")
        if not (0 < self.b_swap_range[0] <= self.b_swap_range[1]):
            raise ValueError("b_swap_range must be positive and ordered")
        if self.drain_extra_max < 0 or self.idle_jitter < 0 or self.idle_jitter >= 1:
            raise ValueError("drain_extra_max >= 0 and 0 <= idle_jitter < 1 required")
        if self.max_agents < 1:
            raise ValueError("max_agents must be >= 1")

    @property
    def idle_cap(self) -> float:
        """Finite stand-in for the unvisited (+inf) idleness."""
        return self.idle_cap_factor * self.c_norm

    @classmethod
    def deterministic(cls, **kw) -> "EnvConfig":
        """All stochastic ranges collapsed to zero width."""
        kw.setdefault("p_dyn_range", (0.0, 0.0))
        kw.setdefault("drain_extra_max", 0.0)
        kw.setdefault("idle_jitter", 0.0)
        return cls(**kw)


class Status(enum.Enum):
    PATROLLING = "patrolling"
    SWAPPING = "swapping"
    FAILED = "failed"


@dataclass
class AgentState:
    id: int
    loc: Loc
    battery: float
    status: Status = Status.PATROLLING
    swap_remaining: int = 0

    @property
    def active(self) -> bool:
        return self.status is not Status.FAILED

    @property
    def acting(self) -> bool:
        return self.status is Status.PATROLLING


@dataclass
class EnvState:
    map: GridMap
    config: EnvConfig
    idleness: np.ndarray
    agents: list[AgentState]
    rng: np.random.Generator
    time: int = 0
    clock: float = 0.0  # elapsed timesteps including duration jitter
    next_id: int = 0

    def agent(self, agent_id: int) -> AgentState:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise UnknownAgent(agent_id)

    def acting_agents(self) -> list[AgentState]:
        return [a for a in self.agents if a.status is Status.PATROLLING]

    def active_agents(self) -> list[AgentState]:
        return [a for a in self.agents if a.status is not Status.FAILED]

    def copy(self) -> "EnvState":
        return copy.deepcopy(self)


@dataclass
class StepOutcome:
    duration: float
    intentional_recharges: list[int] = field(default_factory=list)
    battery_failures: list[int] = field(default_factory=list)
    perturbed: list[int] = field(default_factory=list)
    acted: list[int] = field(default_factory=list)
    prev_locs: dict[int, Loc] = field(default_factory=dict)
    recharge_battery: dict[int, float] = field(default_factory=dict)
    redeployed: list[int] = field(default_factory=list)
    # vertex idleness after the per-step increase, before visited cells were zeroed
    pre_reset: np.ndarray | None = None


def _initial_idleness(gmap: GridMap, cfg: EnvConfig) -> np.ndarray:
    idle = np.where(gmap.vertex_mask, cfg.idle_cap, 0.0)
    idle[gmap.obstacle_mask] = -1.0
    return idle


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def reset(gmap: GridMap, config: EnvConfig, n_agents: int, seed) -> EnvState:
    if n_agents < 0 or n_agents > config.max_agents:
        raise TooManyAgents(f"{n_agents} agents requested, max {config.max_agents}")
    rng = make_rng(seed)
    free = gmap.free_cells()
    agents = []
    for i in range(n_agents):
        loc = free[int(rng.integers(len(free)))]
        battery = float(rng.uniform(config.b_l, 1.0))
        agents.append(AgentState(id=i, loc=loc, battery=battery))
    return EnvState(
        map=gmap,
        config=config,
        idleness=_initial_idleness(gmap, config),
        agents=agents,
        rng=rng,
        next_id=n_agents,
    )


def _move_target(gmap: GridMap, loc: Loc, action: int, perturbed: bool, rng) -> Loc:
    if not perturbed:
        dr, dc = MOVES[action]
        return (loc[0] + dr, loc[1] + dc)
    # displaced to a uniformly chosen neighbour, or held in place
    options = [nxt for _, nxt in gmap.neighbors(loc)] + [loc]
    return options[int(rng.integers(len(options)))]


def step(state: EnvState, actions: dict[int, int], rng=None) -> tuple[EnvState, StepOutcome]:
    """Advance one step.  ``rng`` overrides the state's own stream when given."""
    cfg = state.config
    gmap = state.map
    rng = state.rng if rng is None else rng
    acting = state.acting_agents()
    acting_ids = {a.id for a in acting}
    extra = set(actions) - acting_ids
    if extra:
        raise InvalidAction(f"actions given for non-acting agents {sorted(extra)}")
    missing = acting_ids - set(actions)
    if missing:
        raise MissingAction(f"no action for agents {sorted(missing)}")
    for a in acting:
        act = int(actions[a.id])
        if not 0 <= act < 4 or gmap._action_table[a.loc][act] == 0:
            raise InvalidAction(f"agent {a.id}: action {act} invalid at {a.loc}")

    # existing swaps progress before this step's new landings are registered
    swapping = [a for a in state.agents if a.status is Status.SWAPPING]
    outcome = StepOutcome(duration=1.0)

    # (a) movement
    lo, hi = cfg.p_dyn_range
    landed: list[AgentState] = []
    for a in acting:
        p = rng.uniform(lo, hi) if hi > lo else lo
        perturbed = bool(rng.random() < p)
        outcome.prev_locs[a.id] = a.loc
        outcome.acted.append(a.id)
        target = _move_target(gmap, a.loc, int(actions[a.id]), perturbed, rng)
        if perturbed:
            outcome.perturbed.append(a.id)
        elif gmap.is_station(target):
            landed.append(a)
        a.loc = target

    # (b) step duration
    u = rng.uniform(-cfg.idle_jitter, cfg.idle_jitter) if cfg.idle_jitter > 0 else 0.0
    duration = 1.0 + u
    outcome.duration = duration

    # (c) battery drain and (g) exhaustion
    for a in acting:
        e = rng.uniform(0.0, cfg.drain_extra_max) if cfg.drain_extra_max > 0 else 0.0
        a.battery = max(0.0, a.battery - duration * (1.0 + e) / cfg.b_max)
        if a.battery <= BATTERY_EPS:
            a.battery = 0.0
            a.status = Status.FAILED
            outcome.battery_failures.append(a.id)

    # (d) idleness
    if not state.idleness.flags.c_contiguous:
        state.idleness = np.ascontiguousarray(state.idleness)
    idle = state.idleness
    flat = idle.reshape(-1)  # a view, so writes land in ``idle``
    vidx = gmap.vertex_index
    flat[vidx] = np.minimum(flat[vidx] + duration, cfg.idle_cap)
    outcome.pre_reset = idle.copy()
    for a in state.agents:
        if a.status is not Status.FAILED:
            idle[a.loc] = 0.0
    flat[gmap._flat["station"]] = 0.0
    flat[gmap._flat["obstacle"]] = -1.0

    # (f) running swaps count down
    for a in swapping:
        a.swap_remaining -= 1
        if a.swap_remaining <= 0:
            a.swap_remaining = 0
            a.status = Status.PATROLLING
            a.battery = 1.0
            outcome.redeployed.append(a.id)

    # (e) intentional landings start a hot swap
    lo_s, hi_s = cfg.b_swap_range
    for a in landed:
        if a.status is Status.FAILED:
            continue
        outcome.intentional_recharges.append(a.id)
        outcome.recharge_battery[a.id] = a.battery
        a.status = Status.SWAPPING
        a.swap_remaining = int(rng.integers(lo_s, hi_s + 1))

    state.time += 1
    state.clock += duration
    return state, outcome


def fail_agent(state: EnvState, agent_id: int) -> EnvState:
    agent = state.agent(agent_id)
    if agent.status is Status.FAILED:
        raise AlreadyFailed(agent_id)
    agent.status = Status.FAILED
    agent.swap_remaining = 0
    return state


def add_agent(state: EnvState) -> tuple[EnvState, int]:
    if len(state.active_agents()) >= state.config.max_agents:
        raise CapacityExceeded(f"already {state.config.max_agents} active agents")
    new_id = state.next_id
    state.next_id += 1
    state.agents.append(AgentState(id=new_id, loc=min(state.map.stations), battery=1.0))
    return state, new_id


def normalized_idleness(idleness: np.ndarray, c_norm: float, gmap: GridMap) -> np.ndarray:
    """Map idleness through ``1 - exp(-i / c_norm)``; obstacles stay -1."""
    out = 1.0 - np.exp(-np.clip(idleness, 0.0, None) / c_norm)
    out[gmap.obstacle_mask] = -1.0
    return out


@dataclass
class ActorObservation:
    map_channel: np.ndarray
    idleness: np.ndarray
    battery: float
    location: np.ndarray  # normalised (row, col)
    mask: np.ndarray


@dataclass
class CriticObservation:
    map_channel: np.ndarray
    idleness: np.ndarray
    batteries: np.ndarray
    locations: np.ndarray  # flattened normalised (row, col) pairs


def _norm_loc(gmap: GridMap, loc: Loc) -> np.ndarray:
    return np.array(
        [loc[0] / max(gmap.rows - 1, 1), loc[1] / max(gmap.cols - 1, 1)], dtype=np.float64
    )


def shared_idleness(state: EnvState) -> np.ndarray:
    """Raw idleness with every cell held by a non-failed agent set to 0."""
    idle = state.idleness.copy()
    for a in state.agents:
        if a.status is not Status.FAILED:
            idle[a.loc] = 0.0
    return idle


def observe_actor(state: EnvState, agent_id: int) -> ActorObservation:
    agent = state.agent(agent_id)
    if agent.status is not Status.PATROLLING:
        raise AgentUnavailable(f"agent {agent_id} is {agent.status.value}")
    gmap = state.map
    return ActorObservation(
        map_channel=gmap.cells.astype(np.float64),
        idleness=normalized_idleness(shared_idleness(state), state.config.c_norm, gmap),
        battery=agent.battery,
        location=_norm_loc(gmap, agent.loc),
        mask=valid_actions(gmap, agent.loc),
    )


def observe_critic(state: EnvState, slots: int | None = None) -> CriticObservation:
    """Global view padded to ``slots`` agents (battery 1, first station location)."""
    gmap = state.map
    slots = state.config.max_agents if slots is None else slots
    patrolling = sorted(state.acting_agents(), key=lambda a: a.id)[:slots]
    batteries = np.ones(slots)
    locs = np.tile(_norm_loc(gmap, gmap.stations[0]), slots)
    for i, a in enumerate(patrolling):
        batteries[i] = a.battery
        locs[2 * i : 2 * i + 2] = _norm_loc(gmap, a.loc)
    return CriticObservation(
        map_channel=gmap.cells.astype(np.float64),
        idleness=normalized_idleness(shared_idleness(state), state.config.c_norm, gmap),
        batteries=batteries,
        locations=locs,
    )
