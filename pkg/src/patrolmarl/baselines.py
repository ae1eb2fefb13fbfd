"""Conscientious Reactive patrolling with shortest-path recharging, and the
individual-learner training variant."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .environment import EnvState, Status, shared_idleness
from .gridmap import Action, GridMap, Loc, apply_action, nearest_station, station_distance


@dataclass
class CRState:
    """Per-agent mode record: patrolling, or heading home along ``path``."""

    returning: bool = False
    path: list[Action] = field(default_factory=list)
    expected: Loc | None = None  # where the last path action should have led


def cr_critical_point(gmap: GridMap, loc: Loc, b_l: float, b_max: float, margin: float = 5.0) -> float:
    """Battery fraction at which the agent must head for the nearest station."""
    return b_l + (station_distance(gmap, loc) + margin) / b_max


def patrol_choice(gmap: GridMap, idleness: np.ndarray, loc: Loc, rng: np.random.Generator) -> Action:
    """Move to the stalest neighbour; stations are only used as a last resort."""
    options = gmap.neighbors(loc)
    vertices = [(a, n) for a, n in options if not gmap.is_station(n)]
    if vertices:
        options = vertices
    best = max(idleness[n] for _, n in options)
    ties = [a for a, n in options if idleness[n] == best]
    return ties[int(rng.integers(len(ties)))] if len(ties) > 1 else ties[0]


def cr_action(gmap: GridMap, idleness: np.ndarray, loc: Loc, battery: float, rng: np.random.Generator,
              mode: CRState, b_l: float, b_max: float, margin: float = 5.0) -> Action:
    """One CR decision; ``mode`` is updated in place."""
    if not mode.returning and battery <= cr_critical_point(gmap, loc, b_l, b_max, margin):
        mode.returning = True
        mode.path = []
        mode.expected = None
    if mode.returning:
        if mode.expected is not None and mode.expected != loc:
            mode.path = []  # displaced by the dynamics
        if not mode.path:
            _, mode.path = nearest_station(gmap, loc)
        if mode.path:
            action = mode.path.pop(0)
            mode.expected = apply_action(loc, action)
            return action
        # sitting on a station: step off so the next move can land on it
        mode.expected = None
    return patrol_choice(gmap, idleness, loc, rng)


class CRTeam:
    """CR controller for all agents of one episode."""

    def __init__(self, b_l: float, b_max: float, margin: float = 5.0):
        self.b_l = b_l
        self.b_max = b_max
        self.margin = margin
        self.modes: dict[int, CRState] = {}

    def act(self, state: EnvState, agent_id: int, rng: np.random.Generator,
            idleness: np.ndarray | None = None) -> Action:
        agent = state.agent(agent_id)
        mode = self.modes.get(agent_id)
        if mode is None or agent.battery >= 1.0 and mode.returning:
            mode = self.modes[agent_id] = CRState()
        idle = shared_idleness(state) if idleness is None else idleness
        return cr_action(state.map, idle, agent.loc, agent.battery, rng, mode,
                         self.b_l, self.b_max, self.margin)

    def forget(self, state: EnvState) -> None:
        """Drop modes of agents that are swapping or failed."""
        for a in state.agents:
            if a.status is not Status.PATROLLING:
                self.modes.pop(a.id, None)


def individual_learner_config(config, homogeneous: bool = False):
    """Training variant with one actor per agent and no experience sharing.

    Episode plan: one single-agent episode per actor, then random subsets of
    sizes 2, 3 and 4, then one episode with every agent.
    """
    if homogeneous:
        return config
    n = config.max_agents
    plan = (1,) * n + tuple(range(2, n)) + (n,)
    return dataclasses.replace(config, homogeneous=False, episode_plan=plan)
