"""Per-agent multi-objective reward: patrol term plus battery terms.

All statistics over idleness (mean, max) are taken over vertex cells only;
stations and obstacles carry pinned sentinel values that would skew them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import EnvState, Status, StepOutcome
from .errors import BatteryOutOfRange, NegativeIdleness, NoVertices
from .gridmap import GridMap, Loc

# Battery-threshold terms are penalty magnitudes; flip to +1 for the literal reading.
SIGN = -1.0


@dataclass(frozen=True)
class RewardParams:
    c_norm: float = 150.0
    c_b: float = 50.0
    c_Rp: float = 0.5
    c_Rd: float = 50.0
    c_recharge: float = 1.0
    c_patrol: float = 25.0
    b_l: float = 0.1

    def __post_init__(self):
        scales = (self.c_b, self.c_Rp, self.c_Rd, self.c_recharge, self.c_patrol)
        if min(scales) < 0 or self.c_norm <= 0 or not 0 < self.b_l < 1:
            raise ValueError("invalid reward parameters")


@dataclass(frozen=True)
class RewardBreakdown:
    r_p: float
    r_b1: float
    r_b2: float

    @property
    def total(self) -> float:
        return self.r_p + self.r_b1 + self.r_b2


def normalize_idleness(i, c_norm: float):
    """``1 - exp(-i / c_norm)``; accepts scalars or arrays."""
    arr = np.asarray(i, dtype=np.float64)
    if np.any(arr < 0):
        raise NegativeIdleness("idleness must be >= 0")
    out = -np.expm1(-arr / c_norm)
    return float(out) if out.ndim == 0 else out


def patrol_reward_base(idleness: np.ndarray, c_norm: float, vertex_mask: np.ndarray) -> float:
    """``(2 - mean f(i) - max f(i)) / 2`` over vertex cells."""
    vals = idleness[vertex_mask]
    if vals.size == 0:
        raise NoVertices("map has no vertex cells")
    f = -np.expm1(-vals / c_norm)
    return float((2.0 - f.mean() - f.max()) / 2.0)


def counterfactual_idleness(
    idleness: np.ndarray,
    pre_reset: np.ndarray,
    prev_loc: Loc,
    new_loc: Loc,
    gmap: GridMap,
    co_occupied: bool,
) -> np.ndarray:
    """Post-step idleness had the agent stayed at ``prev_loc`` instead of moving."""
    cf = idleness.copy()
    if prev_loc == new_loc:
        return cf
    if not co_occupied and gmap.vertex_mask[new_loc]:
        cf[new_loc] = pre_reset[new_loc]
    if gmap.vertex_mask[prev_loc]:
        cf[prev_loc] = 0.0
    return cf


def difference_reward(
    idleness: np.ndarray,
    pre_reset: np.ndarray,
    prev_loc: Loc,
    new_loc: Loc,
    gmap: GridMap,
    c_norm: float,
    co_occupied: bool = False,
) -> float:
    """Global patrol reward minus its value with this agent frozen in place."""
    if prev_loc == new_loc:
        return 0.0
    g = patrol_reward_base(idleness, c_norm, gmap.vertex_mask)
    cf = counterfactual_idleness(idleness, pre_reset, prev_loc, new_loc, gmap, co_occupied)
    return g - patrol_reward_base(cf, c_norm, gmap.vertex_mask)


def patrol_reward(base: float, diff: float, params: RewardParams) -> float:
    return base * params.c_Rp + diff * params.c_Rd


def battery_failure_penalty(ran_out: bool, c_b: float) -> float:
    return -c_b if ran_out else 0.0


def recharge_term(b_k: float, b_l: float) -> float:
    """V-shaped cost of recharging at battery ``b_k``; zero exactly at ``b_l``."""
    if b_k <= b_l:
        return 1.0 - b_k / b_l
    return (b_k - b_l) / (1.0 - b_l)


def low_battery_term(b_k: float, b_l: float) -> float:
    return b_l - b_k if b_k <= b_l else 0.0


def battery_threshold_penalty(
    b_k: float, b_l: float, recharged: bool, c_recharge: float, c_patrol: float
) -> float:
    """Signed threshold term as it enters the total (``SIGN`` times the magnitude)."""
    if not 0.0 <= b_k <= 1.0:
        raise BatteryOutOfRange(f"battery {b_k} outside [0, 1]")
    magnitude = c_patrol * low_battery_term(b_k, b_l)
    if recharged:
        magnitude += c_recharge * recharge_term(b_k, b_l)
    return SIGN * magnitude


def total_reward(
    base: float,
    diff: float,
    battery: float,
    ran_out: bool,
    recharged: bool,
    params: RewardParams,
) -> RewardBreakdown:
    return RewardBreakdown(
        r_p=patrol_reward(base, diff, params),
        r_b1=battery_failure_penalty(ran_out, params.c_b),
        r_b2=battery_threshold_penalty(
            battery, params.b_l, recharged, params.c_recharge, params.c_patrol
        ),
    )


def step_rewards(state: EnvState, outcome: StepOutcome, params: RewardParams) -> dict[int, RewardBreakdown]:
    """Rewards for every agent that acted in the step that produced ``outcome``."""
    gmap = state.map
    idle = state.idleness
    base = patrol_reward_base(idle, params.c_norm, gmap.vertex_mask)
    occupancy: dict[Loc, int] = {}
    for a in state.agents:
        if a.status is not Status.FAILED:
            occupancy[a.loc] = occupancy.get(a.loc, 0) + 1
    failures = set(outcome.battery_failures)
    recharges = set(outcome.intentional_recharges)
    out = {}
    for agent_id in outcome.acted:
        agent = state.agent(agent_id)
        prev = outcome.prev_locs[agent_id]
        new = agent.loc
        ran_out = agent_id in failures
        own = 0 if ran_out else 1
        co_occupied = occupancy.get(new, 0) - own > 0
        if prev == new:
            diff = 0.0
        else:
            cf = counterfactual_idleness(idle, outcome.pre_reset, prev, new, gmap, co_occupied)
            diff = base - patrol_reward_base(cf, params.c_norm, gmap.vertex_mask)
        out[agent_id] = total_reward(
            base, diff, agent.battery, ran_out, agent_id in recharges, params
        )
    return out


def recharge_curve(b_l: float, n: int = 101) -> tuple[np.ndarray, np.ndarray]:
    """Sampled recharge cost over battery levels in [0, 1], for plotting."""
    xs = np.linspace(0.0, 1.0, n)
    return xs, np.array([recharge_term(x, b_l) for x in xs])
