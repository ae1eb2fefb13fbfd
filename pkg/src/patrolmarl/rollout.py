"""Lockstep episode runner shared by training and every evaluation command.

Several episodes advance together so that all acting agents across them can
be pushed through the actor network as one batch.  Each episode owns its own
environment and action random streams, so results do not depend on which
other episodes happen to share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .baselines import CRTeam
from .environment import EnvState, Status, observe_actor, observe_critic, step
from .metrics import EpisodeTrace
from .policy import PolicySet, encode_actor, encode_critic, sample_action
from .rewards import RewardParams, step_rewards


@dataclass
class TransitionRecord:
    step: int
    actor_grid: np.ndarray
    actor_extra: np.ndarray
    mask: np.ndarray
    action: int
    prob: float
    reward: float
    value: float
    agent_id: int
    actor: int = 0
    filled: bool = False  # copied from another agent to bridge a swap gap


@dataclass
class Episode:
    state: EnvState
    act_rng: np.random.Generator
    horizon: int
    index: int = 0
    actor_map: dict[int, int] = field(default_factory=dict)
    cr: CRTeam | None = None
    trace: EpisodeTrace = field(default_factory=EpisodeTrace)
    trajectories: dict[int, list[TransitionRecord]] = field(default_factory=dict)
    critic_obs: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    values: dict[int, float] = field(default_factory=dict)
    returns: dict[int, float] = field(default_factory=dict)
    length: int = 0
    failed: bool = False
    done: bool = False
    hook: Callable[["Episode", int], None] | None = None


class PolicyController:
    """Samples actions from the actor(s) of a :class:`PolicySet`."""

    def __init__(self, policy: PolicySet, greedy: bool = False):
        self.policy = policy
        self.greedy = greedy

    def act(self, items: list[tuple[Episode, int]]) -> list[tuple[int, float, tuple]]:
        encoded = []
        for ep, agent_id in items:
            grid, extra = encode_actor(observe_actor(ep.state, agent_id))
            encoded.append((grid, extra, extra[3:7]))
        slots = [ep.actor_map.get(agent_id, 0) if not self.policy.homogeneous else 0
                 for ep, agent_id in items]
        probs = np.empty((len(items), 4))
        for slot in sorted(set(slots)):
            rows = [i for i, s in enumerate(slots) if s == slot]
            grids = np.stack([encoded[i][0] for i in rows])
            extras = np.stack([encoded[i][1] for i in rows])
            masks = np.stack([encoded[i][2] for i in rows])
            probs[rows] = self.policy.actor_probs(grids, extras, masks, slot).data
        out = []
        for i, (ep, _) in enumerate(items):
            if self.greedy:
                a = int(np.argmax(probs[i]))
                p = float(probs[i, a])
            else:
                a, p = sample_action(probs[i], ep.act_rng)
            out.append((a, p, encoded[i] + (slots[i],)))
        return out


class CRController:
    def act(self, items: list[tuple[Episode, int]]) -> list[tuple[int, float, tuple]]:
        out = []
        shared = {}
        for ep, agent_id in items:
            key = id(ep)
            if key not in shared:
                from .environment import shared_idleness
                shared[key] = shared_idleness(ep.state)
            a = ep.cr.act(ep.state, agent_id, ep.act_rng, shared[key])
            out.append((int(a), 1.0, None))
        return out


def run_lockstep(
    episodes: list[Episode],
    controller,
    *,
    rewards: RewardParams | None = None,
    critic: PolicySet | None = None,
    record: bool = False,
    terminate_on_failure: bool = False,
) -> list[Episode]:
    """Advance all episodes to their horizon (or termination)."""
    while True:
        live = [ep for ep in episodes if not ep.done]
        if not live:
            break
        items: list[tuple[Episode, int]] = []
        for ep in live:
            if ep.hook is not None:
                ep.hook(ep, ep.length)
            for a in ep.state.agents:
                if a.status is Status.PATROLLING:
                    items.append((ep, a.id))

        if record and critic is not None:
            need = [ep for ep in live if any(e is ep for e, _ in items)]
            if need:
                enc = [encode_critic(observe_critic(ep.state, critic.max_agents)) for ep in need]
                vals = critic.critic_values(np.stack([g for g, _ in enc]),
                                            np.stack([x for _, x in enc])).data
                for ep, (g, x), v in zip(need, enc, vals):
                    ep.critic_obs[ep.length] = (g, x)
                    ep.values[ep.length] = float(v)

        decisions = controller.act(items) if items else []
        per_ep: dict[int, dict[int, tuple]] = {}
        for (ep, agent_id), dec in zip(items, decisions):
            per_ep.setdefault(id(ep), {})[agent_id] = dec

        for ep in live:
            mine = per_ep.get(id(ep), {})
            t = ep.length
            state, outcome = step(ep.state, {k: v[0] for k, v in mine.items()})
            ep.length += 1
            ep.trace.observe(state, outcome)
            if ep.cr is not None:
                ep.cr.forget(state)
            if rewards is not None and outcome.acted:
                rb = step_rewards(state, outcome, rewards)
                for agent_id, br in rb.items():
                    ep.returns[agent_id] = ep.returns.get(agent_id, 0.0) + br.total
                    if record:
                        action, prob, enc = mine[agent_id]
                        grid, extra, mask, slot = enc
                        ep.trajectories.setdefault(agent_id, []).append(TransitionRecord(
                            step=t, actor_grid=grid, actor_extra=extra, mask=mask, action=action,
                            prob=prob, reward=br.total, value=ep.values.get(t, 0.0),
                            agent_id=agent_id, actor=slot))
            if outcome.battery_failures:
                ep.failed = True
                if terminate_on_failure:
                    ep.done = True
            if ep.length >= ep.horizon:
                ep.done = True
    return episodes
