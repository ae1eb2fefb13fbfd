"""Homogeneous multi-agent PPO: collection, swap-gap repair, advantages,
critic targets and clipped updates."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .environment import EnvConfig, reset
from .errors import EmptyBatch, LengthMismatch
from .gridmap import GridMap
from .policy import PolicySet
from .rewards import RewardParams
from .rollout import Episode, PolicyController, TransitionRecord, run_lockstep

Trajectories = dict[int, list[TransitionRecord]]


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    lam: float = 0.95
    clip_eps: float = 0.15
    epochs: int = 3
    n_batches: int = 50
    entropy: ad.StepSchedule = ad.StepSchedule(0.04, 0.01, 500, 0.005)
    learning_rate: ad.StepSchedule = ad.StepSchedule(2e-4, 5e-5, 1000, 1e-5)
    episode_plan: tuple[int, ...] = (1, 1, 1, 1, 2, 3, 4, 5)
    horizon: int = 5000
    rounds: int = 3000
    max_agents: int = 5
    homogeneous: bool = True
    normalize_advantages: bool = True
    max_grad_norm: float | None = 0.5
    checkpoint_every: int = 100

    def __post_init__(self):
        if not (0 <= self.gamma < 1 and 0 <= self.lam < 1):
            raise ValueError("gamma and lambda must lie in [0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.epochs < 1 or self.n_batches < 1 or self.horizon < 1:
            raise ValueError("epochs, n_batches and horizon must be positive")
        if any(n < 1 or n > self.max_agents for n in self.episode_plan):
            raise ValueError(f"episode agent counts must lie in [1, {self.max_agents}]")

    def compressed(self, factor: int = 10) -> "TrainConfig":
        """Same schedules with their step intervals divided by ``factor``."""
        ent, lr = self.entropy, self.learning_rate
        return dataclasses.replace(
            self,
            entropy=dataclasses.replace(ent, every=max(1, ent.every // factor)),
            learning_rate=dataclasses.replace(lr, every=max(1, lr.every // factor)),
        )


# -- advantage and target computation --------------------------------------


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float,
                steps: Sequence[int] | None = None, bootstrap: float = 0.0) -> np.ndarray:
    """Generalized advantage estimates for one trajectory.

    When ``steps`` is given, a jump of ``d`` timeline steps between
    consecutive records discounts the next value by ``gamma**d`` and the
    carried advantage by ``(gamma*lam)**d``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise LengthMismatch(f"{r.size} rewards but {v.size} values")
    gaps = np.ones(r.size) if steps is None else np.diff(np.asarray(steps, dtype=np.float64), append=np.nan)
    if steps is not None and len(steps) != r.size:
        raise LengthMismatch(f"{r.size} rewards but {len(steps)} step indices")
    adv = np.zeros_like(r)
    carry = 0.0
    next_v = bootstrap
    for t in range(r.size - 1, -1, -1):
        d = 1.0 if t == r.size - 1 else gaps[t]
        delta = r[t] + gamma ** d * next_v - v[t]
        carry = delta + (gamma * lam) ** d * carry
        adv[t] = carry
        next_v = v[t]
    return adv


def discounted_returns(rewards: Sequence[float], steps: Sequence[int], gamma: float) -> np.ndarray:
    """Reward-to-go at each record, discounting by timeline distance."""
    out = np.zeros(len(rewards))
    acc, nxt = 0.0, None
    for i in range(len(rewards) - 1, -1, -1):
        if nxt is not None:
            acc *= gamma ** (nxt - steps[i])
        acc += rewards[i]
        out[i] = acc
        nxt = steps[i]
    return out


def compute_v_targ_prime(trajectories: Trajectories, gamma: float, length: int) -> np.ndarray:
    """Per-step critic target: mean over agents with a record at that step of
    their discounted reward-to-go.  NaN where no agent has a record."""
    total = np.zeros(length)
    count = np.zeros(length)
    for recs in trajectories.values():
        if not recs:
            continue
        steps = [r.step for r in recs]
        g = discounted_returns([r.reward for r in recs], steps, gamma)
        np.add.at(total, steps, g)
        np.add.at(count, steps, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def reconstruct_swap_gaps(trajectories: Trajectories, length: int | None = None) -> Trajectories:
    """Fill each agent's missing steps with copies of another agent's records.

    A gap is any step between the agent's first record and the end of the
    timeline that the agent has no record for.  The donor at each step is the
    lowest-id agent holding its own record there; with no donor the step stays
    empty.
    """
    own = {aid: {r.step: r for r in recs if not r.filled} for aid, recs in trajectories.items()}
    if length is None:
        length = 1 + max((s for recs in own.values() for s in recs), default=-1)
    donors: dict[int, TransitionRecord] = {}
    for aid in sorted(own):
        for s, rec in own[aid].items():
            donors.setdefault(s, rec)
    out: Trajectories = {}
    for aid, recs in own.items():
        if not recs:
            out[aid] = []
            continue
        first = min(recs)
        merged = []
        for s in range(first, length):
            if s in recs:
                merged.append(recs[s])
            elif s in donors:
                merged.append(dataclasses.replace(donors[s], filled=True, agent_id=aid))
        out[aid] = merged
    return out


# -- round batches ----------------------------------------------------------


@dataclass
class RoundBatch:
    actor_grids: np.ndarray
    actor_extras: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    old_probs: np.ndarray
    advantages: np.ndarray
    slots: np.ndarray
    critic_grids: np.ndarray
    critic_extras: np.ndarray
    targets: np.ndarray

    @property
    def n_actor(self) -> int:
        return int(self.actions.size)

    @property
    def n_critic(self) -> int:
        return int(self.targets.size)


def build_batch(episodes: list[Episode], config: TrainConfig) -> RoundBatch:
    """Reconstruct gaps, compute advantages and targets, and stack samples.

    Reconstructed records bridge advantages and targets but never enter the
    actor loss, since their actions were not taken by the agent they fill.
    """
    a_rows: list[TransitionRecord] = []
    advs: list[float] = []
    c_grids, c_extras, targets = [], [], []
    for ep in episodes:
        trajs = reconstruct_swap_gaps(ep.trajectories, ep.length)
        for aid in sorted(trajs):
            recs = trajs[aid]
            if not recs:
                continue
            adv = compute_gae([r.reward for r in recs], [r.value for r in recs],
                              config.gamma, config.lam, [r.step for r in recs])
            for r, a in zip(recs, adv):
                if not r.filled:
                    a_rows.append(r)
                    advs.append(a)
        vt = compute_v_targ_prime(trajs, config.gamma, ep.length)
        for s in sorted(ep.critic_obs):
            if s < ep.length and np.isfinite(vt[s]):
                g, x = ep.critic_obs[s]
                c_grids.append(g)
                c_extras.append(x)
                targets.append(vt[s])
    if not a_rows or not targets:
        raise EmptyBatch("round produced no trainable records")
    return RoundBatch(
        actor_grids=np.stack([r.actor_grid for r in a_rows]),
        actor_extras=np.stack([r.actor_extra for r in a_rows]),
        masks=np.stack([r.mask for r in a_rows]),
        actions=np.array([r.action for r in a_rows], dtype=np.int64),
        old_probs=np.array([r.prob for r in a_rows]),
        advantages=np.array(advs),
        slots=np.array([r.actor for r in a_rows], dtype=np.int64),
        critic_grids=np.stack(c_grids),
        critic_extras=np.stack(c_extras),
        targets=np.array(targets),
    )


# -- losses and update ------------------------------------------------------


def clipped_surrogate(logp: ad.Tensor, old_probs: np.ndarray, adv: np.ndarray, clip_eps: float) -> ad.Tensor:
    """Mean of min(ratio*A, clip(ratio)*A) per record."""
    ratio = ad.exp(logp - np.log(old_probs))
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return ad.minimum(unclipped, clipped).mean()


def actor_loss(policy: PolicySet, slot: int, grids, extras, masks, actions, old_probs, adv,
               clip_eps: float, entropy_coef: float) -> tuple[ad.Tensor, float]:
    logits = policy.actor_logits(grids, extras, slot)
    logp_all = ad.masked_log_softmax(logits, masks)
    probs = ad.masked_softmax(logits, masks)
    logp = ad.take(logp_all, actions)
    entropy = -(probs * logp_all).sum(axis=1).mean()
    objective = clipped_surrogate(logp, old_probs, adv, clip_eps)
    return -(objective + entropy * entropy_coef), entropy.item()


def critic_loss(policy: PolicySet, grids, extras, targets) -> ad.Tensor:
    err = policy.critic_values(grids, extras) - targets
    return (err * err).mean()


@dataclass
class Optimizers:
    actors: list[ad.OptimizerState]
    critic: ad.OptimizerState

    @classmethod
    def for_policy(cls, policy: PolicySet) -> "Optimizers":
        return cls([ad.OptimizerState() for _ in policy.actors], ad.OptimizerState())


@dataclass(frozen=True)
class UpdateReport:
    actor_loss: float
    critic_loss: float
    entropy: float


def ppo_update(policy: PolicySet, batch: RoundBatch, config: TrainConfig, opts: Optimizers,
               round_idx: int, rng: np.random.Generator) -> UpdateReport:
    """Clipped PPO epochs over shuffled minibatches; actor and critic are
    optimised separately."""
    if batch.n_actor == 0 or batch.n_critic == 0:
        raise EmptyBatch("empty batch")
    lr = config.learning_rate(round_idx)
    ent_coef = config.entropy(round_idx)
    adv = batch.advantages.copy()
    if config.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    a_losses, c_losses, ents = [], [], []
    for _ in range(config.epochs):
        a_parts = np.array_split(rng.permutation(batch.n_actor), min(config.n_batches, batch.n_actor))
        c_parts = np.array_split(rng.permutation(batch.n_critic), min(config.n_batches, batch.n_critic))
        for b in range(max(len(a_parts), len(c_parts))):
            if b < len(a_parts):
                idx = a_parts[b]
                for slot in np.unique(batch.slots[idx]):
                    sel = idx[batch.slots[idx] == slot]
                    params = policy.actors[slot]
                    ad.zero_grads(params.values())
                    loss, ent = actor_loss(policy, int(slot), batch.actor_grids[sel], batch.actor_extras[sel],
                                           batch.masks[sel], batch.actions[sel], batch.old_probs[sel],
                                           adv[sel], config.clip_eps, ent_coef)
                    loss.backward()
                    ad.optimizer_step(params, opts.actors[slot], lr, config.max_grad_norm)
                    a_losses.append(loss.item())
                    ents.append(ent)
            if b < len(c_parts):
                idx = c_parts[b]
                ad.zero_grads(policy.critic.values())
                loss = critic_loss(policy, batch.critic_grids[idx], batch.critic_extras[idx], batch.targets[idx])
                loss.backward()
                ad.optimizer_step(policy.critic, opts.critic, lr, config.max_grad_norm)
                c_losses.append(loss.item())
    return UpdateReport(float(np.mean(a_losses)), float(np.mean(c_losses)), float(np.mean(ents)))


# -- collection and the training loop --------------------------------------


def episode_seed(master: int, round_idx: int, episode_idx: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(round_idx, episode_idx))


def actor_assignment(config: TrainConfig, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Actor slot of every agent in every episode of one round.

    Homogeneous teams use slot 0 throughout.  Individual learners get one
    single-agent episode per actor, in order, and random subsets otherwise.
    """
    if config.homogeneous:
        return [(0,) * n for n in config.episode_plan]
    out, solo = [], 0
    for n in config.episode_plan:
        if n == 1:
            out.append((solo % config.max_agents,))
            solo += 1
        else:
            out.append(tuple(sorted(int(i) for i in rng.choice(config.max_agents, n, replace=False))))
    return out


def collect_round(policy: PolicySet, gmap: GridMap, env_config: EnvConfig, reward_params: RewardParams,
                  config: TrainConfig, seed: int, round_idx: int) -> list[Episode]:
    """Run the round's episodes in lockstep and return them with trajectories."""
    plan_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(round_idx, 1 << 20)))
    slots = actor_assignment(config, plan_rng)
    episodes = []
    for i, agent_slots in enumerate(slots):
        env_ss, act_ss = episode_seed(seed, round_idx, i).spawn(2)
        state = reset(gmap, env_config, len(agent_slots), env_ss)
        ep = Episode(state=state, act_rng=np.random.default_rng(act_ss), horizon=config.horizon, index=i,
                     actor_map={a.id: s for a, s in zip(state.agents, agent_slots)})
        episodes.append(ep)
    return run_lockstep(episodes, PolicyController(policy), rewards=reward_params, critic=policy,
                        record=True, terminate_on_failure=True)


LOG_COLUMNS = ("round", "agent_counts", "reward_per_agent", "battery_at_recharge", "recharges",
               "failures", "actor_loss", "critic_loss", "entropy", "learning_rate", "entropy_coef", "steps")


@dataclass
class TrainResult:
    policy: PolicySet
    log: list[dict] = field(default_factory=list)
    recharge_events: list[tuple[int, int, int, float]] = field(default_factory=list)  # round, episode, step, battery
    checkpoints: list[Path] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow(row)
        return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def train(gmap: GridMap, env_config: EnvConfig, reward_params: RewardParams, config: TrainConfig,
          seed: int = 0, out_dir: str | Path | None = None, progress=None) -> TrainResult:
    """Alternate collection and PPO updates for ``config.rounds`` rounds."""
    n_actors = 1 if config.homogeneous else config.max_agents
    policy = PolicySet.create(gmap.shape, config.max_agents, seed=np.random.SeedSequence(seed, spawn_key=(1 << 30,)),
                              n_actors=n_actors)
    opts = Optimizers.for_policy(policy)
    update_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1 << 31,)))
    result = TrainResult(policy)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoints += _save(policy, out, 0, config)

    for rnd in range(config.rounds):
        episodes = collect_round(policy, gmap, env_config, reward_params, config, seed, rnd)
        batch = build_batch(episodes, config)
        report = ppo_update(policy, batch, config, opts, rnd, update_rng)

        returns = [r for ep in episodes for r in ep.returns.values()]
        rech = []
        for ep in episodes:
            for t, _, b in ep.trace.recharges:
                rech.append(b)
                result.recharge_events.append((rnd, ep.index, t, b))
        result.log.append({
            "round": rnd,
            "agent_counts": " ".join(str(len(ep.state.agents)) for ep in episodes),
            "reward_per_agent": _fmt(np.mean(returns)),
            "battery_at_recharge": _fmt(np.mean(rech) if rech else 1.0),
            "recharges": len(rech),
            "failures": sum(len(ep.trace.failures) for ep in episodes),
            "actor_loss": _fmt(report.actor_loss),
            "critic_loss": _fmt(report.critic_loss),
            "entropy": _fmt(report.entropy),
            "learning_rate": _fmt(config.learning_rate(rnd)),
            "entropy_coef": _fmt(config.entropy(rnd)),
            "steps": sum(ep.length for ep in episodes),
        })
        if progress is not None:
            progress(result.log[-1])
        if out is not None and config.checkpoint_every > 0 and (rnd + 1) % config.checkpoint_every == 0:
            result.checkpoints += _save(policy, out, rnd + 1, config)

    if out is not None:
        if config.rounds and (config.checkpoint_every <= 0 or config.rounds % config.checkpoint_every):
            result.checkpoints += _save(policy, out, config.rounds, config)
        (out / "train_log.csv").write_text(result.log_csv())
        lines = ["round,episode,step,battery"] + [f"{r},{e},{t},{_fmt(b)}" for r, e, t, b in result.recharge_events]
        (out / "recharges.csv").write_text("\n".join(lines) + "\n")
    return result


def _save(policy: PolicySet, out: Path, rnd: int, config: TrainConfig) -> list[Path]:
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    if policy.homogeneous:
        path = ckdir / f"round{rnd:05d}.ckpt"
        policy.save(path)
        return [path]
    paths = []
    for i in range(len(policy.actors)):
        path = ckdir / f"round{rnd:05d}_actor{i}.ckpt"
        policy.save(path, actors=[i])
        paths.append(path)
    return paths


def recharge_tail(events: list[tuple[int, int, int, float]], n: int = 50) -> float:
    """Mean battery over the last ``n`` recharge events (NaN if none)."""
    tail = [b for *_, b in events[-n:]]
    return float(np.mean(tail)) if tail else math.nan
