import dataclasses

import numpy as np
import pytest

from oracles import gae_oracle, vtarg_oracle

from patrolmarl import autodiff as ad
from patrolmarl.baselines import individual_learner_config
from patrolmarl.environment import EnvConfig, reset
from patrolmarl.errors import EmptyBatch, LengthMismatch
from patrolmarl.mappo import (
    Optimizers, RoundBatch, TrainConfig, actor_loss, build_batch, clipped_surrogate, collect_round,
    compute_gae, compute_v_targ_prime, critic_loss, discounted_returns, ppo_update,
    reconstruct_swap_gaps, train,
)
from patrolmarl.policy import PolicySet
from patrolmarl.rewards import RewardParams
from patrolmarl.rollout import Episode, TransitionRecord, run_lockstep


def rec(step, reward, value=0.0, agent=0):
    z = np.zeros(1)
    return TransitionRecord(step=step, actor_grid=z, actor_extra=z, mask=np.ones(4), action=0,
                            prob=0.5, reward=reward, value=value, agent_id=agent)


def test_gae_base_cases():
    assert compute_gae([1.0], [0.5], 0.9, 0.95, bootstrap=2.0)[0] == pytest.approx(1.0 + 0.9 * 2.0 - 0.5)
    r, v = [1.0, -2.0, 0.5], [0.3, 0.1, -0.4]
    a = compute_gae(r, v, 0.9, 0.0)
    np.testing.assert_allclose(a, [1 + 0.9 * 0.1 - 0.3, -2 + 0.9 * -0.4 - 0.1, 0.5 + 0.4])
    with pytest.raises(LengthMismatch):
        compute_gae([1.0, 2.0], [1.0], 0.9, 0.9)


@pytest.mark.parametrize("seed", range(100))
def test_gae_matches_double_sum(seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=20), rng.normal(size=20)
    steps = np.cumsum(rng.integers(1, 4, size=20))
    np.testing.assert_allclose(compute_gae(r, v, 0.95, 0.95), gae_oracle(r, v, list(range(20)), 0.95, 0.95),
                               atol=1e-10, rtol=0)
    np.testing.assert_allclose(compute_gae(r, v, 0.95, 0.9, steps), gae_oracle(r, v, steps, 0.95, 0.9),
                               atol=1e-10, rtol=0)


@pytest.mark.parametrize("seed", range(100))
def test_vtarg_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n_agents = int(rng.integers(2, 6))
    trajs = {}
    for k in range(n_agents):
        keep = sorted(rng.choice(20, size=int(rng.integers(5, 21)), replace=False))
        trajs[k] = [rec(int(s), float(rng.normal()), agent=k) for s in keep]
    got = compute_v_targ_prime(trajs, 0.95, 20)
    np.testing.assert_allclose(got, vtarg_oracle(trajs, 0.95, 20), atol=1e-10, rtol=0, equal_nan=True)


def test_vtarg_identical_agents_equals_single_return():
    r = [0.3, -1.0, 2.0, 0.5]
    trajs = {k: [rec(t, x, agent=k) for t, x in enumerate(r)] for k in range(3)}
    np.testing.assert_allclose(compute_v_targ_prime(trajs, 0.9, 4), discounted_returns(r, [0, 1, 2, 3], 0.9))


def worked_example():
    r = [float(2 ** t) for t in range(10)]  # distinct so every term is identifiable
    a = [rec(t, r[t], agent=0) for t in (0, 7, 8, 9)]
    b = [rec(t, r[t], agent=1) for t in (0, 1, 2, 9)]
    return r, {0: a, 1: b}


def test_swap_gap_worked_example():
    r, trajs = worked_example()
    fixed = reconstruct_swap_gaps(trajs, 10)
    expected = r[0] + r[1] + r[2] + r[7] + r[8] + r[9]
    for k in (0, 1):
        recs = fixed[k]
        assert [x.step for x in recs] == [0, 1, 2, 7, 8, 9]
        assert discounted_returns([x.reward for x in recs], [x.step for x in recs], 1.0)[0] == expected
    assert compute_v_targ_prime(fixed, 1.0, 10)[0] == expected
    assert [x.filled for x in fixed[0]] == [False, True, True, False, False, False]


def test_reconstruct_no_swaps_is_identity():
    trajs = {k: [rec(t, 1.0, agent=k) for t in range(5)] for k in range(2)}
    fixed = reconstruct_swap_gaps(trajs, 5)
    assert all(not x.filled for recs in fixed.values() for x in recs)
    assert [x.step for x in fixed[1]] == list(range(5))


def test_reconstruct_single_agent_keeps_gap():
    trajs = {0: [rec(t, 1.0) for t in (0, 1, 5, 6)]}
    assert [x.step for x in reconstruct_swap_gaps(trajs, 7)[0]] == [0, 1, 5, 6]


def test_reconstruct_lowest_id_donor():
    trajs = {0: [rec(0, 1.0, agent=0)], 1: [rec(t, 2.0, agent=1) for t in range(3)],
             2: [rec(t, 3.0, agent=2) for t in range(3)]}
    fixed = reconstruct_swap_gaps(trajs, 3)
    assert [x.reward for x in fixed[0]] == [1.0, 2.0, 2.0]


# -- losses -----------------------------------------------------------------

@pytest.mark.parametrize("ratio,adv,expected", [
    (1.3, 2.0, 2.3), (1.3, -2.0, -2.6), (0.5, 1.0, 0.5), (0.5, -1.0, -0.85), (1.0, 3.0, 3.0),
])
def test_clipped_surrogate_closed_form(ratio, adv, expected):
    old = 0.4
    logp = ad.Tensor(np.array([np.log(ratio * old)]), requires_grad=True)
    out = clipped_surrogate(logp, np.array([old]), np.array([adv]), 0.15)
    assert out.item() == pytest.approx(expected, abs=1e-12)
    out.backward()
    clipped = (ratio > 1.15 and adv > 0) or (ratio < 0.85 and adv < 0)
    assert logp.grad[0] == pytest.approx(0.0 if clipped else ratio * adv)


def _policy_batch(fig1, seed=0, n=12, n_actors=1):
    rng = np.random.default_rng(seed)
    p = PolicySet.create(fig1.shape, 2, seed=seed, n_actors=n_actors)
    grids = rng.normal(size=(n, 2, 6, 6))
    extras = rng.uniform(size=(n, 7))
    masks = np.ones((n, 4))
    return p, grids, extras, masks, rng


def test_ratio_one_objective_equals_mean_advantage(fig1):
    p, grids, extras, masks, rng = _policy_batch(fig1)
    probs = p.actor_probs(grids, extras, masks).data
    actions = rng.integers(0, 4, size=len(grids))
    old = probs[np.arange(len(grids)), actions]
    adv = rng.normal(size=len(grids))
    loss, _ = actor_loss(p, 0, grids, extras, masks, actions, old, adv, 0.15, 0.0)
    assert loss.item() == pytest.approx(-adv.mean(), abs=1e-12)


def test_zero_advantage_zero_gradient(fig1):
    p, grids, extras, masks, rng = _policy_batch(fig1)
    actions = rng.integers(0, 4, size=len(grids))
    loss, _ = actor_loss(p, 0, grids, extras, masks, actions, np.full(len(grids), 0.3),
                         np.zeros(len(grids)), 0.15, 0.0)
    loss.backward()
    assert all(np.all(t.grad == 0) for t in p.actors[0].values())
    assert all(t.grad is None for t in p.critic.values())


def test_huge_clip_equals_unclipped_gradient(fig1):
    p, grids, extras, masks, rng = _policy_batch(fig1)
    actions = rng.integers(0, 4, size=len(grids))
    old = rng.uniform(0.05, 0.9, size=len(grids))
    adv = rng.normal(size=len(grids))

    def grads(eps):
        ad.zero_grads(p.actors[0].values())
        if eps is None:
            logp = ad.take(ad.masked_log_softmax(p.actor_logits(grids, extras), masks), actions)
            (-(ad.exp(logp - np.log(old)) * adv).mean()).backward()
        else:
            actor_loss(p, 0, grids, extras, masks, actions, old, adv, eps, 0.0)[0].backward()
        return {k: t.grad.copy() for k, t in p.actors[0].items()}

    g1, g2 = grads(1e12), grads(None)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-14)


def test_critic_loss_does_not_touch_actor(fig1):
    p, grids, extras, masks, rng = _policy_batch(fig1)
    critic_loss(p, grids, rng.uniform(size=(len(grids), 6)), rng.normal(size=len(grids))).backward()
    assert all(t.grad is None for t in p.actors[0].values())


def test_advantage_scaling_keeps_gradient_sign(fig1):
    p, grids, extras, masks, rng = _policy_batch(fig1)
    actions = rng.integers(0, 4, size=len(grids))
    probs = p.actor_probs(grids, extras, masks).data
    old = probs[np.arange(len(grids)), actions]
    adv = rng.normal(size=len(grids))
    out = []
    for scale in (1.0, 7.5):
        logp = ad.Tensor(np.log(old), requires_grad=True)
        clipped_surrogate(logp, old, adv * scale, 0.15).backward()
        out.append(np.sign(logp.grad))
    np.testing.assert_array_equal(out[0], out[1])


def _toy_batch(fig1, n, slots):
    rng = np.random.default_rng(0)
    return RoundBatch(
        actor_grids=rng.normal(size=(n, 2, 6, 6)), actor_extras=rng.uniform(size=(n, 7)),
        masks=np.ones((n, 4)), actions=rng.integers(0, 4, n), old_probs=np.full(n, 0.25),
        advantages=rng.normal(size=n), slots=np.asarray(slots),
        critic_grids=rng.normal(size=(n, 2, 6, 6)), critic_extras=rng.uniform(size=(n, 6)),
        targets=rng.normal(size=n))


def test_individual_actor_isolation(fig1):
    p = PolicySet.create(fig1.shape, 2, seed=0, n_actors=3)
    before = [{k: t.data.copy() for k, t in a.items()} for a in p.actors]
    cfg = TrainConfig(max_agents=2, n_batches=2, epochs=1, episode_plan=(1,))
    rep = ppo_update(p, _toy_batch(fig1, 8, [1] * 8), cfg, Optimizers.for_policy(p), 0, np.random.default_rng(0))
    assert np.isfinite(rep.actor_loss) and np.isfinite(rep.critic_loss)
    for i, a in enumerate(p.actors):
        same = all(np.array_equal(a[k].data, before[i][k]) for k in a)
        assert same == (i != 1)


def test_empty_batch_rejected(fig1):
    p = PolicySet.create(fig1.shape, 2, seed=0)
    with pytest.raises(EmptyBatch):
        ppo_update(p, _toy_batch(fig1, 0, []), TrainConfig(max_agents=2, episode_plan=(1,)),
                   Optimizers.for_policy(p), 0, np.random.default_rng(0))


# -- collection and training ------------------------------------------------

class AwayFromStation:
    """Scripted controller that never steps onto a station."""

    def act(self, items):
        out = []
        for ep, aid in items:
            g = ep.state.map
            loc = ep.state.agent(aid).loc
            a = next(a for a, n in g.neighbors(loc) if not g.is_station(n))
            grid = np.zeros((2, *g.shape))
            out.append((int(a), 1.0, (grid, np.zeros(7), np.ones(4), 0)))
        return out


def scripted_episode(gmap, horizon, battery):
    s = reset(gmap, EnvConfig.deterministic(max_agents=2), 1, seed=0)
    s.agents[0].loc = (0, 0)
    s.agents[0].battery = battery
    return Episode(state=s, act_rng=np.random.default_rng(0), horizon=horizon)


def test_horizon_record_count(fig1):
    p = PolicySet.create(fig1.shape, 2, seed=0)
    (ep,) = run_lockstep([scripted_episode(fig1, 10, 1.0)], AwayFromStation(), rewards=RewardParams(),
                         critic=p, record=True, terminate_on_failure=True)
    assert [r.step for r in ep.trajectories[0]] == list(range(10))
    assert all(0 < r.prob <= 1 for r in ep.trajectories[0])


def test_failure_terminates_training_episode(fig1):
    p = PolicySet.create(fig1.shape, 2, seed=0)
    params = RewardParams()
    (ep,) = run_lockstep([scripted_episode(fig1, 50, 4.5 / 550)], AwayFromStation(), rewards=params,
                         critic=p, record=True, terminate_on_failure=True)
    assert ep.length == 5 and len(ep.trajectories[0]) == 5
    assert ep.trajectories[0][-1].reward < -params.c_b + 1.0


def test_collect_round_plan(fig1):
    cfg = TrainConfig(horizon=3, max_agents=5)
    p = PolicySet.create(fig1.shape, 5, seed=0)
    eps = collect_round(p, fig1, EnvConfig(), RewardParams(), cfg, seed=0, round_idx=0)
    assert [len(e.state.agents) for e in eps] == [1, 1, 1, 1, 2, 3, 4, 5]
    batch = build_batch(eps, cfg)
    assert batch.n_actor > 0 and batch.n_critic > 0


def test_individual_plan(fig1):
    cfg = individual_learner_config(TrainConfig(horizon=2, max_agents=5))
    assert cfg.episode_plan == (1, 1, 1, 1, 1, 2, 3, 4, 5)
    assert individual_learner_config(TrainConfig(), homogeneous=True).homogeneous
    p = PolicySet.create(fig1.shape, 5, seed=0, n_actors=5)
    eps = collect_round(p, fig1, EnvConfig(), RewardParams(), cfg, seed=0, round_idx=0)
    assert [sorted(e.actor_map.values()) for e in eps[:5]] == [[0], [1], [2], [3], [4]]
    assert sorted(eps[-1].actor_map.values()) == [0, 1, 2, 3, 4]


def tiny_config(**kw):
    base = dict(horizon=30, rounds=2, max_agents=2, episode_plan=(1, 2), n_batches=4, checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_train_deterministic(tmp_path, fig1):
    logs = []
    for d in ("a", "b"):
        res = train(fig1, EnvConfig(max_agents=2), RewardParams(), tiny_config(), seed=3, out_dir=tmp_path / d)
        logs.append(res.log_csv())
        assert len(res.log) == 2
    assert logs[0] == logs[1]
    for name in ("train_log.csv", "recharges.csv", "checkpoints/round00002.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_zero_rounds(tmp_path, fig1):
    res = train(fig1, EnvConfig(max_agents=2), RewardParams(), tiny_config(rounds=0), seed=0, out_dir=tmp_path)
    assert res.log == [] and [c.name for c in res.checkpoints] == ["round00000.ckpt"]


def test_train_individual_writes_one_file_per_actor(tmp_path, fig1):
    cfg = individual_learner_config(tiny_config(rounds=1, max_agents=5, horizon=5))
    res = train(fig1, EnvConfig(max_agents=5), RewardParams(), cfg, seed=0, out_dir=tmp_path)
    assert len([c for c in res.checkpoints if c.name.startswith("round00001")]) == 5


def test_compressed_schedules():
    cfg = TrainConfig().compressed()
    assert cfg.entropy.every == 50 and cfg.learning_rate.every == 100
    assert cfg.entropy(200) == 0.005
    assert cfg.learning_rate(10_000) > 0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_eps=0)
    with pytest.raises(ValueError):
        TrainConfig(episode_plan=(6,), max_agents=5)
