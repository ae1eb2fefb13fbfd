"""INI experiment configuration.

Sections and keys (all optional; defaults are the desk-scale values)::

    [run]    map, strategy (marl | individual | cr), seed, out
    [env]    b_max, b_swap_min, b_swap_max, p_dyn_min, p_dyn_max, drain_extra_max,
             idle_jitter, b_l, max_agents, c_norm, idle_cap_factor
    [reward] c_b, c_Rp, c_Rd, c_recharge, c_patrol
    [train]  gamma, lam, clip_eps, epochs, n_batches, entropy_start, entropy_decrement,
             entropy_every, entropy_min, lr_start, lr_decrement, lr_every, lr_min,
             episode_plan, horizon, rounds, max_agents, normalize_advantages,
             max_grad_norm, checkpoint_every, schedule_compression
    [eval]   tests, episodes, horizon, agent_counts, max_agents, warmup,
             patrol_episodes, patrol_horizon, max_retries, cr_margin, compare_cr,
             day_steps, fault_days, fault_interval, fault_script, plots

``b_l`` and ``c_norm`` live in ``[env]`` and are shared with the reward.
``fault_script`` is a space-separated list of ``day:fail:add`` triples plus
an ``init:<n>`` entry; when empty a random schedule is drawn.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import StepSchedule
from .baselines import individual_learner_config
from .environment import EnvConfig
from .errors import ConfigError
from .gridmap import GridMap, load_map_file
from .mappo import TrainConfig
from .rewards import RewardParams

STRATEGIES = ("marl", "individual", "cr")
EVAL_MAX_AGENTS = 8


@dataclass(frozen=True)
class EvalPlan:
    tests: int = 2
    episodes: int = 10
    horizon: int = 2000
    agent_counts: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    max_agents: int = EVAL_MAX_AGENTS
    warmup: int = 150
    patrol_episodes: int = 20
    patrol_horizon: int = 2000
    max_retries: int = 200
    cr_margin: float = 5.0
    compare_cr: bool = True
    day_steps: int = 1000
    fault_days: int = 20
    fault_interval: int = 10
    fault_script: str = ""
    plots: bool = True

    def __post_init__(self):
        if any(n < 1 or n > self.max_agents for n in self.agent_counts):
            raise ConfigError(f"evaluation agent counts must lie in [1, {self.max_agents}]")
        if self.max_agents > EVAL_MAX_AGENTS:
            raise ConfigError(f"evaluation supports at most {EVAL_MAX_AGENTS} agents")
        if self.patrol_horizon <= self.warmup:
            raise ConfigError("patrol_horizon must exceed warmup")


@dataclass(frozen=True)
class ExperimentConfig:
    map_path: str = "builtin:fig1"
    strategy: str = "marl"
    seed: int = 0
    out: str = "runs/desk"
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalPlan = field(default_factory=EvalPlan)
    source: str = ""  # raw text of the config file, for the manifest

    def load_map(self) -> GridMap:
        try:
            return load_map_file(self.map_path)
        except FileNotFoundError as exc:
            raise ConfigError(f"map not found: {self.map_path}") from exc

    def train_config(self) -> TrainConfig:
        if self.strategy == "individual":
            return individual_learner_config(self.train)
        return self.train

    def snapshot(self) -> dict:
        def plain(x):
            if dataclasses.is_dataclass(x):
                return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, tuple):
                return [plain(v) for v in x]
            return x
        snap = plain(self)
        snap.pop("source")
        return snap


_FIELDS = {
    "run": {"map", "strategy", "seed", "out"},
    "env": {"b_max", "b_swap_min", "b_swap_max", "p_dyn_min", "p_dyn_max", "drain_extra_max",
            "idle_jitter", "b_l", "max_agents", "c_norm", "idle_cap_factor"},
    "reward": {"c_b", "c_Rp", "c_Rd", "c_recharge", "c_patrol"},
    "train": {"gamma", "lam", "clip_eps", "epochs", "n_batches", "entropy_start", "entropy_decrement",
              "entropy_every", "entropy_min", "lr_start", "lr_decrement", "lr_every", "lr_min",
              "episode_plan", "horizon", "rounds", "max_agents", "normalize_advantages",
              "max_grad_norm", "checkpoint_every", "schedule_compression"},
    "eval": {f.name for f in dataclasses.fields(EvalPlan)},
}


class _Section:
    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.sec = parser[name] if parser.has_section(name) else {}

    def _get(self, key, conv, default):
        if key not in self.sec:
            return default
        raw = self.sec[key]
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {exc}") from None

    def float(self, key, default):
        return self._get(key, float, default)

    def int(self, key, default):
        return self._get(key, int, default)

    def str(self, key, default):
        return self._get(key, str.strip, default)

    def bool(self, key, default):
        def conv(v):
            v = v.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        return self._get(key, conv, default)

    def ints(self, key, default):
        return self._get(key, lambda v: tuple(int(x) for x in v.replace(",", " ").split()), default)

    def optional_float(self, key, default):
        return self._get(key, lambda v: None if v.strip().lower() in ("", "none") else float(v), default)


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case (c_Rp)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec in parser.sections():
        if sec not in _FIELDS:
            raise ConfigError(f"unknown section [{sec}]")
        unknown = set(parser[sec]) - _FIELDS[sec]
        if unknown:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(unknown)}")

    run, env, rew, tr, ev = (_Section(parser, s) for s in ("run", "env", "reward", "train", "eval"))
    d_env, d_rew, d_tr, d_ev = EnvConfig(), RewardParams(), TrainConfig(), EvalPlan()
    try:
        env_cfg = EnvConfig(
            b_max=env.float("b_max", d_env.b_max),
            b_swap_range=(env.int("b_swap_min", d_env.b_swap_range[0]), env.int("b_swap_max", d_env.b_swap_range[1])),
            p_dyn_range=(env.float("p_dyn_min", d_env.p_dyn_range[0]), env.float("p_dyn_max", d_env.p_dyn_range[1])),
            drain_extra_max=env.float("drain_extra_max", d_env.drain_extra_max),
            idle_jitter=env.float("idle_jitter", d_env.idle_jitter),
            b_l=env.float("b_l", d_env.b_l),
            max_agents=env.int("max_agents", d_env.max_agents),
            c_norm=env.float("c_norm", d_env.c_norm),
            idle_cap_factor=env.float("idle_cap_factor", d_env.idle_cap_factor),
        )
        reward = RewardParams(
            c_norm=env_cfg.c_norm,
            c_b=rew.float("c_b", d_rew.c_b),
            c_Rp=rew.float("c_Rp", d_rew.c_Rp),
            c_Rd=rew.float("c_Rd", d_rew.c_Rd),
            c_recharge=rew.float("c_recharge", d_rew.c_recharge),
            c_patrol=rew.float("c_patrol", d_rew.c_patrol),
            b_l=env_cfg.b_l,
        )
        ent, lr = d_tr.entropy, d_tr.learning_rate
        train = TrainConfig(
            gamma=tr.float("gamma", d_tr.gamma),
            lam=tr.float("lam", d_tr.lam),
            clip_eps=tr.float("clip_eps", d_tr.clip_eps),
            epochs=tr.int("epochs", d_tr.epochs),
            n_batches=tr.int("n_batches", d_tr.n_batches),
            entropy=StepSchedule(tr.float("entropy_start", ent.start), tr.float("entropy_decrement", ent.decrement),
                                 tr.int("entropy_every", ent.every), tr.float("entropy_min", ent.minimum)),
            learning_rate=StepSchedule(tr.float("lr_start", lr.start), tr.float("lr_decrement", lr.decrement),
                                       tr.int("lr_every", lr.every), tr.float("lr_min", lr.minimum)),
            episode_plan=tr.ints("episode_plan", d_tr.episode_plan),
            horizon=tr.int("horizon", d_tr.horizon),
            rounds=tr.int("rounds", d_tr.rounds),
            max_agents=tr.int("max_agents", env_cfg.max_agents),
            normalize_advantages=tr.bool("normalize_advantages", d_tr.normalize_advantages),
            max_grad_norm=tr.optional_float("max_grad_norm", d_tr.max_grad_norm),
            checkpoint_every=tr.int("checkpoint_every", d_tr.checkpoint_every),
        )
        factor = tr.int("schedule_compression", 1)
        if factor > 1:
            train = train.compressed(factor)
        kw = {}
        for f in dataclasses.fields(EvalPlan):
            default = getattr(d_ev, f.name)
            if isinstance(default, bool):
                kw[f.name] = ev.bool(f.name, default)
            elif isinstance(default, int):
                kw[f.name] = ev.int(f.name, default)
            elif isinstance(default, float):
                kw[f.name] = ev.float(f.name, default)
            elif isinstance(default, tuple):
                kw[f.name] = ev.ints(f.name, default)
            else:
                kw[f.name] = ev.str(f.name, default)
        plan = EvalPlan(**kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    strategy = run.str("strategy", "marl")
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if train.max_agents > env_cfg.max_agents:
        raise ConfigError("[train] max_agents exceeds [env] max_agents")
    map_path = run.str("map", "builtin:fig1")
    if not map_path.startswith("builtin:") and base_dir is not None and not Path(map_path).is_absolute():
        map_path = str((base_dir / map_path).resolve())
    if not map_path.startswith("builtin:") and not Path(map_path).exists():
        raise ConfigError(f"map file does not exist: {map_path}")
    return ExperimentConfig(map_path=map_path, strategy=strategy, seed=run.int("seed", 0),
                            out=run.str("out", "runs/desk"), env=env_cfg, reward=reward, train=train,
                            eval=plan, source=text)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), base_dir=p.parent)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{k: v for k, v in kw.items() if v is not None})
