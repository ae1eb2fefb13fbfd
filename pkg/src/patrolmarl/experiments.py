"""Experiment commands behind the CLI: training and the three evaluations.

Every command writes CSVs (plus PNG figures unless disabled) into its output
directory together with a ``manifest.json`` of checksums.  Outputs are a pure
function of the configuration and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .baselines import CRTeam
from .config import ExperimentConfig
from .environment import EnvConfig, add_agent, fail_agent, reset
from .errors import ConfigError, QuotaUnreachable
from .gridmap import GridMap
from .mappo import train
from .metrics import (
    FaultEvent, FaultSchedule, battery_stats, daily_series, fault_tolerance_schedule, summarize_patrol,
)
from .policy import PolicySet
from .rollout import CRController, Episode, PolicyController, run_lockstep

BATTERY_COLUMNS = ("n", "b_c", "delta_bc", "F", "delta_F")
PATROL_COLUMNS = ("n", "avg", "maxbar", "avg_std", "maxbar_std", "max_h", "b_c", "reruns")
FAULT_COLUMNS = ("day", "agent_count", "avg", "maxbar", "recharge_battery")
SCHEDULE_COLUMNS = ("day", "fail", "add", "before", "after")

_TAG_BATTERY, _TAG_PATROL, _TAG_FAULT, _TAG_CR = 1, 2, 3, 4


@dataclass
class CommandResult:
    out_dir: Path
    files: list[Path] = field(default_factory=list)
    rows: dict[str, list[dict]] = field(default_factory=dict)


# -- output helpers ---------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "NAN" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, columns, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_value(r[c]) for c in columns])
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{version}+{h.hexdigest()[:12]}"


def write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, files: list[Path]) -> Path:
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "code_version": code_version(),
        "config": cfg.snapshot(),
        "files": {p.relative_to(out_dir).as_posix(): sha256(p) for p in sorted(files)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(out_dir: Path) -> list[str]:
    """Names of listed files whose checksum no longer matches."""
    manifest = json.loads((Path(out_dir) / "manifest.json").read_text())
    return [name for name, digest in manifest["files"].items() if sha256(Path(out_dir) / name) != digest]


# -- episode construction ---------------------------------------------------


def _eval_env(cfg: ExperimentConfig) -> EnvConfig:
    return dataclasses.replace(cfg.env, max_agents=cfg.eval.max_agents)


def _strategy_slot(policy: PolicySet | None, agent_id: int) -> int:
    return 0 if policy is None or policy.homogeneous else agent_id % len(policy.actors)


def make_episode(gmap: GridMap, env: EnvConfig, n_agents: int, ss: np.random.SeedSequence, horizon: int,
                 policy: PolicySet | None, cr_margin: float, index: int = 0) -> Episode:
    env_ss, act_ss = ss.spawn(2)
    state = reset(gmap, env, n_agents, env_ss)
    ep = Episode(state=state, act_rng=np.random.default_rng(act_ss), horizon=horizon, index=index,
                 actor_map={a.id: _strategy_slot(policy, a.id) for a in state.agents})
    if policy is None:
        ep.cr = CRTeam(env.b_l, env.b_max, cr_margin)
    return ep


def controller_for(policy: PolicySet | None):
    return CRController() if policy is None else PolicyController(policy)


def check_policy(cfg: ExperimentConfig, policy: PolicySet | None, gmap: GridMap) -> None:
    if cfg.strategy == "cr":
        return
    if policy is None:
        raise ConfigError(f"strategy {cfg.strategy!r} needs --checkpoint")
    if tuple(policy.map_shape) != gmap.shape:
        raise ConfigError(f"checkpoint trained on a {policy.map_shape} map, config map is {gmap.shape}")


def load_policy(paths: list[str | Path]) -> PolicySet:
    """Load one checkpoint, or merge per-actor checkpoint files in order."""
    if not paths:
        raise ConfigError("no checkpoint given")
    for p in paths:
        if not Path(p).exists():
            raise ConfigError(f"checkpoint not found: {p}")
    policies = [PolicySet.load(p) for p in paths]
    if len(policies) == 1:
        return policies[0]
    base = policies[0]
    return PolicySet(base.map_shape, base.max_agents, [a for p in policies for a in p.actors], base.critic)


# -- commands -----------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, out_dir: Path, plots: bool = True, progress=None) -> CommandResult:
    if cfg.strategy not in ("marl", "individual"):
        raise ConfigError("train needs strategy marl or individual")
    gmap = cfg.load_map()
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(gmap, cfg.env, cfg.reward, cfg.train_config(), seed=cfg.seed, out_dir=out_dir, progress=progress)
    files = [out_dir / "train_log.csv", out_dir / "recharges.csv", *result.checkpoints]
    if plots and result.log:
        from .plotting import plot_training
        files.append(plot_training(result.log, out_dir / "training.png"))
    write_manifest(out_dir, "train", cfg, files)
    return CommandResult(out_dir, files, {"train_log": result.log})


def cmd_eval_battery(cfg: ExperimentConfig, policy: PolicySet | None, out_dir: Path,
                     plots: bool = True) -> CommandResult:
    gmap = cfg.load_map()
    check_policy(cfg, policy, gmap)
    plan, env = cfg.eval, _eval_env(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, events = [], []
    for n in plan.agent_counts:
        eps = [make_episode(gmap, env, n, np.random.SeedSequence(cfg.seed, spawn_key=(_TAG_BATTERY, n, t, e)),
                            plan.horizon, policy, plan.cr_margin, index=t * plan.episodes + e)
               for t in range(plan.tests) for e in range(plan.episodes)]
        run_lockstep(eps, controller_for(policy))
        grid = [[ep.trace for ep in eps[t * plan.episodes:(t + 1) * plan.episodes]] for t in range(plan.tests)]
        st = battery_stats(grid)
        rows.append({"n": n, "b_c": st.b_c, "delta_bc": st.b_c_std, "F": st.failure_rate,
                     "delta_F": st.failure_rate_std})
        events.append({"n": n, "recharges": st.n_recharges, "failures": st.n_failures})
    files = [write_csv(out_dir / "battery.csv", BATTERY_COLUMNS, rows)]
    if plots:
        from .plotting import plot_battery
        files.append(plot_battery(rows, out_dir / "battery.png"))
    write_manifest(out_dir, "eval-battery", cfg, files)
    return CommandResult(out_dir, files, {"battery": rows, "events": events})


def patrol_rows(cfg: ExperimentConfig, gmap: GridMap, policy: PolicySet | None, tag: int,
                cr_margin: float) -> list[dict]:
    """Clean-episode AVG / MAX-bar per agent count; failed episodes are rerun."""
    plan, env = cfg.eval, _eval_env(cfg)
    rows = []
    for n in plan.agent_counts:
        clean, attempt, reruns = [], 0, 0
        while len(clean) < plan.patrol_episodes:
            need = plan.patrol_episodes - len(clean)
            eps = [make_episode(gmap, env, n, np.random.SeedSequence(cfg.seed, spawn_key=(tag, n, attempt + i)),
                                plan.patrol_horizon, policy, cr_margin, index=attempt + i)
                   for i in range(need)]
            attempt += need
            run_lockstep(eps, controller_for(policy))
            for ep in eps:
                if ep.trace.failures:
                    reruns += 1
                else:
                    clean.append(ep)
            if reruns > plan.max_retries:
                raise QuotaUnreachable(f"{n} agents: only {len(clean)} clean episodes after {reruns} reruns")
        sums = [summarize_patrol(ep.trace, plan.warmup) for ep in clean]
        avg = np.array([s.avg for s in sums])
        mx = np.array([s.maxbar for s in sums])
        rech = [b for ep in clean for _, _, b in ep.trace.recharges]
        rows.append({"n": n, "avg": float(avg.mean()), "maxbar": float(mx.mean()), "avg_std": float(avg.std()),
                     "maxbar_std": float(mx.std()), "max_h": max(s.max_h for s in sums),
                     "b_c": float(np.mean(rech)) if rech else math.nan, "reruns": reruns})
    return rows


def calibrated_margin(b_c: float, b_l: float, b_max: float) -> float:
    """CR safety margin (in steps) that makes it land with about ``b_c`` battery."""
    if math.isnan(b_c):
        return 5.0
    return max(0.0, (b_c - b_l) * b_max)


def cmd_eval_patrol(cfg: ExperimentConfig, policy: PolicySet | None, out_dir: Path,
                    plots: bool = True) -> CommandResult:
    gmap = cfg.load_map()
    check_policy(cfg, policy, gmap)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = patrol_rows(cfg, gmap, policy, _TAG_PATROL, cfg.eval.cr_margin)
    files = [write_csv(out_dir / "patrol.csv", PATROL_COLUMNS, rows)]
    series = {cfg.strategy: rows}
    out_rows = {"patrol": rows}
    if policy is not None and cfg.eval.compare_cr:
        b_c = [r["b_c"] for r in rows if not math.isnan(r["b_c"])]
        margin = calibrated_margin(float(np.mean(b_c)) if b_c else math.nan, cfg.env.b_l, cfg.env.b_max)
        cr = patrol_rows(cfg, gmap, None, _TAG_CR, margin)
        files.append(write_csv(out_dir / "patrol_cr.csv", PATROL_COLUMNS, cr))
        series["cr"] = cr
        out_rows["patrol_cr"] = cr
    if plots:
        from .plotting import plot_patrol
        files.append(plot_patrol(series, out_dir / "patrol.png"))
    write_manifest(out_dir, "eval-patrol", cfg, files)
    return CommandResult(out_dir, files, out_rows)


def parse_fault_script(text: str) -> FaultSchedule | None:
    """``init:3 2:1:0 4:0:1`` -> start with 3, fail 1 on day 2, add 1 on day 4."""
    parts = text.split()
    if not parts:
        return None
    initial, events = None, []
    try:
        for p in parts:
            fields = p.split(":")
            if fields[0] == "init":
                initial = int(fields[1])
            else:
                day, fail, add = (int(x) for x in fields)
                events.append((day, fail, add))
    except (ValueError, IndexError):
        raise ConfigError(f"bad fault_script entry {p!r}") from None
    if initial is None:
        raise ConfigError("fault_script needs an init:<n> entry")
    out, n = [], initial
    for day, fail, add in sorted(events):
        out.append(FaultEvent(day, fail, add, n))
        n = n - fail + add
    days = max((e.day for e in out), default=0) + 1
    return FaultSchedule(initial, days, tuple(out))


def _apply_event(ep: Episode, event: FaultEvent, rng: np.random.Generator, policy: PolicySet | None) -> None:
    state = ep.state
    active = sorted(a.id for a in state.active_agents())
    k = min(event.fail, max(len(active) - 1, 0))
    for aid in sorted(rng.choice(active, size=k, replace=False).tolist()) if k else []:
        fail_agent(state, aid)
    for _ in range(event.add):
        if len(state.active_agents()) >= state.config.max_agents:
            break
        _, new_id = add_agent(state)
        ep.actor_map[new_id] = _strategy_slot(policy, new_id)


def cmd_eval_fault(cfg: ExperimentConfig, policy: PolicySet | None, out_dir: Path,
                   plots: bool = True) -> CommandResult:
    gmap = cfg.load_map()
    check_policy(cfg, policy, gmap)
    plan, env = cfg.eval, _eval_env(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(cfg.seed, spawn_key=(_TAG_FAULT,))
    sched_ss, ep_ss, event_ss = root.spawn(3)
    schedule = parse_fault_script(plan.fault_script)
    if schedule is None:
        schedule = fault_tolerance_schedule(plan.fault_days, np.random.default_rng(sched_ss), plan.fault_interval,
                                            plan.max_agents)
    days = max(plan.fault_days, schedule.days)
    if schedule.initial > env.max_agents:
        raise ConfigError("fault schedule starts with more agents than the evaluation allows")
    ep = make_episode(gmap, env, schedule.initial, ep_ss, days * plan.day_steps, policy, plan.cr_margin)
    event_rng = np.random.default_rng(event_ss)
    by_step = {e.day * plan.day_steps: e for e in schedule.events}

    def hook(episode: Episode, t: int) -> None:
        event = by_step.get(t)
        if event is not None:
            _apply_event(episode, event, event_rng, policy)

    ep.hook = hook
    run_lockstep([ep], controller_for(policy))
    rows = [{"day": r.day, "agent_count": r.agent_count, "avg": r.avg, "maxbar": r.maxbar,
             "recharge_battery": r.recharge_battery}
            for r in daily_series(ep.trace, plan.day_steps, plan.warmup)]
    sched_rows = [{"day": e.day, "fail": e.fail, "add": e.add, "before": e.before, "after": e.after}
                  for e in schedule.events]
    files = [write_csv(out_dir / "fault_daily.csv", FAULT_COLUMNS, rows),
             write_csv(out_dir / "fault_schedule.csv", SCHEDULE_COLUMNS, sched_rows)]
    if plots:
        from .plotting import plot_fault
        files.append(plot_fault(rows, out_dir / "fault.png"))
    write_manifest(out_dir, "eval-fault", cfg, files)
    return CommandResult(out_dir, files, {"fault_daily": rows, "schedule": sched_rows,
                                          "expected_counts": [schedule.count_on_day(d) for d in range(days)],
                                          "battery_failures": [{"step": t, "agent": a} for t, a in ep.trace.failures]})
