"""PNG figures rendered next to the CSV outputs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}  # keep PNG bytes independent of the matplotlib version string


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def _moving_average(xs: list[float], window: int) -> list[float]:
    out, acc = [], 0.0
    for i, x in enumerate(xs):
        acc += x
        if i >= window:
            acc -= xs[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_training(log: list[dict], path: Path, window: int = 10) -> Path:
    rounds = [int(r["round"]) for r in log]
    reward = [float(r["reward_per_agent"]) for r in log]
    battery = [float(r["battery_at_recharge"]) for r in log]
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 3.5))
    a.plot(rounds, reward, alpha=0.3, color="C0")
    a.plot(rounds, _moving_average(reward, window), color="C0")
    a.set_xlabel("round")
    a.set_ylabel("cumulative reward per agent")
    b.plot(rounds, battery, alpha=0.3, color="C1")
    b.plot(rounds, _moving_average(battery, window), color="C1")
    b.set_xlabel("round")
    b.set_ylabel("battery at recharge")
    return _save(fig, path)


def plot_battery(rows: list[dict], path: Path) -> Path:
    ns = [int(r["n"]) for r in rows]
    bc = [float(r["b_c"]) for r in rows]
    err = [float(r["delta_bc"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(ns, bc, yerr=[0 if math.isnan(e) else e for e in err], marker="o", capsize=3)
    ax.set_xlabel("agents")
    ax.set_ylabel("battery at recharge")
    return _save(fig, path)


def plot_patrol(series: dict[str, list[dict]], path: Path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 3.5))
    for label, rows in series.items():
        ns = [int(r["n"]) for r in rows]
        a.plot(ns, [float(r["avg"]) for r in rows], marker="o", label=label)
        b.plot(ns, [float(r["maxbar"]) for r in rows], marker="o", label=label)
    a.set_ylabel("AVG idleness")
    b.set_ylabel("MAX-bar idleness")
    for ax in (a, b):
        ax.set_xlabel("agents")
        ax.legend()
    return _save(fig, path)


def plot_fault(rows: list[dict], path: Path) -> Path:
    days = [int(r["day"]) for r in rows]
    fig, (a, b) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    a.step(days, [int(r["agent_count"]) for r in rows], where="post")
    a.set_ylabel("agents")
    b.plot(days, [float(r["avg"]) for r in rows], label="AVG")
    b.plot(days, [float(r["maxbar"]) for r in rows], label="MAX-bar")
    b.set_xlabel("day")
    b.set_ylabel("idleness")
    b.legend()
    return _save(fig, path)
