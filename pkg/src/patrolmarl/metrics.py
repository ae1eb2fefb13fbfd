"""Idleness and battery statistics computed from per-step episode traces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TraceTooShort

DEFAULT_WARMUP = 150
DAY_STEPS = 14400


@dataclass
class EpisodeTrace:
    mean_idleness: list[float] = field(default_factory=list)
    max_idleness: list[float] = field(default_factory=list)
    durations: list[float] = field(default_factory=list)
    agent_counts: list[int] = field(default_factory=list)
    recharges: list[tuple[int, int, float]] = field(default_factory=list)  # (step, agent, battery)
    failures: list[tuple[int, int]] = field(default_factory=list)  # (step, agent)

    def __len__(self) -> int:
        return len(self.mean_idleness)

    def observe(self, state, outcome) -> None:
        """Append one step; call right after ``environment.step``."""
        t = len(self.mean_idleness)
        vals = state.idleness.reshape(-1)[state.map.vertex_index]
        self.mean_idleness.append(float(vals.mean()))
        self.max_idleness.append(float(vals.max()))
        self.durations.append(float(outcome.duration))
        self.agent_counts.append(len(state.active_agents()))
        for aid in outcome.intentional_recharges:
            self.recharges.append((t, aid, float(outcome.recharge_battery[aid])))
        for aid in outcome.battery_failures:
            self.failures.append((t, aid))


@dataclass(frozen=True)
class PatrolSummary:
    avg: float
    maxbar: float
    max_h: float
    warmup: int
    n_steps: int


def summarize_patrol(trace: EpisodeTrace, warmup: int = DEFAULT_WARMUP,
                     start: int | None = None, stop: int | None = None) -> PatrolSummary:
    """AVG^h, MAX-bar^h and MAX^h over steps after the warmup.

    ``start``/``stop`` select a window of the trace (used for per-day series);
    the warmup is counted from the beginning of the trace, not the window.
    """
    lo = max(warmup, 0 if start is None else start)
    hi = len(trace) if stop is None else min(stop, len(trace))
    if hi <= lo:
        raise TraceTooShort(f"no steps left after warmup {warmup} (window {start}:{stop}, length {len(trace)})")
    mean = np.asarray(trace.mean_idleness[lo:hi])
    peak = np.asarray(trace.max_idleness[lo:hi])
    return PatrolSummary(float(mean.mean()), float(peak.mean()), float(peak.max()), warmup, hi - lo)


@dataclass(frozen=True)
class BatteryStats:
    b_c: float
    b_c_std: float
    failure_rate: float
    failure_rate_std: float
    n_recharges: int
    n_failures: int


def failure_rate(n_recharges: int, n_failures: int) -> float:
    """Failures over recharge-required events; NaN when there were none."""
    total = n_recharges + n_failures
    return n_failures / total if total else math.nan


def battery_stats(tests: list[list[EpisodeTrace]]) -> BatteryStats:
    """Aggregate a test x episode grid of traces.

    The failure rate is computed per test and then averaged; tests with no
    recharge-required events are left out, and if every test is empty the
    rate is NaN.
    """
    if not tests or not any(tests):
        raise ValueError("battery_stats needs at least one trace")
    batteries = [b for test in tests for tr in test for _, _, b in tr.recharges]
    rates, n_rec, n_fail = [], 0, 0
    for test in tests:
        r = sum(len(tr.recharges) for tr in test)
        f = sum(len(tr.failures) for tr in test)
        n_rec += r
        n_fail += f
        rate = failure_rate(r, f)
        if not math.isnan(rate):
            rates.append(rate)
    b = np.asarray(batteries)
    return BatteryStats(
        b_c=float(b.mean()) if b.size else math.nan,
        b_c_std=float(b.std()) if b.size else math.nan,
        failure_rate=float(np.mean(rates)) if rates else math.nan,
        failure_rate_std=float(np.std(rates)) if rates else math.nan,
        n_recharges=n_rec,
        n_failures=n_fail,
    )


@dataclass(frozen=True)
class FaultEvent:
    day: int
    fail: int
    add: int
    before: int

    @property
    def after(self) -> int:
        return self.before - self.fail + self.add


@dataclass(frozen=True)
class FaultSchedule:
    initial: int
    days: int
    events: tuple[FaultEvent, ...]

    def count_on_day(self, day: int) -> int:
        """Scheduled agent count during ``day`` (0-based), ignoring battery failures."""
        n = self.initial
        for e in self.events:
            if e.day <= day:
                n = e.after
        return n


def fault_tolerance_schedule(days: int, rng: np.random.Generator, interval: int = 10,
                             max_agents: int = 8) -> FaultSchedule:
    """Random fail/add interventions every ``interval`` days.

    Each intervention fails between 0 and n-1 agents and then adds enough
    supplementary agents to stay within ``max_agents``.
    """
    if days < interval:
        raise ValueError(f"horizon of {days} days is shorter than the {interval}-day interval")
    n = int(rng.integers(1, max_agents + 1))
    initial = n
    events = []
    for day in range(interval, days, interval):
        k = int(rng.integers(0, n))
        m = int(rng.integers(0, max_agents - (n - k) + 1))
        events.append(FaultEvent(day, k, m, n))
        n = n - k + m
    return FaultSchedule(initial, days, tuple(events))


@dataclass(frozen=True)
class DayRow:
    day: int
    agent_count: int
    avg: float
    maxbar: float
    recharge_battery: float


def daily_series(trace: EpisodeTrace, day_steps: int, warmup: int = DEFAULT_WARMUP) -> list[DayRow]:
    """Per-day AVG, MAX-bar, agent count and mean battery at recharge."""
    rows = []
    n_days = math.ceil(len(trace) / day_steps)
    for d in range(n_days):
        lo, hi = d * day_steps, min((d + 1) * day_steps, len(trace))
        s = summarize_patrol(trace, warmup, lo, hi)
        rech = [b for t, _, b in trace.recharges if lo <= t < hi]
        rows.append(DayRow(d, trace.agent_counts[lo], s.avg, s.maxbar,
                           float(np.mean(rech)) if rech else math.nan))
    return rows
