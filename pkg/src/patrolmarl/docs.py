"""Reproduction index generated from run manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

_CKPT = "runs/desk/train/checkpoints/round00300.ckpt"


@dataclass(frozen=True)
class ReproEntry:
    key: str
    artifact: str
    command: str
    config: str
    expected: str
    manifest: str | None = None  # run directory relative to the runs root


ENTRIES: tuple[ReproEntry, ...] = (
    ReproEntry("train", "training curves (reward per agent, battery at recharge)",
               "patrolmarl train --config configs/desk/train.ini --out runs/desk/train",
               "configs/desk/train.ini", "reward rises; battery at recharge drifts toward b_l", "train"),
    ReproEntry("eval-battery", "battery statistics table (n, b_c, delta_bc, F, delta_F)",
               f"patrolmarl eval-battery --config configs/desk/eval.ini --checkpoint {_CKPT} --out runs/desk/battery",
               "configs/desk/eval.ini", "b_c near b_l, F close to 0", "battery"),
    ReproEntry("eval-patrol", "idleness versus team size, learned policy against CR",
               f"patrolmarl eval-patrol --config configs/desk/eval.ini --checkpoint {_CKPT} --out runs/desk/patrol",
               "configs/desk/eval.ini", "AVG and MAX-bar fall as agents are added", "patrol"),
    ReproEntry("eval-fault", "daily idleness under scheduled failures and additions",
               "patrolmarl eval-fault --config configs/desk/fault.ini --out runs/desk/fault",
               "configs/desk/fault.ini", "no gaps in the series; idleness tracks the agent count", "fault"),
    ReproEntry("criterion-1", "action masking renormalisation",
               "pytest tests/test_acceptance.py -k masking", "-", "exact renormalised distribution"),
    ReproEntry("criterion-2", "hot-swap trajectory reconstruction",
               "pytest tests/test_acceptance.py -k swap_gap", "-", "equal returns for both agents"),
    ReproEntry("criterion-3", "gradient oracle",
               "patrolmarl gradcheck", "-", "every layer below 1e-4 relative error"),
    ReproEntry("criterion-4", "advantage and critic target oracles",
               "pytest tests/test_acceptance.py -k gae", "-", "agreement within 1e-10"),
    ReproEntry("criterion-5", "reward analytic points",
               "pytest tests/test_acceptance.py -k reward_points", "-", "closed-form values"),
    ReproEntry("criterion-6", "difference reward oracle",
               "pytest tests/test_acceptance.py -k difference", "-", "exhaustive agreement"),
    ReproEntry("criterion-7", "environment invariants",
               "pytest tests/test_acceptance.py -k environment", "-", "all invariants hold"),
    ReproEntry("criterion-8", "desk-scale training trend",
               "pytest tests/test_acceptance.py -k training_trend", "configs/desk/train.ini",
               "reward +20%, recharge battery within b_l +- 0.15, failure rate <= 5%", "train"),
    ReproEntry("criterion-9", "fault-tolerance liveness",
               "pytest tests/test_acceptance.py -k fault", "configs/desk/fault.ini",
               "agent-count column matches the script; per-interval AVG within 20%", "fault"),
    ReproEntry("criterion-10", "CR sanity",
               "pytest tests/test_acceptance.py -k cr_baseline", "-", "no CR failures; AVG non-increasing"),
    ReproEntry("criterion-11", "battery table shape",
               "pytest tests/test_acceptance.py -k battery_table", "configs/desk/eval.ini",
               "8 rows with NAN for empty cells", "battery"),
)


def entry_status(entry: ReproEntry, runs_root: Path) -> tuple[str, dict]:
    if entry.manifest is None:
        return "test-only", {}
    path = runs_root / entry.manifest / "manifest.json"
    if not path.exists():
        return "INCOMPLETE (no manifest)", {}
    return "complete", json.loads(path.read_text())


def generate_repro_index(runs_root: str | Path, out_path: str | Path | None = None) -> str:
    """Render the index; also write it to ``out_path`` when given."""
    runs_root = Path(runs_root)
    lines = ["# Reproduction index", "",
             f"Generated from manifests under `{runs_root.as_posix()}`.", ""]
    for e in ENTRIES:
        status, manifest = entry_status(e, runs_root)
        lines += [f"## {e.key}: {e.artifact}", "",
                  f"- command: `{e.command}`",
                  f"- config: `{e.config}`",
                  f"- expected: {e.expected}",
                  f"- status: {status}"]
        for name, digest in sorted(manifest.get("files", {}).items()):
            lines.append(f"  - `{name}` sha256 `{digest[:16]}`")
        lines.append("")
    text = "\n".join(lines)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text)
    return text
