"""Comparison suites: action-type variants and IAG design ablations."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .trainer import run_training

ACTION_TYPE_ORDER = ("ground_truth", "iag", "agent_action", "no_action")

# Design-ablation rows; each toggle differs from the baseline in exactly one key.
IAG_DESIGN_ROWS = (
    ("No Categorical Variables", {"iag.bottleneck": "vq"}),
    ("No Agent Action", {"iag.use_agent_action": False}),
    ("No Cycle Consistency", {"iag.use_cycle": False}),
    ("No Difference Recon", {"iag.use_diff_recon": False}),
    ("No One-step Recon", {"iag.use_onestep_recon": False}),
    ("AD3", {}),
)


def _run_one(config: RunConfig, out_dir: Path) -> dict:
    result = run_training(config, out_dir=out_dir)
    result["out_dir"] = str(out_dir)
    return result


def run_action_type_suite(base: RunConfig, seeds: list[int], out_dir) -> dict:
    """All four minus-branch action choices over the given seeds."""
    out_dir = Path(out_dir)
    rows = {}
    for variant in ACTION_TYPE_ORDER:
        runs = []
        for seed in seeds:
            cfg = base.copy_with({
                "variant": variant, "seed": seed,
                "env.oracle": True,  # oracle channel doubles as the separation metric
            })
            runs.append(_run_one(cfg, out_dir / f"{variant}_s{seed}"))
        rows[variant] = {
            "mean_return": float(np.mean([r["eval_return"] for r in runs])),
            "std_return": float(np.std([r["eval_return"] for r in runs])),
            "mean_separation": float(np.mean([r["separation"] for r in runs])),
            "runs": runs,
        }
    report = {
        "suite": "action_type",
        "seeds": seeds,
        "rows": rows,
        "ranking": sorted(rows, key=lambda v: -rows[v]["mean_return"]),
        "expected_ordering": "ground_truth ~ iag > {agent_action, no_action}",
    }
    _write_report(out_dir, report, _action_type_text(report))
    return report


def _action_type_text(report: dict) -> str:
    lines = ["action-type comparison", ""]
    lines.append(f"{'variant':<14} {'return':>10} {'+/-':>8} {'separation':>11}")
    for variant in report["ranking"]:
        row = report["rows"][variant]
        lines.append(f"{variant:<14} {row['mean_return']:>10.3f} "
                     f"{row['std_return']:>8.3f} {row['mean_separation']:>11.3f}")
    lines += ["", f"expected qualitative ordering: {report['expected_ordering']}"]
    return "\n".join(lines) + "\n"


def run_iag_design_suite(base: RunConfig, seeds: list[int], out_dir) -> dict:
    """Design-switch ablation rows against the full method."""
    if base["variant"] != "iag":
        raise ConfigError("iag_design suite requires variant=iag")
    out_dir = Path(out_dir)
    rows = {}
    baseline = base
    for name, overrides in IAG_DESIGN_ROWS:
        cfg0 = baseline.copy_with(overrides)
        changed = baseline.diff(cfg0)
        if name != "AD3" and len(changed) != 1:
            raise ConfigError(f"ablation row {name!r} changes {len(changed)} keys: {changed}")
        runs = []
        for seed in seeds:
            cfg = cfg0.copy_with({"seed": seed, "env.oracle": True})
            runs.append(_run_one(cfg, out_dir / f"{_slug(name)}_s{seed}"))
        rows[name] = {
            "overrides": {k: v[1] for k, v in changed.items()},
            "mean_return": float(np.mean([r["eval_return"] for r in runs])),
            "std_return": float(np.std([r["eval_return"] for r in runs])),
            "mean_separation": float(np.mean([r["separation"] for r in runs])),
            "runs": runs,
        }
    report = {"suite": "iag_design", "seeds": seeds, "rows": rows,
              "row_order": [name for name, _ in IAG_DESIGN_ROWS]}
    _write_report(out_dir, report, _iag_design_text(report))
    return report


def _iag_design_text(report: dict) -> str:
    lines = [" | ".join(report["row_order"]), ""]
    lines.append(f"{'method':<26} {'return':>10} {'+/-':>8} {'separation':>11}")
    for name in report["row_order"]:
        row = report["rows"][name]
        lines.append(f"{name:<26} {row['mean_return']:>10.3f} "
                     f"{row['std_return']:>8.3f} {row['mean_separation']:>11.3f}")
    return "\n".join(lines) + "\n"


def _slug(name: str) -> str:
    return name.lower().replace(" ", "_").replace("-", "_")


def _write_report(out_dir: Path, report: dict, text: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out_dir / "report.txt").write_text(text)
