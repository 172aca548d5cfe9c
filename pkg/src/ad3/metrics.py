"""Line-delimited metrics records with a fixed schema."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass


@dataclass
class MetricsRecord:
    env_step: int
    wallclock: float
    kind: str                      # wm_update | iag_update | ac_update | episode | eval
    iag_version: int = 0
    wm_recon: float | None = None
    wm_kl_plus: float | None = None
    wm_kl_minus: float | None = None
    wm_reward_nll: float | None = None
    wm_total: float | None = None
    iag_cycle: float | None = None
    iag_diff_recon: float | None = None
    iag_onestep_recon: float | None = None
    iag_total: float | None = None
    actor_loss: float | None = None
    critic_loss: float | None = None
    train_return: float | None = None
    eval_return: float | None = None
    eval_return_std: float | None = None
    separation: float | None = None


class MetricsWriter:
    """Append-only jsonl writer; env_step must be monotone."""

    def __init__(self, path):
        self.path = path
        self._last_step = -1
        self._f = open(path, "w")

    def write(self, rec: MetricsRecord) -> None:
        if rec.env_step < self._last_step:
            raise ValueError(f"env_step went backwards: {rec.env_step} < {self._last_step}")
        self._last_step = rec.env_step
        self._f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")

    def flush(self) -> None:
        self._f.flush()

    def close(self) -> None:
        self._f.flush()
        self._f.close()


def read_metrics(path) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
