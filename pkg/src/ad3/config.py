"""Flat key=value run configuration.

One schema covers every module's knobs. Config files are plain text
(``key = value`` per line, ``#`` comments); ``--set key=value`` overrides
win. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from .errors import ConfigError

VARIANTS = ("iag", "agent_action", "no_action", "ground_truth")
ENV_MODES = ("homogeneous", "heterogeneous", "micro")

# key -> default; the default's type fixes the parse type
DEFAULTS = {
    "seed": 0,
    "variant": "iag",
    "total_env_steps": 50_000,
    "eval_every": 5_000,
    "eval_episodes": 2,
    "out_dir": "runs/run",

    "env.mode": "homogeneous",
    "env.seed": 0,
    "env.oracle": False,
    "env.bank": "",

    "replay.capacity": 500,

    "iag.d": 4,
    "iag.cycle": "cosine",
    "iag.bottleneck": "categorical",
    "iag.rollout_len": 6,
    "iag.lr": 6e-4,
    "iag.session_every": 10_000,
    "iag.steps_per_session": 1_000,
    "iag.batch": 64,
    "iag.feature_dim": 256,
    "iag.hidden_dim": 256,
    "iag.use_agent_action": True,
    "iag.use_cycle": True,
    "iag.use_diff_recon": True,
    "iag.use_onestep_recon": True,

    "wm.h_dim": 64,
    "wm.z_dim": 16,
    "wm.free_nats": 1.0,
    "wm.lr": 3e-4,
    "wm.batch": 16,
    "wm.seq_len": 16,
    "wm.embed_dim": 128,
    "wm.hidden_dim": 128,
    "wm.enc_channels": "16,32,64",
    "wm.dec_channels": "32,16",

    "agent.horizon": 8,
    "agent.gamma": 0.99,
    "agent.lambda": 0.95,
    "agent.actor_lr": 8e-5,
    "agent.critic_lr": 8e-5,
    "agent.target_every": 100,
    "agent.expl_sigma_start": 0.3,
    "agent.expl_sigma_end": 0.1,
    "agent.imag_starts": 128,

    "train.update_every": 5,
    "train.warmup_steps": 2_000,
}


def _parse_value(key: str, raw, default):
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} "
                          f"as {type(default).__name__}") from exc


class RunConfig:
    def __init__(self, overrides: dict | None = None):
        self._values = dict(DEFAULTS)
        for key, val in (overrides or {}).items():
            self.set(key, val)
        self.validate()

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _parse_value(key, value, DEFAULTS[key])

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def as_dict(self) -> dict:
        return dict(self._values)

    def copy_with(self, overrides: dict) -> "RunConfig":
        merged = self.as_dict()
        merged.update(overrides)
        return RunConfig(merged)

    def diff(self, other: "RunConfig") -> dict:
        return {k: (self._values[k], other._values[k])
                for k in DEFAULTS if self._values[k] != other._values[k]}

    def validate(self) -> None:
        v = self._values
        if v["variant"] not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {v['variant']!r}")
        if v["env.mode"] not in ENV_MODES:
            raise ConfigError(f"env.mode must be one of {ENV_MODES}, got {v['env.mode']!r}")
        if v["variant"] == "ground_truth" and not v["env.oracle"]:
            raise ConfigError("variant=ground_truth requires env.oracle=true")
        if v["iag.cycle"] not in ("cosine", "contrastive"):
            raise ConfigError(f"iag.cycle: {v['iag.cycle']!r}")
        if v["iag.bottleneck"] not in ("categorical", "vq"):
            raise ConfigError(f"iag.bottleneck: {v['iag.bottleneck']!r}")
        for key in ("total_env_steps", "iag.d", "wm.h_dim", "wm.z_dim"):
            if v[key] <= 0:
                raise ConfigError(f"{key} must be positive")

    def channels(self, key: str) -> tuple[int, ...]:
        return tuple(int(x) for x in self._values[key].split(",") if x.strip())

    # -- file form ------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{k} = {self._values[k]}\n" for k in sorted(self._values))

    @classmethod
    def from_file(cls, path, set_overrides: list[str] | None = None) -> "RunConfig":
        overrides = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, val = line.split("=", 1)
                overrides[key.strip()] = val.strip()
        for item in set_overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, val = item.split("=", 1)
            overrides[key.strip()] = val.strip()
        return cls(overrides)
