"""Seedable synthetic environments with visually distracting backgrounds.

Three modes share one interface:

* ``homogeneous`` -- a 32x32x3 world with two identical 5x5 sprites. One is
  driven by the agent's actions, the other replays a pre-recorded action
  sequence from a bank through the same dynamics, so a single frame carries
  no information about which sprite is controllable.
* ``heterogeneous`` -- the agent sprite over a procedurally scrolling colour
  texture whose scroll direction (the hidden distractor action) is
  re-sampled every ``SCROLL_PERIOD`` steps.
* ``micro`` -- a 2x4x1 tabular chain world small enough to enumerate every
  transition exactly; used by brute-force oracles.

Rendering is a pure function of the hidden state. Ground-truth distractor
actions are only retrievable when the environment was built with
``oracle=True``; sprite footprints and positions are exposed unconditionally
for evaluation metrics, never for learning.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, OracleAccessError

FRAME_SIZE = 32
SPRITE_SIDE = 5.0
DAMPING = 0.8
GAIN = 0.02
SPRITE_EPISODE_LEN = 200
MICRO_EPISODE_LEN = 50
SCROLL_PERIOD = 8
SCROLL_SPEED = 2  # pixels per step

BANK_MAGIC = b"AD3BANK1"


# ---------------------------------------------------------------------------
# Homogeneous action bank (versioned binary file)
# ---------------------------------------------------------------------------

def make_default_bank(count: int = 32, seq_len: int = 220, seed: int = 2024) -> np.ndarray:
    """Pre-recorded distractor actions from a sinusoidal-plus-noise controller."""
    rng = np.random.default_rng(seed)
    t = np.arange(seq_len, dtype=np.float64)
    bank = np.empty((count, seq_len, 2), dtype=np.float32)
    for i in range(count):
        amp = rng.uniform(0.5, 1.0, size=2)
        omega = rng.uniform(0.05, 0.35, size=2)
        phase = rng.uniform(0.0, 2 * np.pi, size=2)
        noise = rng.normal(0.0, 0.3, size=(seq_len, 2))
        a = amp * np.stack([np.sin(omega[0] * t + phase[0]),
                            np.sin(omega[1] * t + phase[1])], axis=1) + noise
        bank[i] = np.clip(a, -1.0, 1.0).astype(np.float32)
    return bank


def write_action_bank(path: str | Path, bank: np.ndarray) -> None:
    """Serialize a (count, seq_len, 2) float32 bank with a 16-byte header."""
    bank = np.ascontiguousarray(bank, dtype="<f4")
    if bank.ndim != 3 or bank.shape[2] != 2:
        raise ContractError(f"bank must have shape (count, seq_len, 2), got {bank.shape}")
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<II", bank.shape[0], bank.shape[1]))
        f.write(bank.tobytes())


def load_action_bank(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != BANK_MAGIC:
            raise ConfigError(f"{path}: bad bank magic {magic!r}")
        count, seq_len = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(), dtype="<f4")
    expected = count * seq_len * 2
    if data.size != expected:
        raise ConfigError(f"{path}: expected {expected} floats, found {data.size}")
    return data.reshape(count, seq_len, 2).copy()


# ---------------------------------------------------------------------------
# Sprite rendering helpers (pure)
# ---------------------------------------------------------------------------

def _axis_coverage(center_px: float, size: int) -> np.ndarray:
    """Coverage of each pixel cell by a SPRITE_SIDE-long segment on a ring."""
    cov = np.zeros(size, dtype=np.float64)
    lo = center_px - SPRITE_SIDE / 2.0
    hi = center_px + SPRITE_SIDE / 2.0
    j = int(np.floor(lo))
    while j < hi:
        overlap = min(hi, j + 1.0) - max(lo, float(j))
        if overlap > 0:
            cov[j % size] += overlap
        j += 1
    return np.minimum(cov, 1.0)


def sprite_coverage(pos: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    """Anti-aliased 5x5 square footprint, wrapping on the torus.

    ``pos`` is the sprite centre in [0,1)^2 (x horizontal, y vertical);
    returns a (size, size) float map in [0, 1].
    """
    cx = (pos[0] % 1.0) * size
    cy = (pos[1] % 1.0) * size
    return np.outer(_axis_coverage(cy, size), _axis_coverage(cx, size))


def _make_texture(seed: int, size: int = FRAME_SIZE) -> np.ndarray:
    """Smooth tileable colour texture in a mid-brightness range."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, size=(size, size, 3))
    # circular box blur keeps the texture tileable
    for _ in range(3):
        base = sum(np.roll(np.roll(base, dy, 0), dx, 1)
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
    lo, hi = base.min(), base.max()
    base = (base - lo) / max(hi - lo, 1e-9)
    return (40.0 + 140.0 * base).astype(np.float64)


def wrapped_delta(new: float, old: float) -> float:
    """Displacement new-old on the unit ring, in [-0.5, 0.5)."""
    return ((new - old + 0.5) % 1.0) - 0.5


# scroll direction index -> (dy, dx) in pixels
SCROLL_DIRS = np.array([(0, 1), (0, -1), (1, 0), (-1, 0)], dtype=np.int64)


class SpriteWorld:
    """Homogeneous or heterogeneous 32x32x3 sprite environment."""

    frame_shape = (FRAME_SIZE, FRAME_SIZE, 3)
    action_dim = 2
    episode_len = SPRITE_EPISODE_LEN

    def __init__(self, mode: str, oracle: bool = False,
                 bank: np.ndarray | None = None, texture_seed: int = 7):
        if mode not in ("homogeneous", "heterogeneous"):
            raise ConfigError(f"unknown sprite-world mode {mode!r}")
        self.mode = mode
        self.oracle = oracle
        if mode == "homogeneous":
            self._bank = make_default_bank() if bank is None else np.asarray(bank, dtype=np.float32)
            if self._bank.shape[1] < self.episode_len:
                raise ConfigError("bank sequences shorter than the episode length")
            self._texture = None
        else:
            self._bank = None
            self._texture = _make_texture(texture_seed)
        self._state = None

    @property
    def oracle_action_dim(self) -> int:
        return 2 if self.mode == "homogeneous" else 4

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        agent_pos = rng.uniform(0.0, 1.0, size=2)
        if self.mode == "homogeneous":
            # keep starting centres apart so footprints are unambiguous early on
            while True:
                dist_pos = rng.uniform(0.0, 1.0, size=2)
                gap = np.hypot(wrapped_delta(dist_pos[0], agent_pos[0]),
                               wrapped_delta(dist_pos[1], agent_pos[1]))
                if gap > 0.3:
                    break
            script = self._bank[rng.integers(0, self._bank.shape[0])]
            self._state = {
                "agent_pos": agent_pos, "agent_vel": np.zeros(2),
                "dist_pos": dist_pos, "dist_vel": np.zeros(2),
                "script": script, "t": 0,
            }
        else:
            n_blocks = -(-self.episode_len // SCROLL_PERIOD)
            dirs = rng.integers(0, 4, size=n_blocks)
            self._state = {
                "agent_pos": agent_pos, "agent_vel": np.zeros(2),
                "phase": np.array([0, 0], dtype=np.int64),
                "dirs": dirs, "t": 0,
            }
        return self.render()

    # -- dynamics ----------------------------------------------------------

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self._state is None:
            raise ContractError("step before reset")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,):
            raise ContractError(f"sprite-world action must have dim 2, got shape {a.shape}")
        a = np.clip(a, -1.0, 1.0)
        s = self._state
        old_x = s["agent_pos"][0]
        s["agent_vel"] = DAMPING * s["agent_vel"] + GAIN * a
        s["agent_pos"] = (s["agent_pos"] + s["agent_vel"]) % 1.0
        if self.mode == "homogeneous":
            da = s["script"][s["t"]]
            s["dist_vel"] = DAMPING * s["dist_vel"] + GAIN * da
            s["dist_pos"] = (s["dist_pos"] + s["dist_vel"]) % 1.0
        else:
            d = s["dirs"][s["t"] // SCROLL_PERIOD]
            s["phase"] = (s["phase"] + SCROLL_SPEED * SCROLL_DIRS[d]) % FRAME_SIZE
        s["t"] += 1
        reward = float(np.clip(10.0 * wrapped_delta(s["agent_pos"][0], old_x), -1.0, 1.0))
        done = s["t"] >= self.episode_len
        return self.render(), reward, done

    def oracle_distractor_action(self, t: int):
        if not self.oracle:
            raise OracleAccessError("environment was constructed with oracle=False")
        if self._state is None:
            raise ContractError("oracle query before reset")
        if not 0 <= t < self.episode_len:
            raise ContractError(f"step index {t} out of range")
        if self.mode == "homogeneous":
            return self._state["script"][t].copy()
        return int(self._state["dirs"][t // SCROLL_PERIOD])

    def encode_distractor_action(self, raw) -> np.ndarray:
        """Oracle action as a real vector (continuous kept raw, indices one-hot)."""
        if self.mode == "homogeneous":
            return np.asarray(raw, dtype=np.float32)
        out = np.zeros(4, dtype=np.float32)
        out[int(raw)] = 1.0
        return out

    # -- rendering (pure in the hidden state) ------------------------------

    def render(self) -> np.ndarray:
        s = self._state
        if self.mode == "homogeneous":
            return self.render_homogeneous(s["agent_pos"], s["dist_pos"])
        tex = np.roll(np.roll(self._texture, s["phase"][0], axis=0), s["phase"][1], axis=1)
        cov = sprite_coverage(s["agent_pos"])[..., None]
        frame = (1.0 - cov) * tex + cov * 255.0
        return np.clip(np.rint(frame), 0, 255).astype(np.uint8)

    @staticmethod
    def render_homogeneous(agent_pos, dist_pos) -> np.ndarray:
        cov = np.maximum(sprite_coverage(agent_pos), sprite_coverage(dist_pos))
        frame = np.repeat((cov * 255.0)[..., None], 3, axis=2)
        return np.clip(np.rint(frame), 0, 255).astype(np.uint8)

    # -- evaluation-only introspection --------------------------------------

    def sprite_footprints(self) -> tuple[np.ndarray, np.ndarray]:
        """Boolean (agent, distractor) pixel masks; overlap excluded from both."""
        s = self._state
        agent = sprite_coverage(s["agent_pos"]) > 0.5
        if self.mode == "homogeneous":
            dist = sprite_coverage(s["dist_pos"]) > 0.5
            both = agent & dist
            return agent & ~both, dist & ~both
        return agent, ~agent

    def agent_position(self) -> np.ndarray:
        return self._state["agent_pos"].copy()

    def distractor_position(self) -> np.ndarray:
        if self.mode != "homogeneous":
            raise ContractError("distractor position only defined for homogeneous mode")
        return self._state["dist_pos"].copy()


class MicroWorld:
    """Enumerable 4-state chain world; frame rows are (agent, distractor) one-hots.

    The agent walks a saturating chain (action 1 right, 0 left). Each
    distractor action sends the distractor to its own anchor cell (action 0
    to cell 0, action 1 to cell 2) regardless of where it was, so the action
    is identifiable from the transition alone; rewards read the agent
    transition only.
    """

    frame_shape = (2, 4, 1)
    action_dim = 2  # actions are indices {0,1}, encoded one-hot for learners
    episode_len = MICRO_EPISODE_LEN
    n_states = 4

    def __init__(self, oracle: bool = False):
        self.mode = "micro"
        self.oracle = oracle
        self._state = None

    @property
    def oracle_action_dim(self) -> int:
        return 2

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._state = {
            "agent": int(rng.integers(0, 4)),
            "dist": int(rng.integers(0, 4)),
            "script": rng.integers(0, 2, size=self.episode_len),
            "t": 0,
        }
        return self.render()

    @staticmethod
    def _advance_agent(state: int, action: int) -> int:
        return min(state + 1, 3) if action == 1 else max(state - 1, 0)

    @staticmethod
    def _advance_dist(state: int, action: int) -> int:
        return 2 * action

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self._state is None:
            raise ContractError("step before reset")
        a = int(np.asarray(action).reshape(()))
        if a not in (0, 1):
            raise ContractError(f"micro-world action must be 0 or 1, got {action!r}")
        s = self._state
        prev_agent = s["agent"]
        s["agent"] = self._advance_agent(prev_agent, a)
        s["dist"] = self._advance_dist(s["dist"], int(s["script"][s["t"]]))
        s["t"] += 1
        reward = 0.2 * (s["agent"] - prev_agent)
        done = s["t"] >= self.episode_len
        return self.render(), reward, done

    def oracle_distractor_action(self, t: int) -> int:
        if not self.oracle:
            raise OracleAccessError("environment was constructed with oracle=False")
        if not 0 <= t < self.episode_len:
            raise ContractError(f"step index {t} out of range")
        return int(self._state["script"][t])

    def encode_distractor_action(self, raw) -> np.ndarray:
        out = np.zeros(2, dtype=np.float32)
        out[int(raw)] = 1.0
        return out

    def encode_action(self, a: int) -> np.ndarray:
        out = np.zeros(2, dtype=np.float32)
        out[int(a)] = 1.0
        return out

    def render(self) -> np.ndarray:
        return self.render_states(self._state["agent"], self._state["dist"])

    @staticmethod
    def render_states(agent: int, dist: int) -> np.ndarray:
        frame = np.zeros((2, 4, 1), dtype=np.uint8)
        frame[0, agent, 0] = 255
        frame[1, dist, 0] = 255
        return frame

    def enumerate_transitions(self):
        """All 64 (frame, agent one-hot, next frame, distractor action) tuples."""
        frames_t, actions, frames_next, gt = [], [], [], []
        for s_plus in range(4):
            for a in range(2):
                for s_minus in range(4):
                    for a_minus in range(2):
                        frames_t.append(self.render_states(s_plus, s_minus))
                        actions.append(self.encode_action(a))
                        frames_next.append(self.render_states(
                            self._advance_agent(s_plus, a),
                            self._advance_dist(s_minus, a_minus)))
                        gt.append(a_minus)
        return (np.stack(frames_t), np.stack(actions),
                np.stack(frames_next), np.asarray(gt, dtype=np.int64))


def make_env(mode: str, oracle: bool = False, bank_path: str = ""):
    """Build an environment from config keys ``env.mode`` / ``env.oracle`` / ``env.bank``."""
    if mode == "micro":
        return MicroWorld(oracle=oracle)
    if mode in ("homogeneous", "heterogeneous"):
        bank = load_action_bank(bank_path) if (bank_path and mode == "homogeneous") else None
        return SpriteWorld(mode, oracle=oracle, bank=bank)
    raise ConfigError(f"unknown env mode {mode!r}")
