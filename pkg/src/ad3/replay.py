"""Episodic replay buffer with sequence sampling and implicit-action annotation.

Episodes are immutable except for the implicit-action channel, which the
implicit-action generator rewrites in full after each of its training
sessions (stamped with a strictly increasing version). Unannotated episodes
carry the sentinel version 0 so world-model sampling can filter them out.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BufferNotReady, ContractError, StaleAnnotationError

EPISODE_MAGIC = b"AD3EPIS1"


def onehot_blocks_valid(vec: np.ndarray, d: int) -> bool:
    """True iff ``vec`` is d concatenated one-hot blocks of size d."""
    v = np.asarray(vec)
    if v.shape[-1] != d * d:
        return False
    blocks = v.reshape(*v.shape[:-1], d, d)
    binary = np.isin(blocks, (0, 1)) | np.isclose(blocks, 0) | np.isclose(blocks, 1)
    return bool(binary.all() and np.allclose(blocks.sum(-1), 1.0))


@dataclass
class EpisodeRecord:
    frames: np.ndarray                     # (T+1, H, W, C) uint8
    agent_actions: np.ndarray              # (T, A) float32
    rewards: np.ndarray                    # (T,) float32
    gt_distractor_actions: np.ndarray | None = None   # (T, D) float32, oracle channel
    implicit_actions: np.ndarray | None = None        # (T, K) float32
    iag_version: int = 0

    def __post_init__(self):
        t = len(self.agent_actions)
        if len(self.frames) != t + 1:
            raise ContractError(f"frames length {len(self.frames)} != T+1 = {t + 1}")
        if len(self.rewards) != t:
            raise ContractError("rewards length != T")
        if self.gt_distractor_actions is not None and len(self.gt_distractor_actions) != t:
            raise ContractError("gt_distractor_actions length != T")
        if self.implicit_actions is not None:
            if len(self.implicit_actions) != t:
                raise ContractError("implicit_actions length != T")
            if self.iag_version <= 0:
                raise ContractError("annotated episode requires iag_version > 0")
        elif self.iag_version != 0:
            raise ContractError("iag_version > 0 without implicit_actions")

    @property
    def length(self) -> int:
        return len(self.agent_actions)


@dataclass
class SegmentBatch:
    """Aligned per-transition channels for ``batch`` segments of ``length`` steps."""

    frames: np.ndarray                 # (B, L+1, H, W, C)
    agent_actions: np.ndarray          # (B, L, A)
    rewards: np.ndarray                # (B, L)
    gt_distractor_actions: np.ndarray | None
    implicit_actions: np.ndarray | None
    iag_versions: np.ndarray           # (B,)
    episode_ids: np.ndarray            # (B,)
    starts: np.ndarray                 # (B,)


class ReplayBuffer:
    def __init__(self, capacity: int = 500):
        self.capacity = capacity
        self._episodes: dict[int, EpisodeRecord] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._episodes)

    @property
    def episode_ids(self) -> list[int]:
        return sorted(self._episodes)

    def get(self, ep_id: int) -> EpisodeRecord:
        return self._episodes[ep_id]

    def add_episode(self, rec: EpisodeRecord) -> int:
        ep_id = self._next_id
        self._next_id += 1
        self._episodes[ep_id] = rec
        while len(self._episodes) > self.capacity:
            oldest = min(self._episodes)
            del self._episodes[oldest]
        return ep_id

    def annotate(self, ep_id: int, implicit_actions: np.ndarray, iag_version: int,
                 onehot_d: int | None = None) -> None:
        rec = self._episodes[ep_id]
        acts = np.asarray(implicit_actions, dtype=np.float32)
        if len(acts) != rec.length:
            raise ContractError(f"annotation length {len(acts)} != T = {rec.length}")
        if iag_version < rec.iag_version:
            raise StaleAnnotationError(
                f"episode {ep_id} already at version {rec.iag_version}, got {iag_version}")
        if onehot_d is not None and not onehot_blocks_valid(acts, onehot_d):
            raise ContractError("annotation is not a valid one-hot-block vector")
        rec.implicit_actions = acts
        rec.iag_version = iag_version

    def min_iag_version(self) -> int:
        if not self._episodes:
            raise BufferNotReady("empty buffer")
        return min(rec.iag_version for rec in self._episodes.values())

    def n_transitions(self) -> int:
        return sum(rec.length for rec in self._episodes.values())

    def sample_segments(self, batch: int, length: int, require_annotation: bool,
                        rng: np.random.Generator) -> SegmentBatch:
        pool = [(ep_id, rec) for ep_id, rec in sorted(self._episodes.items())
                if rec.length >= length and (not require_annotation or rec.iag_version > 0)]
        if not pool:
            raise BufferNotReady("no eligible episodes for sampling")
        # uniform over valid (episode, start) pairs
        counts = np.array([rec.length - length + 1 for _, rec in pool])
        cum = np.cumsum(counts)
        draws = rng.integers(0, cum[-1], size=batch)
        ep_idx = np.searchsorted(cum, draws, side="right")
        starts = draws - np.concatenate([[0], cum[:-1]])[ep_idx]

        frames, actions, rewards, gts, imps, vers, ids = [], [], [], [], [], [], []
        for k in range(batch):
            ep_id, rec = pool[ep_idx[k]]
            s = int(starts[k])
            frames.append(rec.frames[s:s + length + 1])
            actions.append(rec.agent_actions[s:s + length])
            rewards.append(rec.rewards[s:s + length])
            if rec.gt_distractor_actions is not None:
                gts.append(rec.gt_distractor_actions[s:s + length])
            if rec.implicit_actions is not None:
                imps.append(rec.implicit_actions[s:s + length])
            vers.append(rec.iag_version)
            ids.append(ep_id)
        return SegmentBatch(
            frames=np.stack(frames),
            agent_actions=np.stack(actions),
            rewards=np.stack(rewards),
            gt_distractor_actions=np.stack(gts) if len(gts) == batch else None,
            implicit_actions=np.stack(imps) if len(imps) == batch else None,
            iag_versions=np.asarray(vers, dtype=np.int64),
            episode_ids=np.asarray(ids, dtype=np.int64),
            starts=np.asarray(starts, dtype=np.int64),
        )


# ---------------------------------------------------------------------------
# Optional on-disk persistence: one file per episode
# ---------------------------------------------------------------------------

_CHANNELS = ("frames", "agent_actions", "rewards", "gt_distractor_actions", "implicit_actions")


def save_episode(path, rec: EpisodeRecord) -> None:
    manifest = {"iag_version": rec.iag_version, "arrays": {}}
    blobs = []
    offset = 0
    for name in _CHANNELS:
        arr = getattr(rec, name)
        if arr is None:
            continue
        arr = np.ascontiguousarray(arr)
        manifest["arrays"][name] = {
            "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset,
        }
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_episode(path) -> EpisodeRecord:
    with open(path, "rb") as f:
        if f.read(8) != EPISODE_MAGIC:
            raise ContractError(f"{path}: not an episode file")
        (hlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(hlen))
        payload = f.read()
    fields = {"iag_version": manifest["iag_version"]}
    for name, meta in manifest["arrays"].items():
        arr = np.frombuffer(payload, dtype=meta["dtype"], offset=meta["offset"],
                            count=int(np.prod(meta["shape"]))).reshape(meta["shape"])
        fields[name] = arr.copy()
    return EpisodeRecord(**fields)
