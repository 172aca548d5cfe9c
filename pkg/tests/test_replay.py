import numpy as np
import pytest
from scipy import stats

from ad3.errors import BufferNotReady, ContractError, StaleAnnotationError
from ad3.replay import (
    EpisodeRecord,
    ReplayBuffer,
    load_episode,
    onehot_blocks_valid,
    save_episode,
)


def make_episode(t=20, frame_hw=(4, 4, 1), seed=0, annotated=False, version=1):
    rng = np.random.default_rng(seed)
    rec = EpisodeRecord(
        frames=rng.integers(0, 256, size=(t + 1, *frame_hw)).astype(np.uint8),
        agent_actions=rng.uniform(-1, 1, size=(t, 2)).astype(np.float32),
        rewards=rng.uniform(-1, 1, size=t).astype(np.float32),
    )
    if annotated:
        d = 2
        idx = rng.integers(0, d, size=(t, d))
        acts = np.zeros((t, d * d), dtype=np.float32)
        for i in range(t):
            for b in range(d):
                acts[i, b * d + idx[i, b]] = 1.0
        rec.implicit_actions = acts
        rec.iag_version = version
    return rec


def test_add_and_read_back():
    buf = ReplayBuffer()
    rec = make_episode()
    ep_id = buf.add_episode(rec)
    got = buf.get(ep_id)
    assert np.array_equal(got.frames, rec.frames)
    assert got.iag_version == 0  # unannotated sentinel


def test_fifo_eviction():
    buf = ReplayBuffer(capacity=500)
    ids = [buf.add_episode(make_episode(t=2)) for _ in range(501)]
    assert len(buf) == 500
    assert ids[0] not in buf.episode_ids
    assert ids[1] in buf.episode_ids


def test_misaligned_lengths_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        EpisodeRecord(
            frames=rng.integers(0, 256, size=(5, 2, 2, 1)).astype(np.uint8),
            agent_actions=np.zeros((5, 2), dtype=np.float32),
            rewards=np.zeros(5, dtype=np.float32),
        )


def test_annotation_requires_positive_version():
    rec = make_episode(annotated=True)
    assert rec.iag_version == 1
    with pytest.raises(ContractError):
        EpisodeRecord(
            frames=rec.frames, agent_actions=rec.agent_actions, rewards=rec.rewards,
            implicit_actions=rec.implicit_actions, iag_version=0)


def test_sample_segment_alignment():
    buf = ReplayBuffer()
    rec = make_episode(t=30, seed=3)
    buf.add_episode(rec)
    rng = np.random.default_rng(1)
    seg = buf.sample_segments(batch=8, length=6, require_annotation=False, rng=rng)
    assert seg.frames.shape[:2] == (8, 7)
    assert seg.agent_actions.shape[:2] == (8, 6)
    for k in range(8):
        s = seg.starts[k]
        assert np.array_equal(seg.frames[k], rec.frames[s:s + 7])
        assert np.array_equal(seg.agent_actions[k], rec.agent_actions[s:s + 6])
        # frames[i+1] is the successor of agent_actions[i] in the source episode
        assert np.array_equal(seg.frames[k][1], rec.frames[s + 1])


def test_sample_full_length_forces_start_zero():
    buf = ReplayBuffer()
    buf.add_episode(make_episode(t=10))
    seg = buf.sample_segments(4, 10, False, np.random.default_rng(0))
    assert (seg.starts == 0).all()


def test_sample_uniformity_chi2():
    buf = ReplayBuffer()
    buf.add_episode(make_episode(t=12, seed=0))
    buf.add_episode(make_episode(t=8, seed=1))
    length = 5
    # valid pairs: episode 0 has 8 starts, episode 1 has 4 starts
    rng = np.random.default_rng(7)
    seg = buf.sample_segments(100_000, length, False, rng)
    keys = seg.episode_ids * 100 + seg.starts
    _, counts = np.unique(keys, return_counts=True)
    assert len(counts) == 12
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_not_ready_signal():
    buf = ReplayBuffer()
    with pytest.raises(BufferNotReady):
        buf.sample_segments(1, 5, False, np.random.default_rng(0))
    buf.add_episode(make_episode(t=20))
    with pytest.raises(BufferNotReady):
        buf.sample_segments(1, 5, True, np.random.default_rng(0))  # nothing annotated
    with pytest.raises(BufferNotReady):
        buf.sample_segments(1, 50, False, np.random.default_rng(0))  # too short


def test_annotate_then_sample():
    buf = ReplayBuffer()
    ep_id = buf.add_episode(make_episode(t=20))
    d = 2
    acts = np.tile(np.array([1, 0, 0, 1], dtype=np.float32), (20, 1))
    buf.annotate(ep_id, acts, iag_version=1, onehot_d=d)
    seg = buf.sample_segments(3, 6, True, np.random.default_rng(0))
    assert seg.implicit_actions is not None
    assert (seg.iag_versions == 1).all()
    assert np.array_equal(seg.implicit_actions[0][0], acts[0])


def test_annotate_version_ordering():
    buf = ReplayBuffer()
    ep_id = buf.add_episode(make_episode(t=4))
    acts = np.tile(np.array([0, 1, 1, 0], dtype=np.float32), (4, 1))
    buf.annotate(ep_id, acts, iag_version=1)
    buf.annotate(ep_id, acts, iag_version=2)
    assert buf.get(ep_id).iag_version == 2
    with pytest.raises(StaleAnnotationError):
        buf.annotate(ep_id, acts, iag_version=1)


def test_annotate_rejects_invalid_onehot():
    buf = ReplayBuffer()
    ep_id = buf.add_episode(make_episode(t=4))
    bad = np.full((4, 4), 0.5, dtype=np.float32)
    with pytest.raises(ContractError):
        buf.annotate(ep_id, bad, iag_version=1, onehot_d=2)


def test_onehot_blocks_valid():
    assert onehot_blocks_valid(np.array([1, 0, 0, 1], dtype=np.float32), 2)
    assert not onehot_blocks_valid(np.array([1, 1, 0, 1], dtype=np.float32), 2)
    assert not onehot_blocks_valid(np.array([0.5, 0.5, 0, 1], dtype=np.float32), 2)
    assert not onehot_blocks_valid(np.zeros(3, dtype=np.float32), 2)


def test_episode_persistence_roundtrip(tmp_path):
    rec = make_episode(t=15, annotated=True, version=3, seed=9)
    rec.gt_distractor_actions = np.random.default_rng(0).uniform(-1, 1, (15, 2)).astype(np.float32)
    path = tmp_path / "ep.bin"
    save_episode(path, rec)
    assert path.read_bytes()[:8] == b"AD3EPIS1"
    got = load_episode(path)
    assert got.iag_version == 3
    for name in ("frames", "agent_actions", "rewards", "gt_distractor_actions",
                 "implicit_actions"):
        assert np.array_equal(getattr(got, name), getattr(rec, name)), name
