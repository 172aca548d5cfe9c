import numpy as np
import pytest

from ad3.env import (
    DAMPING,
    GAIN,
    MicroWorld,
    SpriteWorld,
    load_action_bank,
    make_default_bank,
    make_env,
    write_action_bank,
    wrapped_delta,
)
from ad3.errors import ConfigError, ContractError, OracleAccessError


def test_reset_deterministic():
    env = SpriteWorld("homogeneous")
    a = env.reset(7)
    b = env.reset(7)
    assert np.array_equal(a, b)


def test_reset_seed_sensitivity():
    env = SpriteWorld("homogeneous")
    collisions = 0
    for seed in range(100):
        a = env.reset(seed)
        b = env.reset(seed + 1000)
        if np.array_equal(a, b):
            collisions += 1
    assert collisions == 0


def test_micro_reset_layout():
    env = MicroWorld()
    frame = env.reset(0)
    assert frame.shape == (2, 4, 1)
    # each row is a one-hot at 255
    assert sorted(frame[0, :, 0].tolist()) == [0, 0, 0, 255]
    assert sorted(frame[1, :, 0].tolist()) == [0, 0, 0, 255]


def test_zero_action_from_rest():
    env = SpriteWorld("homogeneous")
    env.reset(3)
    p0 = env.agent_position()
    _, r, _ = env.step((0.0, 0.0))
    assert r == 0.0
    assert np.allclose(env.agent_position(), p0)


def test_constant_push_matches_recurrence():
    env = SpriteWorld("heterogeneous")
    env.reset(11)
    v = np.zeros(2)
    x = env.agent_position()
    rewards = []
    expected = []
    for _ in range(10):
        _, r, _ = env.step((1.0, 0.0))
        v = DAMPING * v + GAIN * np.array([1.0, 0.0])
        x_new = (x + v) % 1.0
        expected.append(float(np.clip(10.0 * wrapped_delta(x_new[0], x[0]), -1, 1)))
        x = x_new
        rewards.append(r)
    assert np.allclose(rewards, expected, atol=1e-12)
    assert np.allclose(env.agent_position(), x, atol=1e-12)


def test_reward_ignores_distractor_script():
    bank_a = make_default_bank(count=4, seq_len=220, seed=1)
    bank_b = make_default_bank(count=4, seq_len=220, seed=2)
    rng = np.random.default_rng(0)
    actions = rng.uniform(-1, 1, size=(40, 2))
    rewards = []
    for bank in (bank_a, bank_b):
        env = SpriteWorld("homogeneous", bank=bank)
        env.reset(5)
        rewards.append([env.step(a)[1] for a in actions])
    assert rewards[0] == rewards[1]


def test_factorization_pixel_masks():
    """Swapping the distractor script leaves agent pixels and rewards alone,
    and swapping agent actions leaves distractor pixels alone."""
    rng = np.random.default_rng(42)
    actions = rng.uniform(-1, 1, size=(30, 2))
    bank_a = make_default_bank(count=2, seq_len=220, seed=10)
    bank_b = make_default_bank(count=2, seq_len=220, seed=20)

    def rollout(bank, acts):
        env = SpriteWorld("homogeneous", bank=bank)
        env.reset(9)
        frames, feet = [], []
        for a in acts:
            f, _, _ = env.step(a)
            frames.append(f)
            feet.append(env.sprite_footprints())
        return frames, feet

    f1, m1 = rollout(bank_a, actions)
    f2, m2 = rollout(bank_b, actions)
    for t in range(len(actions)):
        agent_only = m1[t][0] & m2[t][0] & ~m1[t][1] & ~m2[t][1]
        assert np.array_equal(f1[t][agent_only], f2[t][agent_only])

    other_actions = rng.uniform(-1, 1, size=(30, 2))
    f3, m3 = rollout(bank_a, other_actions)
    for t in range(len(actions)):
        dist_only = m1[t][1] & m3[t][1] & ~m1[t][0] & ~m3[t][0]
        assert np.array_equal(f1[t][dist_only], f3[t][dist_only])


def test_homogeneous_sprites_indistinguishable():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, q = rng.uniform(0, 1, size=2), rng.uniform(0, 1, size=2)
        assert np.array_equal(SpriteWorld.render_homogeneous(p, q),
                              SpriteWorld.render_homogeneous(q, p))


def test_oracle_bank_action():
    bank = make_default_bank(count=1, seq_len=220, seed=3)
    env = SpriteWorld("homogeneous", oracle=True, bank=bank)
    env.reset(0)
    assert np.allclose(env.oracle_distractor_action(0), bank[0, 0])
    assert np.allclose(env.oracle_distractor_action(17), bank[0, 17])


def test_oracle_scroll_blocks_constant():
    env = SpriteWorld("heterogeneous", oracle=True)
    env.reset(4)
    for block in range(5):
        vals = {env.oracle_distractor_action(block * 8 + i) for i in range(8)}
        assert len(vals) == 1


def test_oracle_disabled_raises():
    env = SpriteWorld("homogeneous", oracle=False)
    env.reset(0)
    with pytest.raises(OracleAccessError):
        env.oracle_distractor_action(0)


def test_micro_enumeration():
    env = MicroWorld(oracle=True)
    frames_t, actions, frames_next, gt = env.enumerate_transitions()
    assert frames_t.shape == (64, 2, 4, 1)
    assert actions.shape == (64, 2)
    assert gt.shape == (64,)
    # transitions are distinct as (frame_t, action, frame_next) triples except
    # that a_minus is only recoverable from the distractor row change
    keys = {(f.tobytes(), a.tobytes(), g.tobytes())
            for f, a, g in zip(frames_t, actions, frames_next)}
    assert len(keys) == 64


def test_micro_step_and_script():
    env = MicroWorld(oracle=True)
    env.reset(12)
    s0 = env.render().copy()
    frame, r, done = env.step(1)
    a0 = int(np.argmax(s0[0, :, 0]))
    a1 = int(np.argmax(frame[0, :, 0]))
    assert a1 == min(a0 + 1, 3)
    assert r == pytest.approx(0.2 * (a1 - a0))
    assert not done
    # distractor row jumps to the anchor cell of the recorded script action
    a_minus = env.oracle_distractor_action(0)
    assert int(np.argmax(frame[1, :, 0])) == 2 * a_minus


def test_micro_distractor_actions_identifiable():
    """Each distractor action lands in its own state pair, so the transition
    table determines the action from the successor state alone."""
    env = MicroWorld(oracle=True)
    env.reset(0)
    _, _, frames_next, gt = env.enumerate_transitions()
    landing = frames_next[:, 1, :, 0].argmax(1)
    assert ((landing < 2) == (gt == 0)).all()


def test_action_contract_errors():
    env = SpriteWorld("homogeneous")
    env.reset(0)
    with pytest.raises(ContractError):
        env.step([1.0, 0.0, 0.0])
    micro = MicroWorld()
    micro.reset(0)
    with pytest.raises(ContractError):
        micro.step(3)


def test_episode_lengths():
    env = MicroWorld()
    env.reset(0)
    done = False
    steps = 0
    while not done:
        _, _, done = env.step(0)
        steps += 1
    assert steps == 50


def test_bank_roundtrip(tmp_path):
    bank = make_default_bank(count=3, seq_len=210, seed=5)
    path = tmp_path / "bank.bin"
    write_action_bank(path, bank)
    raw = path.read_bytes()
    assert raw[:8] == b"AD3BANK1"
    assert len(raw) == 16 + 3 * 210 * 2 * 4
    loaded = load_action_bank(path)
    assert np.array_equal(loaded, bank)


def test_bank_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTABANK" + b"\x00" * 16)
    with pytest.raises(ConfigError):
        load_action_bank(path)


def test_make_env_modes(tmp_path):
    assert isinstance(make_env("micro"), MicroWorld)
    assert make_env("homogeneous").mode == "homogeneous"
    bank = make_default_bank(count=2, seq_len=220, seed=9)
    path = tmp_path / "bank.bin"
    write_action_bank(path, bank)
    env = make_env("homogeneous", oracle=True, bank_path=str(path))
    env.reset(0)
    assert np.allclose(env.oracle_distractor_action(0), bank[0, 0]) or \
        np.allclose(env.oracle_distractor_action(0), bank[1, 0])
    with pytest.raises(ConfigError):
        make_env("nosuch")
