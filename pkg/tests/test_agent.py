import numpy as np
import pytest
import torch

from ad3.agent import ActorCritic, AgentConfig, AgentTrainer, lambda_returns
from ad3.approx import ParamSet, grad_check, precision
from ad3.errors import ContractError
from ad3.worldmodel import RssmState, WmConfig, WorldModel


def make_pair(seed=0):
    torch.manual_seed(seed)
    wm = WorldModel(WmConfig(frame_shape=(2, 4, 1), action_dims={"plus": 2, "minus": 4},
                             h_dim=8, z_dim=4, embed_dim=8, hidden_dim=8))
    ac = ActorCritic(AgentConfig(action_dim=2, feature_dim=12, hidden_dim=16, horizon=3))
    return wm, ac


def start_state(wm, batch=4, seed=1):
    g = torch.Generator().manual_seed(seed)
    state = wm.plus.initial_state(batch)
    return wm.plus.prior_step(state, torch.zeros(batch, 2), generator=g)


# ---------------------------------------------------------------------------
# acting
# ---------------------------------------------------------------------------

def test_eval_mode_deterministic_and_bounded():
    wm, ac = make_pair()
    s = start_state(wm)
    a1 = ac.act(s, mode="eval")
    a2 = ac.act(s, mode="eval")
    assert torch.equal(a1, a2)
    assert (a1.abs() < 1).all()


def test_explore_mode_bounded():
    wm, ac = make_pair()
    s = start_state(wm)
    for seed in range(5):
        a = ac.act(s, mode="explore", generator=torch.Generator().manual_seed(seed),
                   expl_sigma=0.3)
        assert (a > -1).all() and (a < 1).all()


def test_minus_state_rejected():
    wm, ac = make_pair()
    bad = wm.minus.initial_state(2)
    with pytest.raises(ContractError):
        ac.act(bad, mode="eval")


def test_exploration_sigma_schedule():
    _, ac = make_pair()
    assert ac.expl_sigma(0, 1000) == pytest.approx(0.3)
    assert ac.expl_sigma(500, 1000) == pytest.approx(0.2)
    assert ac.expl_sigma(1000, 1000) == pytest.approx(0.1)
    assert ac.expl_sigma(2000, 1000) == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# imagination
# ---------------------------------------------------------------------------

def test_imagine_zero_horizon():
    wm, ac = make_pair()
    roll = ac.imagine(wm, start_state(wm), horizon=0)
    assert len(roll.states) == 1
    assert roll.actions is None and roll.rewards is None


def test_imagine_frozen_noise_deterministic():
    wm, ac = make_pair()
    s = start_state(wm)
    r1 = ac.imagine(wm, s, 4, generator=torch.Generator().manual_seed(7))
    r2 = ac.imagine(wm, s, 4, generator=torch.Generator().manual_seed(7))
    assert torch.equal(r1.rewards, r2.rewards)
    assert torch.equal(r1.actions, r2.actions)


def test_imagine_matches_hand_rollout():
    """Replaying the exact (act, prior, reward) chain by hand reproduces the
    imagined reward sequence."""
    wm, ac = make_pair(seed=3)
    s0 = start_state(wm, batch=2, seed=5)
    roll = ac.imagine(wm, s0, 3, generator=torch.Generator().manual_seed(11))

    g = torch.Generator().manual_seed(11)
    state = s0.detached()
    rewards = []
    for _ in range(3):
        a = ac.rsample_action(state, generator=g)
        state = wm.plus.prior_step(state, a, generator=g)
        rewards.append(wm.predict_reward(state))
    assert torch.allclose(roll.rewards, torch.stack(rewards))


def test_imagined_states_detached_from_start():
    wm, ac = make_pair()
    s = start_state(wm)
    roll = ac.imagine(wm, s, 2, generator=torch.Generator().manual_seed(0))
    assert not roll.states[0].h.requires_grad


# ---------------------------------------------------------------------------
# lambda returns
# ---------------------------------------------------------------------------

def test_lambda_return_constant_reward():
    rewards = torch.ones(3, 1)
    values = torch.zeros(4, 1)
    ret = lambda_returns(rewards, values, gamma=0.99, lam=1.0)
    assert torch.allclose(ret[0], torch.tensor([1 + 0.99 + 0.99 ** 2]))


def test_lambda_zero_is_one_step_target():
    g = torch.Generator().manual_seed(0)
    rewards = torch.randn(5, 3, generator=g)
    values = torch.randn(6, 3, generator=g)
    ret = lambda_returns(rewards, values, gamma=0.9, lam=0.0)
    assert torch.allclose(ret, rewards + 0.9 * values[1:])


def test_zero_rewards_zero_values_zero_returns():
    ret = lambda_returns(torch.zeros(4, 2), torch.zeros(5, 2), 0.99, 0.95)
    assert torch.equal(ret, torch.zeros(4, 2))


def test_lambda_return_matches_bruteforce_recursion():
    g = torch.Generator().manual_seed(4)
    rewards = torch.randn(5, 2, generator=g).double()
    values = torch.randn(6, 2, generator=g).double()
    gamma, lam = 0.97, 0.9
    ret = lambda_returns(rewards, values, gamma, lam)

    def brute(k, b):
        if k == 5:
            return float(values[5, b])
        return float(rewards[k, b]) + gamma * (
            (1 - lam) * float(values[k + 1, b]) + lam * brute(k + 1, b))

    for k in range(5):
        for b in range(2):
            assert abs(float(ret[k, b]) - brute(k, b)) < 1e-6


# ---------------------------------------------------------------------------
# updates and isolation
# ---------------------------------------------------------------------------

def test_actor_gradient_flows_through_dynamics():
    wm, ac = make_pair(seed=9)
    # nontrivial value head is required for a nonzero path
    roll = ac.imagine(wm, start_state(wm), 2, generator=torch.Generator().manual_seed(1))
    loss = ac.actor_loss(roll)
    grads = torch.autograd.grad(loss, list(ac.actor.parameters()), allow_unused=True)
    total = sum(g.abs().sum() for g in grads if g is not None)
    assert float(total) > 0


def test_actor_loss_has_no_minus_gradient():
    wm, ac = make_pair(seed=10)
    roll = ac.imagine(wm, start_state(wm), 2, generator=torch.Generator().manual_seed(2))
    loss = ac.actor_loss(roll)
    grads = torch.autograd.grad(loss, list(wm.minus.parameters()), allow_unused=True)
    assert all(g is None or torch.all(g == 0) for g in grads)


def test_update_syncs_target_critic():
    wm, ac = make_pair(seed=11)
    ac.cfg.target_every = 2
    trainer = AgentTrainer(ac)
    s = start_state(wm)
    trainer.update(wm, s, generator=torch.Generator().manual_seed(0))
    same = all(torch.equal(a, b) for a, b in
               zip(ac.critic.parameters(), ac.target_critic.parameters()))
    assert not same
    trainer.update(wm, s, generator=torch.Generator().manual_seed(1))
    same = all(torch.equal(a, b) for a, b in
               zip(ac.critic.parameters(), ac.target_critic.parameters()))
    assert same


def test_zero_reward_zero_critic_gives_zero_losses():
    wm, ac = make_pair(seed=12)
    with torch.no_grad():
        for head in (ac.critic, ac.target_critic):
            for p in head.parameters():
                p.zero_()
        wm.reward_head.layers[-1].weight.zero_()
        wm.reward_head.layers[-1].bias.zero_()
    roll = ac.imagine(wm, start_state(wm), 3, generator=torch.Generator().manual_seed(3))
    assert torch.allclose(roll.rewards, torch.zeros_like(roll.rewards))
    assert float(ac.critic_loss(roll).detach()) == 0.0


def test_actor_critic_gradients_match_finite_differences():
    """Acceptance criterion 1c: actor and critic losses through 2-step
    imagination, frozen noise, tiny nets."""
    with precision("float64"):
        wm, _ = (None, None)
        torch.manual_seed(0)
        wm = WorldModel(WmConfig(frame_shape=(2, 4, 1),
                                 action_dims={"plus": 2, "minus": 4},
                                 h_dim=6, z_dim=3, embed_dim=6, hidden_dim=6)).double()
        ac = ActorCritic(AgentConfig(action_dim=2, feature_dim=9, hidden_dim=8,
                                     horizon=2)).double()
        start = wm.plus.prior_step(wm.plus.initial_state(3), torch.zeros(3, 2),
                                   generator=torch.Generator().manual_seed(1))

        def actor_loss():
            roll = ac.imagine(wm, start, 2, generator=torch.Generator().manual_seed(2))
            return ac.actor_loss(roll)

        res = grad_check(actor_loss, ParamSet("actor", {"actor": ac.actor}), n_coords=120)
        assert res.max_rel_err <= 1e-3, (res.worst_param, res.max_rel_err)

        fixed_roll = ac.imagine(wm, start, 2, generator=torch.Generator().manual_seed(3))
        fixed_roll.rewards.detach_()

        def critic_loss():
            return ac.critic_loss(fixed_roll)

        res = grad_check(critic_loss, ParamSet("critic", {"critic": ac.critic}),
                         n_coords=120)
        assert res.max_rel_err <= 1e-3, (res.worst_param, res.max_rel_err)
