"""Actor-critic trained purely by imagination in the task-relevant latents.

The actor is a tanh-squashed diagonal Gaussian over agent actions read from
plus-branch states; the critic regresses to lambda-returns computed with a
periodically synced target network, and the actor ascends those returns
through the reparameterized actions and the learned prior dynamics. Nothing
here ever touches a minus-branch state: the state tag is checked at the
entry point.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .approx import Adam, ParamSet, build_map
from .errors import ContractError, NumericsError
from .worldmodel import RssmState, WorldModel


@dataclass
class AgentConfig:
    action_dim: int
    feature_dim: int              # h_dim + z_dim of the plus branch
    hidden_dim: int = 64
    horizon: int = 8
    gamma: float = 0.99
    lam: float = 0.95
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    target_every: int = 100
    expl_sigma_start: float = 0.3
    expl_sigma_end: float = 0.1


@dataclass
class ImaginedRollout:
    states: list                  # H+1 RssmStates, entry 0 is the start
    actions: torch.Tensor | None  # (H, B, A)
    rewards: torch.Tensor | None  # (H, B)


def lambda_returns(rewards: torch.Tensor, values: torch.Tensor,
                   gamma: float, lam: float) -> torch.Tensor:
    """V^lambda over an imagined rollout.

    ``rewards``: (H, B); ``values``: (H+1, B) where values[k] estimates the
    state before reward k and values[H] bootstraps the tail.
    """
    H = rewards.shape[0]
    out = [None] * H
    nxt = values[H]
    for k in reversed(range(H)):
        nxt = rewards[k] + gamma * ((1 - lam) * values[k + 1] + lam * nxt)
        out[k] = nxt
    return torch.stack(out)


class ActorCritic(nn.Module):
    def __init__(self, cfg: AgentConfig):
        super().__init__()
        self.cfg = cfg
        self.actor = build_map({"kind": "mlp",
                                "sizes": [cfg.feature_dim, cfg.hidden_dim, cfg.hidden_dim,
                                          2 * cfg.action_dim],
                                "name": "agent.actor"})
        self.critic = build_map({"kind": "mlp",
                                 "sizes": [cfg.feature_dim, cfg.hidden_dim, cfg.hidden_dim, 1],
                                 "name": "agent.critic"})
        self.target_critic = copy.deepcopy(self.critic)
        for p in self.target_critic.parameters():
            p.requires_grad_(False)
        self._updates = 0

    # -- acting ---------------------------------------------------------------

    def _dist_params(self, state: RssmState):
        if state.branch != "plus":
            raise ContractError("policy reads plus-branch states only")
        mean, raw_std = self.actor(state.feature()).chunk(2, dim=-1)
        std = 0.1 + F.softplus(raw_std)
        return mean, std

    def act(self, state: RssmState, mode: str = "explore",
            generator: torch.Generator | None = None,
            expl_sigma: float | None = None) -> torch.Tensor:
        """Squashed-Gaussian action; explore mode adds scheduled noise."""
        mean, std = self._dist_params(state)
        if mode == "eval":
            return torch.tanh(mean)
        if mode != "explore":
            raise ContractError(f"unknown acting mode {mode!r}")
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        action = torch.tanh(mean + std * eps)
        sigma = self.cfg.expl_sigma_start if expl_sigma is None else expl_sigma
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype) * sigma
        return (action + noise).clamp(-1 + 1e-6, 1 - 1e-6)

    def expl_sigma(self, step: int, total_steps: int) -> float:
        frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
        c = self.cfg
        return c.expl_sigma_start + frac * (c.expl_sigma_end - c.expl_sigma_start)

    def rsample_action(self, state: RssmState,
                       generator: torch.Generator | None = None) -> torch.Tensor:
        """Reparameterized squashed sample (gradients flow into the actor)."""
        mean, std = self._dist_params(state)
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return torch.tanh(mean + std * eps)

    # -- imagination ------------------------------------------------------------

    def imagine(self, wm: WorldModel, start: RssmState, horizon: int,
                generator: torch.Generator | None = None) -> ImaginedRollout:
        """Roll the plus-branch prior under the policy from detached starts."""
        state = start.detached()
        states, actions, rewards = [state], [], []
        for _ in range(horizon):
            a = self.rsample_action(state, generator=generator)
            state = wm.plus.prior_step(state, a, generator=generator)
            actions.append(a)
            rewards.append(wm.predict_reward(state))
            states.append(state)
        if horizon == 0:
            return ImaginedRollout(states=states, actions=None, rewards=None)
        return ImaginedRollout(states=states, actions=torch.stack(actions),
                               rewards=torch.stack(rewards))

    # -- losses -------------------------------------------------------------------

    def actor_loss(self, rollout: ImaginedRollout) -> torch.Tensor:
        feats = torch.stack([s.feature() for s in rollout.states])
        values = self.target_critic(feats).squeeze(-1)
        returns = lambda_returns(rollout.rewards, values, self.cfg.gamma, self.cfg.lam)
        return -returns.mean()

    def critic_loss(self, rollout: ImaginedRollout) -> torch.Tensor:
        feats = torch.stack([s.feature() for s in rollout.states]).detach()
        with torch.no_grad():
            values = self.target_critic(feats).squeeze(-1)
            returns = lambda_returns(rollout.rewards.detach(), values,
                                     self.cfg.gamma, self.cfg.lam)
        pred = self.critic(feats[:-1]).squeeze(-1)
        return F.mse_loss(pred, returns)


class AgentTrainer:
    """Owns the two optimizers and the target-network schedule."""

    def __init__(self, ac: ActorCritic):
        self.ac = ac
        self.actor_params = ParamSet("agent.actor", {"actor": ac.actor})
        self.critic_params = ParamSet("agent.critic", {"critic": ac.critic})
        self.actor_opt = Adam(self.actor_params, lr=ac.cfg.actor_lr)
        self.critic_opt = Adam(self.critic_params, lr=ac.cfg.critic_lr)

    def update(self, wm: WorldModel, start: RssmState,
               generator: torch.Generator | None = None) -> dict:
        ac = self.ac
        rollout = ac.imagine(wm, start, ac.cfg.horizon, generator=generator)
        a_loss = ac.actor_loss(rollout)
        if not torch.isfinite(a_loss):
            raise NumericsError("non-finite actor loss")
        self.actor_params.zero_grad()
        for p in wm.parameters():
            p.grad = None
        a_loss.backward()
        self.actor_opt.step()

        rollout = ImaginedRollout(states=[s.detached() for s in rollout.states],
                                  actions=None, rewards=rollout.rewards.detach())
        c_loss = ac.critic_loss(rollout)
        if not torch.isfinite(c_loss):
            raise NumericsError("non-finite critic loss")
        self.critic_params.zero_grad()
        c_loss.backward()
        self.critic_opt.step()

        ac._updates += 1
        if ac._updates % ac.cfg.target_every == 0:
            ac.target_critic.load_state_dict(ac.critic.state_dict())
        return {"actor_loss": float(a_loss.detach()), "critic_loss": float(c_loss.detach())}
