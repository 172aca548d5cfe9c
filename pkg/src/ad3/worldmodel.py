"""Action-conditioned separated world models.

Two structurally independent recurrent state-space models filter the same
frames: the task branch ("plus") is driven by agent actions, the distractor
branch ("minus") by whatever vector stands in for the distractor's action
(inferred implicit actions by default). They share nothing except the
composite reconstruction: each branch decodes an image and a mask logit map,
a per-pixel two-way softmax blends them, and the blend is scored under a
unit-variance Gaussian likelihood. Rewards are decoded from the plus branch
alone. The training objective is the evidence lower bound: reconstruction
and reward likelihoods plus one KL(posterior || prior) per branch per step,
KLs clamped below by a free-nat floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .approx import DiagGaussian, build_map, gaussian_nll
from .errors import ContractError

BRANCHES = ("plus", "minus")


@dataclass
class WmConfig:
    frame_shape: tuple               # (H, W, C)
    action_dims: dict                # {"plus": agent dim, "minus": distractor-vector dim}
    h_dim: int = 64
    z_dim: int = 16
    embed_dim: int = 128
    hidden_dim: int = 128
    free_nats: float = 1.0
    lr: float = 3e-4
    batch: int = 16
    seq_len: int = 16
    encoder_channels: tuple = (16, 32, 64)
    decoder_channels: tuple = (32, 16)


@dataclass
class RssmState:
    branch: str
    h: torch.Tensor
    z: torch.Tensor
    dist: DiagGaussian | None = None

    def feature(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], dim=-1)

    def detached(self) -> "RssmState":
        return RssmState(self.branch, self.h.detach(), self.z.detach(), None)


@dataclass
class LatentPair:
    plus: RssmState
    minus: RssmState


@dataclass
class ElboTerms:
    recon: torch.Tensor
    kl_plus: torch.Tensor
    kl_minus: torch.Tensor
    reward_nll: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in
                ("recon", "kl_plus", "kl_minus", "reward_nll", "total")}


class RssmBranch(nn.Module):
    """One recurrent state-space model: encoder, cell, prior/posterior heads,
    image+mask decoder."""

    def __init__(self, cfg: WmConfig, branch: str):
        super().__init__()
        self.branch = branch
        self.action_dim = cfg.action_dims[branch]
        self.h_dim, self.z_dim = cfg.h_dim, cfg.z_dim
        h, w, c = cfg.frame_shape
        self._conv = h >= 16 and w >= 16
        if self._conv:
            self.encoder = build_map({"kind": "conv_encoder", "in_shape": (c, h, w),
                                      "channels": list(cfg.encoder_channels),
                                      "out_dim": cfg.embed_dim,
                                      "name": f"wm.{branch}.encoder"})
            self.decoder = build_map({"kind": "deconv_decoder",
                                      "in_dim": cfg.h_dim + cfg.z_dim,
                                      "out_shape": (c + 1, h, w),
                                      "channels": list(cfg.decoder_channels),
                                      "name": f"wm.{branch}.decoder"})
        else:
            flat = c * h * w
            self.encoder = build_map({"kind": "mlp", "sizes": [flat, cfg.hidden_dim, cfg.embed_dim],
                                      "name": f"wm.{branch}.encoder"})
            self.decoder = build_map({"kind": "mlp",
                                      "sizes": [cfg.h_dim + cfg.z_dim, cfg.hidden_dim,
                                                (c + 1) * h * w],
                                      "name": f"wm.{branch}.decoder"})
        self.cell = build_map({"kind": "recurrent_cell",
                               "input_dim": cfg.z_dim + self.action_dim,
                               "hidden_dim": cfg.h_dim, "name": f"wm.{branch}.cell"})
        self.prior_head = build_map({"kind": "mlp",
                                     "sizes": [cfg.h_dim, cfg.hidden_dim, 2 * cfg.z_dim],
                                     "name": f"wm.{branch}.prior"})
        self.post_head = build_map({"kind": "mlp",
                                    "sizes": [cfg.h_dim + cfg.embed_dim, cfg.hidden_dim,
                                              2 * cfg.z_dim],
                                    "name": f"wm.{branch}.posterior"})
        self._frame_shape = (c, h, w)

    # -- plumbing -----------------------------------------------------------

    def initial_state(self, batch: int, dtype=None) -> RssmState:
        dtype = dtype or torch.get_default_dtype()
        return RssmState(self.branch,
                         torch.zeros(batch, self.h_dim, dtype=dtype),
                         torch.zeros(batch, self.z_dim, dtype=dtype))

    def embed(self, obs: torch.Tensor) -> torch.Tensor:
        return self.encoder(obs if self._conv else obs.flatten(-3))

    def _check_action(self, action: torch.Tensor) -> None:
        if action.shape[-1] != self.action_dim:
            raise ContractError(
                f"{self.branch} branch expects action dim {self.action_dim}, "
                f"got {action.shape[-1]}")

    def _recurrent(self, prev: RssmState, action: torch.Tensor) -> torch.Tensor:
        if prev.branch != self.branch:
            raise ContractError(f"state from branch {prev.branch!r} fed to {self.branch!r}")
        self._check_action(action)
        return self.cell(torch.cat([prev.z, action], dim=-1), prev.h)

    def _gaussian(self, raw: torch.Tensor) -> DiagGaussian:
        mean, raw_std = raw.chunk(2, dim=-1)
        return DiagGaussian.from_raw(mean, raw_std)

    # -- Eq. filtering steps --------------------------------------------------

    def prior_step(self, prev: RssmState, action: torch.Tensor,
                   generator: torch.Generator | None = None,
                   sample: bool = True) -> RssmState:
        h = self._recurrent(prev, action)
        dist = self._gaussian(self.prior_head(h))
        z = dist.sample(generator) if sample else dist.mean
        return RssmState(self.branch, h, z, dist)

    def posterior_step(self, prev: RssmState, action: torch.Tensor,
                       obs_embed: torch.Tensor,
                       generator: torch.Generator | None = None,
                       sample: bool = True) -> tuple[RssmState, DiagGaussian]:
        """Returns the posterior state and the prior distribution at this step."""
        h = self._recurrent(prev, action)
        prior = self._gaussian(self.prior_head(h))
        post = self._gaussian(self.post_head(torch.cat([h, obs_embed], dim=-1)))
        z = post.sample(generator) if sample else post.mean
        return RssmState(self.branch, h, z, post), prior

    def decode(self, state: RssmState) -> tuple[torch.Tensor, torch.Tensor]:
        """(rgb, mask_logit) for one state; rgb unbounded, mask raw logits."""
        out = self.decoder(state.feature())
        if not self._conv:
            out = out.reshape(*out.shape[:-1], self._frame_shape[0] + 1,
                              *self._frame_shape[1:])
        return out[..., :-1, :, :], out[..., -1:, :, :]


class WorldModel(nn.Module):
    def __init__(self, cfg: WmConfig):
        super().__init__()
        self.cfg = cfg
        self.plus = RssmBranch(cfg, "plus")
        self.minus = RssmBranch(cfg, "minus")
        self.reward_head = build_map({"kind": "mlp",
                                      "sizes": [cfg.h_dim + cfg.z_dim, cfg.hidden_dim, 1],
                                      "name": "wm.reward"})

    def branch(self, name: str) -> RssmBranch:
        if name not in BRANCHES:
            raise ContractError(f"unknown branch {name!r}")
        return self.plus if name == "plus" else self.minus

    def frames_to_obs(self, frames) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(frames))
        return (t.to(torch.get_default_dtype()) / 255.0).movedim(-1, -3)

    # -- composite reconstruction -------------------------------------------

    def composite_decode(self, pair: LatentPair):
        """Blend the two branch decoders through a per-pixel two-way softmax.

        Returns (composite rgb, mask_plus, mask_minus); masks sum to one.
        """
        rgb_p, logit_p = self.plus.decode(pair.plus)
        rgb_m, logit_m = self.minus.decode(pair.minus)
        weights = torch.softmax(torch.cat([logit_p, logit_m], dim=-3), dim=-3)
        m_plus = weights[..., :1, :, :]
        m_minus = weights[..., 1:, :, :]
        return m_plus * rgb_p + m_minus * rgb_m, m_plus, m_minus

    def predict_reward(self, state: RssmState) -> torch.Tensor:
        if state.branch != "plus":
            raise ContractError("reward head reads the plus branch only")
        return self.reward_head(state.feature()).squeeze(-1)

    # -- filtering ------------------------------------------------------------

    def filter_posterior(self, obs, actions: dict, generator=None, sample=True):
        """Run both posterior chains over (B, L+1) observations.

        ``actions[branch]`` has shape (B, L, dim). Returns per-step LatentPairs
        and per-branch KL(posterior || prior) tensors of shape (L+1, B).
        """
        B, Lp1 = obs.shape[:2]
        states, kls = [], {"plus": [], "minus": []}
        embeds = {b: self.branch(b).embed(obs) for b in BRANCHES}
        prev = {b: self.branch(b).initial_state(B, dtype=obs.dtype) for b in BRANCHES}
        zero_action = {b: torch.zeros(B, self.branch(b).action_dim, dtype=obs.dtype)
                       for b in BRANCHES}
        for t in range(Lp1):
            pair = {}
            for b in BRANCHES:
                act = zero_action[b] if t == 0 else actions[b][:, t - 1]
                post, prior = self.branch(b).posterior_step(
                    prev[b], act, embeds[b][:, t], generator=generator, sample=sample)
                kls[b].append(post.dist.kl(prior))
                pair[b] = post
            prev = pair
            states.append(LatentPair(plus=pair["plus"], minus=pair["minus"]))
        return states, {b: torch.stack(kls[b]) for b in BRANCHES}

    def observe_episode(self, frames, agent_actions, implicit_actions,
                        generator=None, sample=True) -> list[LatentPair]:
        """Posterior filtering over one full episode (unbatched channels)."""
        if len(frames) != len(agent_actions) + 1:
            raise ContractError("frames must be one longer than the action channels")
        if len(agent_actions) != len(implicit_actions):
            raise ContractError("agent and implicit action channels misaligned")
        obs = self.frames_to_obs(frames)[None]
        actions = {
            "plus": torch.as_tensor(np.asarray(agent_actions), dtype=obs.dtype)[None],
            "minus": torch.as_tensor(np.asarray(implicit_actions), dtype=obs.dtype)[None],
        }
        states, _ = self.filter_posterior(obs, actions, generator=generator, sample=sample)
        return states

    # -- training loss ---------------------------------------------------------

    def loss(self, frames, agent_actions, minus_actions, rewards,
             generator=None, return_states: bool = False):
        """ELBO over a segment batch: frames (B, L+1, H, W, C) uint8,
        agent_actions (B, L, ·), minus_actions (B, L, ·), rewards (B, L)."""
        obs = self.frames_to_obs(frames)
        dtype = obs.dtype
        actions = {"plus": torch.as_tensor(np.asarray(agent_actions), dtype=dtype),
                   "minus": torch.as_tensor(np.asarray(minus_actions), dtype=dtype)}
        rew = torch.as_tensor(np.asarray(rewards), dtype=dtype)
        states, kls = self.filter_posterior(obs, actions, generator=generator)

        recon, m_plus, m_minus = self.composite_decode(_stack_pairs(states))
        recon_nll = gaussian_nll(recon, obs, event_dims=3).sum(1).mean()

        free = torch.tensor(self.cfg.free_nats, dtype=dtype)
        kl_p = torch.maximum(kls["plus"], free).sum(0).mean()
        kl_m = torch.maximum(kls["minus"], free).sum(0).mean()

        plus_feats = torch.stack([p.plus.feature() for p in states[1:]], dim=1)
        pred_r = self.reward_head(plus_feats).squeeze(-1)
        reward_nll = gaussian_nll(pred_r, rew, event_dims=0).sum(1).mean()

        total = recon_nll + kl_p + kl_m + reward_nll
        terms = ElboTerms(recon=recon_nll, kl_plus=kl_p, kl_minus=kl_m,
                          reward_nll=reward_nll, total=total)
        return (terms, states) if return_states else terms


def _stack_pairs(states: list[LatentPair]) -> LatentPair:
    """Stack per-step LatentPairs along a time dimension after the batch."""
    def stack(branch_states):
        return RssmState(branch_states[0].branch,
                         torch.stack([s.h for s in branch_states], dim=1),
                         torch.stack([s.z for s in branch_states], dim=1))
    return LatentPair(plus=stack([p.plus for p in states]),
                      minus=stack([p.minus for p in states]))


# ---------------------------------------------------------------------------
# Mask-separation metric (evaluation only)
# ---------------------------------------------------------------------------

@torch.no_grad()
def mask_separation(wm: WorldModel, frames, agent_actions, minus_actions,
                    footprints: list, generator=None) -> dict:
    """Fraction of ground-truth sprite pixels claimed by the correct branch.

    ``footprints`` is a per-frame list of (agent_mask, distractor_mask) bool
    arrays from the environment renderer, aligned with ``frames[1:]``.
    """
    states = wm.observe_episode(frames, agent_actions, minus_actions,
                                generator=generator, sample=False)
    _, m_plus, _ = wm.composite_decode(_stack_pairs(states))
    m_plus = m_plus[0, :, 0].cpu().numpy()  # (L+1, H, W)
    agent_hit = agent_tot = dist_hit = dist_tot = 0
    for t, (agent_fp, dist_fp) in enumerate(footprints):
        m = m_plus[t + 1]
        agent_hit += int((m[agent_fp] > 0.5).sum())
        agent_tot += int(agent_fp.sum())
        dist_hit += int((m[dist_fp] <= 0.5).sum())
        dist_tot += int(dist_fp.sum())
    total = agent_tot + dist_tot
    return {
        "separation": (agent_hit + dist_hit) / max(total, 1),
        "agent_plus_frac": agent_hit / max(agent_tot, 1),
        "distractor_minus_frac": dist_hit / max(dist_tot, 1),
    }
