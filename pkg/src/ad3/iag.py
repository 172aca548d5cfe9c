"""Implicit Action Generator: infer discrete actions of visual distractors.

An inverse model (the encoder path) looks at a transition ``(o_t, a_t,
o_{t+1})`` and emits a discrete code for whatever changed that the agent's
own action cannot explain. A forward model (the decoder path) is then forced
to reproduce the transition from ``(s_t, a_t, code)`` alone, closing the
cycle. Because the code is squeezed through a hard categorical bottleneck
(d one-hot blocks of size d, straight-through gradients), it can only afford
to carry the distractor's motion.

Three loss heads, built multi-step along a short segment rolled out from the
first latent:

* cycle consistency between predicted and encoded next latents,
* pixel-difference reconstruction (multi-scope max-pooled BCE),
* one-step frame reconstruction (BCE).

A vector-quantization bottleneck and a contrastive cycle term are available
as ablation switches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .approx import Adam, ParamSet, build_map
from .errors import ContractError, NumericsError
from .replay import ReplayBuffer


@dataclass
class IagConfig:
    d: int                       # blocks and block size of the categorical action
    frame_shape: tuple           # (H, W, C)
    action_dim: int
    feature_dim: int = 256
    hidden_dim: int = 256
    rollout_len: int = 6
    lr: float = 6e-4
    batch: int = 64
    cycle: str = "cosine"        # "cosine" | "contrastive"
    bottleneck: str = "categorical"  # "categorical" | "vq"
    vq_codebook: int = 20
    proj_dim: int = 512
    contrastive_temp: float = 0.1
    use_agent_action: bool = True
    use_cycle: bool = True
    use_diff_recon: bool = True
    use_onestep_recon: bool = True
    encoder_channels: tuple = (16, 32, 64)

    @property
    def code_dim(self) -> int:
        return self.d * self.d if self.bottleneck == "categorical" else self.d


@dataclass
class IagLossTerms:
    cycle: torch.Tensor
    diff_recon: torch.Tensor
    onestep_recon: torch.Tensor
    total: torch.Tensor
    aux: torch.Tensor  # VQ codebook/commitment terms; zero for categorical

    def floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in
                ("cycle", "diff_recon", "onestep_recon", "total", "aux")}


@dataclass
class FiadRollout:
    latents: torch.Tensor        # (B, L+1, f), entry 0 is the start latent
    diff_logits: torch.Tensor    # (B, L, C, H, W)
    recon_logits: torch.Tensor   # (B, L+1, C, H, W), one-step head on every latent


def sample_categorical(logits: torch.Tensor, d: int,
                       generator: torch.Generator | None = None,
                       mode: str = "sample") -> torch.Tensor:
    """Draw d one-hot blocks from (..., d*d) logits with straight-through grads.

    ``mode="soft"`` skips discretization and returns the softmax probabilities
    (the straight-through backward function); used by the gradient checker.
    """
    if not torch.isfinite(logits).all():
        raise NumericsError("non-finite logits passed to sample_categorical")
    if logits.shape[-1] != d * d:
        raise ContractError(f"logits last dim {logits.shape[-1]} != d*d = {d * d}")
    shape = logits.shape[:-1]
    blocks = logits.reshape(-1, d, d)
    probs = F.softmax(blocks, dim=-1)
    if mode == "soft":
        return probs.reshape(*shape, d * d)
    if mode == "argmax":
        idx = probs.argmax(dim=-1)
    elif mode == "sample":
        idx = torch.multinomial(probs.reshape(-1, d), 1, generator=generator)
        idx = idx.reshape(-1, d)
    else:
        raise ContractError(f"unknown sampling mode {mode!r}")
    hard = F.one_hot(idx, d).to(probs.dtype)
    out = (hard - probs).detach() + probs
    return out.reshape(*shape, d * d)


def onehot_to_indices(code: torch.Tensor | np.ndarray, d: int) -> np.ndarray:
    """Index form of d one-hot blocks: d integers in [0, d)."""
    arr = code.detach().cpu().numpy() if isinstance(code, torch.Tensor) else np.asarray(code)
    return arr.reshape(*arr.shape[:-1], d, d).argmax(-1)


def indices_to_onehot(idx: np.ndarray, d: int) -> np.ndarray:
    idx = np.asarray(idx)
    out = np.zeros((*idx.shape, d), dtype=np.float32)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out.reshape(*idx.shape[:-1], d * d)


class VqBottleneck(nn.Module):
    """Nearest-codebook quantizer with straight-through gradients."""

    def __init__(self, codebook_size: int, dim: int, beta: float = 0.25):
        super().__init__()
        self.embed = nn.Parameter(torch.randn(codebook_size, dim) * 0.5)
        self.beta = beta

    def forward(self, z: torch.Tensor, mode: str = "sample"):
        flat = z.reshape(-1, z.shape[-1])
        dist = (flat.pow(2).sum(-1, keepdim=True)
                - 2 * flat @ self.embed.T
                + self.embed.pow(2).sum(-1))
        idx = dist.argmin(-1)
        quant = self.embed[idx].reshape(z.shape)
        if mode == "soft":
            return z, idx.reshape(z.shape[:-1]), z.new_zeros(())
        aux = F.mse_loss(quant, z.detach()) + self.beta * F.mse_loss(z, quant.detach())
        out = z + (quant - z).detach()
        return out, idx.reshape(z.shape[:-1]), aux


class Iag(nn.Module):
    """TAID encoder + categorical bottleneck + FIAD decoder heads."""

    def __init__(self, cfg: IagConfig):
        super().__init__()
        self.cfg = cfg
        self.version = 0
        h, w, c = cfg.frame_shape
        self._conv = h >= 16 and w >= 16
        f = cfg.feature_dim
        if self._conv:
            self.encoder = build_map({"kind": "conv_encoder", "in_shape": (c, h, w),
                                      "channels": list(cfg.encoder_channels),
                                      "out_dim": f, "norm": "batch", "name": "iag.encoder"})
        else:
            self.encoder = build_map({"kind": "mlp", "sizes": [c * h * w, cfg.hidden_dim, f],
                                      "name": "iag.encoder"})
        self.feat_norm = nn.LayerNorm(f, elementwise_affine=False)
        a_in = cfg.action_dim if cfg.use_agent_action else 0
        head_out = cfg.d * cfg.d if cfg.bottleneck == "categorical" else cfg.d
        self.taid_head = build_map({"kind": "mlp", "sizes": [2 * f + a_in, cfg.hidden_dim, head_out],
                                    "name": "iag.taid_head"})
        if cfg.bottleneck == "categorical":
            # start from uniform code probabilities: the forward model then
            # shapes all code embeddings before the head commits, which keeps
            # the code assignment from freezing into an arbitrary labelling
            with torch.no_grad():
                self.taid_head.layers[-1].weight.zero_()
                self.taid_head.layers[-1].bias.zero_()
        self.vq = VqBottleneck(cfg.vq_codebook, cfg.d) if cfg.bottleneck == "vq" else None
        k = cfg.code_dim
        self.cyc_dyn = build_map({"kind": "mlp",
                                  "sizes": [f + cfg.action_dim + k, cfg.hidden_dim, f],
                                  "name": "iag.cyc_dyn"})
        self.diff_dyn = build_map({"kind": "mlp",
                                   "sizes": [f + cfg.action_dim + k, cfg.hidden_dim, f],
                                   "name": "iag.diff_dyn"})
        if self._conv:
            self.diff_dec = build_map({"kind": "deconv_decoder", "in_dim": f,
                                       "out_shape": (c, h, w), "channels": [32, 16],
                                       "name": "iag.diff_dec"})
            self.onestep_dec = build_map({"kind": "deconv_decoder", "in_dim": f,
                                          "out_shape": (c, h, w), "channels": [32, 16],
                                          "name": "iag.onestep_dec"})
        else:
            self.diff_dec = _MlpImageHead(f, cfg.hidden_dim, (c, h, w), "iag.diff_dec")
            self.onestep_dec = _MlpImageHead(f, cfg.hidden_dim, (c, h, w), "iag.onestep_dec")
        self.proj = (nn.Linear(f, cfg.proj_dim)
                     if cfg.cycle == "contrastive" else None)

    # -- encoding -----------------------------------------------------------

    def frames_to_obs(self, frames: np.ndarray | torch.Tensor) -> torch.Tensor:
        """uint8 (..., H, W, C) -> float (..., C, H, W) in [0, 1]."""
        t = torch.as_tensor(np.asarray(frames)) if not isinstance(frames, torch.Tensor) else frames
        t = t.to(torch.get_default_dtype()) / 255.0
        return t.movedim(-1, -3)

    def encode(self, obs: torch.Tensor) -> torch.Tensor:
        if self._conv:
            feats = self.encoder(obs)
        else:
            feats = self.encoder(obs.flatten(-3))
        return self.feat_norm(feats)

    # -- inference ----------------------------------------------------------

    def infer_logits(self, s_t: torch.Tensor, a_t: torch.Tensor,
                     s_next: torch.Tensor) -> torch.Tensor:
        parts = [s_t, a_t, s_next] if self.cfg.use_agent_action else [s_t, s_next]
        return self.taid_head(torch.cat(parts, dim=-1))

    def bottleneck(self, raw: torch.Tensor, mode: str,
                   generator: torch.Generator | None = None):
        """Returns (code, aux_loss). ``code`` feeds FIAD and the world model."""
        if self.cfg.bottleneck == "categorical":
            return sample_categorical(raw, self.cfg.d, generator, mode), raw.new_zeros(())
        code, _, aux = self.vq(raw, mode)
        return code, aux

    def taid_infer(self, frames_t, a_t, frames_next, mode: str = "argmax",
                   generator: torch.Generator | None = None) -> torch.Tensor:
        """Implicit actions for a batch of transitions (frames as uint8 arrays)."""
        obs_t = self.frames_to_obs(frames_t)
        obs_n = self.frames_to_obs(frames_next)
        a = torch.as_tensor(np.asarray(a_t), dtype=obs_t.dtype)
        raw = self.infer_logits(self.encode(obs_t), a, self.encode(obs_n))
        code, _ = self.bottleneck(raw, mode, generator)
        return code

    # -- forward model ------------------------------------------------------

    def dynamics_step(self, s: torch.Tensor, a: torch.Tensor, code: torch.Tensor,
                      net: nn.Module) -> torch.Tensor:
        return self.feat_norm(net(torch.cat([s, a, code], dim=-1)))

    def fiad_rollout(self, s0: torch.Tensor, agent_actions: torch.Tensor,
                     codes: torch.Tensor) -> FiadRollout:
        """Iterate the cycle dynamics from ``s0`` under both action streams.

        ``agent_actions`` and ``codes`` are (B, L, ...); heads are decoded at
        every step so callers can render predicted differences and frames.
        """
        if agent_actions.shape[1] != codes.shape[1]:
            raise ContractError("agent_actions and codes must have equal length")
        L = agent_actions.shape[1]
        lat = [s0]
        diffs = []
        for t in range(L):
            a_t, c_t = agent_actions[:, t], codes[:, t]
            diffs.append(self.diff_dec(self.dynamics_step(lat[-1], a_t, c_t, self.diff_dyn)))
            lat.append(self.dynamics_step(lat[-1], a_t, c_t, self.cyc_dyn))
        latents = torch.stack(lat, dim=1)
        recon = self.onestep_dec(latents.reshape(-1, latents.shape[-1]))
        recon = recon.reshape(*latents.shape[:2], *recon.shape[1:])
        return FiadRollout(latents=latents, diff_logits=torch.stack(diffs, dim=1),
                           recon_logits=recon)

    # -- loss ---------------------------------------------------------------

    def loss(self, frames, agent_actions, generator: torch.Generator | None = None,
             mode: str = "sample",
             cycle_targets: torch.Tensor | None = None) -> IagLossTerms:
        """Three-part objective on a segment batch.

        ``frames``: uint8 (B, L+1, H, W, C); ``agent_actions``: (B, L, A).
        ``cycle_targets`` overrides the stop-gradient encoder targets with
        pre-computed constants (gradient-check harness).
        """
        obs = self.frames_to_obs(frames)
        acts = torch.as_tensor(np.asarray(agent_actions), dtype=obs.dtype)
        B, Lp1 = obs.shape[:2]
        L = Lp1 - 1
        feats = self.encode(obs)                                    # (B, L+1, f)
        raw = self.infer_logits(feats[:, :-1], acts, feats[:, 1:])  # (B, L, ·)
        codes, aux = self.bottleneck(raw, mode, generator)

        roll = self.fiad_rollout(feats[:, 0], acts, codes)
        zero = obs.new_zeros(())

        if self.cfg.use_cycle:
            targets = feats[:, 1:].detach() if cycle_targets is None else cycle_targets
            pred = roll.latents[:, 1:]
            if self.cfg.cycle == "contrastive":
                cyc = self._contrastive(pred, targets)
            else:
                cyc = (1.0 - F.cosine_similarity(pred, targets, dim=-1)).mean()
        else:
            cyc = zero

        if self.cfg.use_diff_recon:
            diff_target = (obs[:, 1:] - obs[:, :-1] + 1.0) / 2.0
            diff = _multiscope_bce(roll.diff_logits, diff_target)
        else:
            diff = zero

        if self.cfg.use_onestep_recon:
            rec_logits = roll.recon_logits[:, :-1]
            rec = F.binary_cross_entropy_with_logits(rec_logits, obs[:, :-1])
        else:
            rec = zero

        total = cyc + diff + rec
        return IagLossTerms(cycle=cyc, diff_recon=diff, onestep_recon=rec,
                            total=total, aux=aux)

    def _contrastive(self, pred: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        B, L = pred.shape[:2]
        p = F.normalize(self.proj(pred), dim=-1)
        q = F.normalize(self.proj(targets), dim=-1)
        losses = []
        for t in range(L):
            logits = p[:, t] @ q[:, t].T / self.cfg.contrastive_temp
            losses.append(F.cross_entropy(logits, torch.arange(B)))
        return torch.stack(losses).mean()


class _MlpImageHead(nn.Module):
    """MLP decoder to image logits for frames too small for deconvolutions."""

    def __init__(self, in_dim: int, hidden: int, out_shape: tuple, name: str):
        super().__init__()
        self.out_shape = out_shape
        self.net = build_map({"kind": "mlp",
                              "sizes": [in_dim, hidden, int(np.prod(out_shape))],
                              "name": name})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.net(x)
        return out.reshape(*x.shape[:-1], *self.out_shape)


def _multiscope_bce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """BCE at full resolution plus 2x and 4x max-pooled scopes."""
    lead = logits.shape[:-3]
    flat_logits = logits.reshape(-1, *logits.shape[-3:])
    flat_target = target.reshape(-1, *target.shape[-3:])
    total = F.binary_cross_entropy_with_logits(flat_logits, flat_target)
    probs = torch.sigmoid(flat_logits).clamp(1e-6, 1 - 1e-6)
    for k in (2, 4):
        if min(flat_target.shape[-2:]) < k:
            continue
        p = F.max_pool2d(probs, k, ceil_mode=True)
        t = F.max_pool2d(flat_target, k, ceil_mode=True)
        total = total + F.binary_cross_entropy(p, t)
    return total


# ---------------------------------------------------------------------------
# Training session and buffer annotation
# ---------------------------------------------------------------------------

def train_iag(iag: Iag, buffer: ReplayBuffer, update_steps: int,
              np_rng: np.random.Generator, generator: torch.Generator,
              opt: Adam | None = None, batch: int | None = None) -> tuple[dict, Adam]:
    """One training session followed by a full re-annotation sweep.

    Even ``update_steps=0`` bumps the version and re-annotates, so the buffer
    always reflects the current parameters. Pass the returned optimizer back
    in to keep Adam moments across sessions.
    """
    cfg = iag.cfg
    if opt is None:
        opt = Adam(ParamSet("iag", dict(iag.named_children())), lr=cfg.lr)
    params = opt.params
    history = []
    iag.train()
    for _ in range(update_steps):
        seg = buffer.sample_segments(batch or cfg.batch, cfg.rollout_len,
                                     require_annotation=False, rng=np_rng)
        terms = iag.loss(seg.frames, seg.agent_actions, generator=generator)
        params.zero_grad()
        (terms.total + terms.aux).backward()
        opt.step()
        history.append(terms.floats())
    iag.version += 1
    annotate_buffer(iag, buffer)
    return {"steps": update_steps, "history": history, "version": iag.version}, opt


@torch.no_grad()
def annotate_buffer(iag: Iag, buffer: ReplayBuffer, chunk: int = 512) -> None:
    """Write argmax-mode implicit actions onto every stored episode."""
    was_training = iag.training
    iag.eval()
    d = iag.cfg.d if iag.cfg.bottleneck == "categorical" else None
    for ep_id in buffer.episode_ids:
        rec = buffer.get(ep_id)
        codes = []
        for s in range(0, rec.length, chunk):
            e = min(s + chunk, rec.length)
            codes.append(iag.taid_infer(rec.frames[s:e], rec.agent_actions[s:e],
                                        rec.frames[s + 1:e + 1], mode="argmax"))
        acts = torch.cat(codes).cpu().numpy().astype(np.float32)
        buffer.annotate(ep_id, acts, iag.version, onehot_d=d)
    iag.train(was_training)


# ---------------------------------------------------------------------------
# Brute-force confusion-matrix oracle
# ---------------------------------------------------------------------------

@torch.no_grad()
def code_action_accuracy(iag: Iag, frames_t, actions, frames_next, gt_actions) -> float:
    """Majority-mapping accuracy from inferred codes to true distractor actions.

    Enumerates the given transitions, infers argmax codes, assigns each
    distinct code the most frequent ground-truth action among its members,
    and scores the fraction of transitions explained by that assignment.
    """
    was_training = iag.training
    iag.eval()
    codes = iag.taid_infer(frames_t, actions, frames_next, mode="argmax")
    if iag.cfg.bottleneck == "categorical":
        keys = [tuple(row) for row in onehot_to_indices(codes, iag.cfg.d)]
    else:
        flat = codes.reshape(-1, iag.cfg.d)
        dist = (flat.pow(2).sum(-1, keepdim=True) - 2 * flat @ iag.vq.embed.T
                + iag.vq.embed.pow(2).sum(-1))
        keys = [int(i) for i in dist.argmin(-1)]
    iag.train(was_training)
    gt = np.asarray(gt_actions)
    hits = 0
    for key in set(keys):
        members = gt[[i for i, k in enumerate(keys) if k == key]]
        hits += np.bincount(members).max()
    return hits / len(gt)
