"""Visualization probes: reconstruction strips, implicit-action semantics,
cross-trajectory swaps, and loss-curve comparisons."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .env import SpriteWorld, make_default_bank
from .errors import ContractError
from .iag import Iag, indices_to_onehot, onehot_to_indices
from .metrics import read_metrics
from .worldmodel import WorldModel, _stack_pairs

FRAME_PX = 32


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _tile_rows(rows: list[list[np.ndarray]]) -> np.ndarray:
    """rows of HxWxC uint8 tiles -> one image array."""
    return np.concatenate([np.concatenate(r, axis=1) for r in rows], axis=0)


# ---------------------------------------------------------------------------
# recon strip: (o, o_plus, o_minus, mask) rows per trajectory
# ---------------------------------------------------------------------------

@torch.no_grad()
def recon_strip(wm: WorldModel, episodes: list, out_dir, stride: int = 20) -> list[Path]:
    """``episodes``: list of (frames, agent_actions, minus_actions) channels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (frames, agent_actions, minus_actions) in enumerate(episodes):
        states = wm.observe_episode(frames, agent_actions, minus_actions, sample=False)
        pair = _stack_pairs(states)
        rgb_p, logit_p = wm.plus.decode(pair.plus)
        rgb_m, logit_m = wm.minus.decode(pair.minus)
        w = torch.softmax(torch.cat([logit_p, logit_m], dim=-3), dim=-3)
        m_plus = w[..., :1, :, :]
        o_plus = (m_plus * rgb_p)[0].movedim(-3, -1).numpy()
        o_minus = ((1 - m_plus) * rgb_m)[0].movedim(-3, -1).numpy()
        mask = m_plus[0].movedim(-3, -1).repeat(1, 1, frames.shape[-1]).numpy()
        idxs = list(range(0, len(frames), stride))
        rows = [
            [np.asarray(frames[t]) for t in idxs],
            [_to_u8(o_plus[t]) for t in idxs],
            [_to_u8(o_minus[t]) for t in idxs],
            [_to_u8(mask[t]) for t in idxs],
        ]
        path = out_dir / f"recon_strip_{i}.png"
        Image.fromarray(_tile_rows(rows).squeeze()).save(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# implicit-action semantics: fixed sampled codes rolled through FIAD
# ---------------------------------------------------------------------------

@torch.no_grad()
def action_semantics(iag: Iag, start_frame: np.ndarray, agent_actions: np.ndarray,
                     out_path, n_actions: int = 6, steps: int = 10,
                     seed: int = 0) -> dict:
    """One strip per sampled implicit action, each repeated ``steps`` times."""
    was = iag.training
    iag.eval()
    d = iag.cfg.d
    rng = np.random.default_rng(seed)
    s0 = iag.encode(iag.frames_to_obs(start_frame)[None])
    acts = torch.as_tensor(agent_actions[:steps], dtype=s0.dtype)[None]
    rows, labels = [], []
    for _ in range(n_actions):
        idx = rng.integers(0, d, size=(1, d))
        code = torch.as_tensor(indices_to_onehot(idx, d), dtype=s0.dtype)
        codes = code[None].repeat(1, steps, 1)
        roll = iag.fiad_rollout(s0, acts, codes)
        frames = torch.sigmoid(roll.recon_logits)[0].movedim(-3, -1).numpy()
        rows.append([_to_u8(frames[t]) for t in range(steps + 1)])
        labels.append(list(map(int, idx[0])))
    img = _tile_rows(rows).squeeze()
    Image.fromarray(img).save(out_path)
    iag.train(was)
    return {"labels": labels, "path": str(out_path)}


# ---------------------------------------------------------------------------
# cross-trajectory swap (the disentanglement probe)
# ---------------------------------------------------------------------------

def _probe_actions(kind: int, steps: int) -> np.ndarray:
    t = np.arange(steps)
    if kind == 0:
        a = np.stack([np.cos(0.35 * t), np.sin(0.5 * t + 1.0)], axis=1)
    else:
        a = np.stack([-np.cos(0.3 * t + 0.5), np.sin(0.7 * t + 2.0)], axis=1)
    return np.clip(a, -1, 1).astype(np.float32)


def make_probe_episodes(seed: int = 123, steps: int = 10):
    """Two homogeneous episodes sharing one start state: different agent
    actions and different distractor scripts."""
    eps = []
    for kind, bank_seed in ((0, 501), (1, 502)):
        env = SpriteWorld("homogeneous", oracle=True,
                          bank=make_default_bank(count=4, seq_len=steps + 10,
                                                 seed=bank_seed))
        frames = [env.reset(seed)]
        agent_track, dist_track = [], []
        actions = _probe_actions(kind, steps)
        for a in actions:
            f, _, _ = env.step(a)
            frames.append(f)
            agent_track.append(env.agent_position())
            dist_track.append(env.distractor_position())
        eps.append({"frames": np.stack(frames), "actions": actions,
                    "agent_track": np.stack(agent_track),
                    "dist_track": np.stack(dist_track)})
    return eps


def windowed_com_error(frame01: np.ndarray, ref_unit_xy: np.ndarray,
                       win: int = 11) -> float:
    """Distance in pixels between a reference point and the intensity
    centre-of-mass inside a wrapped window around it."""
    h, w = frame01.shape[:2]
    img = frame01.mean(axis=2) if frame01.ndim == 3 else frame01
    cx, cy = ref_unit_xy[0] * w, ref_unit_xy[1] * h
    half = win // 2
    ys = (np.arange(-half, half + 1) + int(round(cy))) % h
    xs = (np.arange(-half, half + 1) + int(round(cx))) % w
    patch = img[np.ix_(ys, xs)]
    mass = patch.sum()
    if mass < 1e-6:
        return float(win)  # nothing rendered near the reference
    gy = np.arange(-half, half + 1) + int(round(cy))
    gx = np.arange(-half, half + 1) + int(round(cx))
    com_y = (patch.sum(axis=1) * gy).sum() / mass
    com_x = (patch.sum(axis=0) * gx).sum() / mass
    return float(np.hypot(com_x + 0.5 - cx, com_y + 0.5 - cy))


@torch.no_grad()
def cross_swap_probe(iag: Iag, episodes: list | None = None, seed: int = 123,
                     steps: int = 10) -> dict:
    """Roll FIAD with B's agent actions and A's inferred implicit actions.

    Both episodes share the start state, so the synthetic trajectory should
    show A's distractor track and B's agent track. Returns per-direction mean
    centre-of-mass errors (pixels) and the decoded frames.
    """
    was = iag.training
    iag.eval()
    if episodes is None:
        episodes = make_probe_episodes(seed=seed, steps=steps)
    out = {"directions": []}
    for src, tgt in ((0, 1), (1, 0)):
        a_ep, b_ep = episodes[src], episodes[tgt]
        codes = iag.taid_infer(a_ep["frames"][:-1], a_ep["actions"],
                               a_ep["frames"][1:], mode="argmax")
        s0 = iag.encode(iag.frames_to_obs(a_ep["frames"][0])[None])
        acts = torch.as_tensor(b_ep["actions"], dtype=s0.dtype)[None]
        roll = iag.fiad_rollout(s0, acts, codes[None])
        frames = torch.sigmoid(roll.recon_logits)[0].movedim(-3, -1).numpy()
        dist_err = [windowed_com_error(frames[t + 1], a_ep["dist_track"][t])
                    for t in range(steps)]
        agent_err = [windowed_com_error(frames[t + 1], b_ep["agent_track"][t])
                     for t in range(steps)]
        out["directions"].append({
            "implicit_from": src, "agent_from": tgt,
            "dist_com_err_px": float(np.mean(dist_err)),
            "agent_com_err_px": float(np.mean(agent_err)),
            "frames": frames,
            "codes": onehot_to_indices(codes, iag.cfg.d).tolist(),
        })
    iag.train(was)
    return out


def render_cross_swap(probe: dict, episodes: list, out_path) -> Path:
    rows = []
    for direction in probe["directions"]:
        src = direction["implicit_from"]
        tgt = direction["agent_from"]
        rows.append([np.asarray(f) for f in episodes[src]["frames"][1:]])
        rows.append([np.asarray(f) for f in episodes[tgt]["frames"][1:]])
        rows.append([_to_u8(f) for f in direction["frames"][1:]])
    Image.fromarray(_tile_rows(rows).squeeze()).save(out_path)
    return Path(out_path)


# ---------------------------------------------------------------------------
# loss curves (categorical vs VQ)
# ---------------------------------------------------------------------------

def loss_curves(metrics_paths: dict, out_path) -> Path:
    """``metrics_paths``: label -> metrics.jsonl path; plots the three IAG
    loss terms for each label."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    terms = ("iag_cycle", "iag_diff_recon", "iag_onestep_recon")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    found = False
    for label, path in metrics_paths.items():
        recs = [m for m in read_metrics(path) if m["kind"] == "iag_update"]
        if not recs:
            continue
        found = True
        for ax, term in zip(axes, terms):
            ax.plot([m[term] for m in recs], label=label)
    if not found:
        raise ContractError("no iag_update records found in the given metrics files")
    for ax, term in zip(axes, terms):
        ax.set_title(term.replace("iag_", ""))
        ax.set_xlabel("update")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)
