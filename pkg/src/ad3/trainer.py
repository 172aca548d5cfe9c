"""The interleaved training loop: collect, infer implicit actions, update the
separated world models, update the policy by imagination.

Action-type variants differ only in the vector fed to the minus branch:
``iag`` uses buffer annotations, ``agent_action`` copies the agent's action,
``no_action`` feeds a constant zero, ``ground_truth`` feeds the oracle
distractor action. Everything else in the loop is identical across variants.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import torch

from .agent import ActorCritic, AgentConfig, AgentTrainer
from .approx import Adam, ParamSet
from .checkpoint import restore_components, save_checkpoint
from .config import RunConfig
from .env import make_env
from .errors import BufferNotReady, ConfigError, ContractError, NumericsError
from .iag import Iag, IagConfig, train_iag
from .metrics import MetricsRecord, MetricsWriter
from .replay import EpisodeRecord, ReplayBuffer
from .worldmodel import RssmState, WmConfig, WorldModel, mask_separation


def _episode_seed(cfg_seed: int, env_seed: int, index: int, eval_run: bool = False) -> int:
    ss = np.random.SeedSequence([cfg_seed, env_seed, 1_000_000 if eval_run else 0, index])
    return int(ss.generate_state(1)[0])


def minus_action_dim(config: RunConfig, env) -> int:
    variant = config["variant"]
    if variant == "iag":
        d = config["iag.d"]
        return d * d if config["iag.bottleneck"] == "categorical" else d
    if variant == "agent_action":
        return env.action_dim
    if variant == "no_action":
        return 1
    return env.oracle_action_dim


class Trainer:
    def __init__(self, config: RunConfig, out_dir=None):
        self.config = config
        self.out_dir = Path(out_dir if out_dir is not None else config["out_dir"])
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(config["seed"])

        self.variant = config["variant"]
        oracle = config["env.oracle"] or self.variant == "ground_truth"
        if self.variant == "ground_truth" and not config["env.oracle"]:
            raise ConfigError("variant=ground_truth requires env.oracle=true")
        self.env = make_env(config["env.mode"], oracle=oracle, bank_path=config["env.bank"])
        self.eval_env = make_env(config["env.mode"], oracle=oracle,
                                 bank_path=config["env.bank"])

        self.buffer = ReplayBuffer(capacity=config["replay.capacity"])

        frame_shape = self.env.frame_shape
        self.iag = None
        self._iag_opt = None
        if self.variant == "iag":
            self.iag = Iag(IagConfig(
                d=config["iag.d"], frame_shape=frame_shape, action_dim=self.env.action_dim,
                feature_dim=config["iag.feature_dim"], hidden_dim=config["iag.hidden_dim"],
                rollout_len=config["iag.rollout_len"], lr=config["iag.lr"],
                batch=config["iag.batch"], cycle=config["iag.cycle"],
                bottleneck=config["iag.bottleneck"],
                use_agent_action=config["iag.use_agent_action"],
                use_cycle=config["iag.use_cycle"],
                use_diff_recon=config["iag.use_diff_recon"],
                use_onestep_recon=config["iag.use_onestep_recon"]))

        self.wm = WorldModel(WmConfig(
            frame_shape=frame_shape,
            action_dims={"plus": self.env.action_dim,
                         "minus": minus_action_dim(config, self.env)},
            h_dim=config["wm.h_dim"], z_dim=config["wm.z_dim"],
            embed_dim=config["wm.embed_dim"], hidden_dim=config["wm.hidden_dim"],
            free_nats=config["wm.free_nats"], lr=config["wm.lr"],
            batch=config["wm.batch"], seq_len=config["wm.seq_len"],
            encoder_channels=config.channels("wm.enc_channels"),
            decoder_channels=config.channels("wm.dec_channels")))
        self._wm_params = ParamSet("wm", dict(self.wm.named_children()))
        self._wm_opt = Adam(self._wm_params, lr=config["wm.lr"])

        self.ac = ActorCritic(AgentConfig(
            action_dim=self.env.action_dim,
            feature_dim=config["wm.h_dim"] + config["wm.z_dim"],
            horizon=config["agent.horizon"], gamma=config["agent.gamma"],
            lam=config["agent.lambda"], actor_lr=config["agent.actor_lr"],
            critic_lr=config["agent.critic_lr"], target_every=config["agent.target_every"],
            expl_sigma_start=config["agent.expl_sigma_start"],
            expl_sigma_end=config["agent.expl_sigma_end"]))
        self._ac_trainer = AgentTrainer(self.ac)

        self.torch_gen = torch.Generator().manual_seed(config["seed"])
        self.np_rng = np.random.default_rng(np.random.SeedSequence([config["seed"], 7]))
        self.env_step = 0
        self.metrics = MetricsWriter(self.out_dir / "metrics.jsonl")
        self._t0 = time.time()
        self.last_minus_batch = None  # instrumentation for variant-wiring tests

    # -- helpers --------------------------------------------------------------

    def _now(self) -> float:
        return time.time() - self._t0

    def _record(self, kind: str, **fields) -> None:
        self.metrics.write(MetricsRecord(
            env_step=self.env_step, wallclock=self._now(), kind=kind,
            iag_version=self.iag.version if self.iag else 0, **fields))

    def _env_action(self, vec: np.ndarray):
        if self.env.mode == "micro":
            return int(np.argmax(vec))
        return vec

    def _store_action(self, vec: np.ndarray) -> np.ndarray:
        if self.env.mode == "micro":
            return self.env.encode_action(int(np.argmax(vec)))
        return np.asarray(vec, dtype=np.float32)

    def _random_action(self) -> np.ndarray:
        return self.np_rng.uniform(-1.0, 1.0, size=self.env.action_dim).astype(np.float32)

    def minus_actions_for(self, seg) -> np.ndarray:
        """Variant wiring for the minus branch's action channel."""
        b, l = seg.agent_actions.shape[:2]
        if self.variant == "iag":
            if seg.implicit_actions is None:
                raise ContractError("iag variant requires annotated segments")
            versions = set(seg.iag_versions.tolist())
            if len(versions) != 1:
                raise ContractError(f"mixed iag versions in one batch: {versions}")
            out = seg.implicit_actions
        elif self.variant == "agent_action":
            out = seg.agent_actions
        elif self.variant == "no_action":
            out = np.zeros((b, l, 1), dtype=np.float32)
        else:
            if seg.gt_distractor_actions is None:
                raise ContractError("ground_truth variant requires the oracle channel")
            out = seg.gt_distractor_actions
        self.last_minus_batch = out
        return out

    # -- acting ---------------------------------------------------------------

    def _begin_episode(self, env, seed: int, explore: bool):
        frame = env.reset(seed)
        state = self.wm.plus.initial_state(1)
        state = self._filter(env, state, np.zeros(env.action_dim, dtype=np.float32),
                             frame, explore)
        return frame, state

    def _filter(self, env, state, stored_action, frame, explore: bool):
        with torch.no_grad():
            obs = self.wm.frames_to_obs(frame)[None]
            embed = self.wm.plus.embed(obs)
            act = torch.as_tensor(stored_action, dtype=obs.dtype)[None]
            state, _ = self.wm.plus.posterior_step(
                state, act, embed,
                generator=self.torch_gen if explore else None, sample=explore)
        return state

    def _policy_action(self, state, explore: bool) -> np.ndarray:
        with torch.no_grad():
            if explore:
                sigma = self.ac.expl_sigma(self.env_step, self.config["total_env_steps"])
                a = self.ac.act(state, "explore", generator=self.torch_gen,
                                expl_sigma=sigma)
            else:
                a = self.ac.act(state, "eval")
        return a[0].numpy().astype(np.float32)

    # -- main loop --------------------------------------------------------------

    def run(self) -> dict:
        cfg = self.config
        total = cfg["total_env_steps"]
        warmup = cfg["train.warmup_steps"]
        update_every = cfg["train.update_every"]
        session_every = cfg["iag.session_every"]

        try:
            ep_index = 0
            frame, state = self._begin_episode(
                self.env, _episode_seed(cfg["seed"], cfg["env.seed"], ep_index), True)
            ep = {"frames": [frame], "actions": [], "rewards": [], "gt": []}
            while self.env_step < total:
                explore_ready = self.env_step >= warmup
                vec = (self._policy_action(state, True) if explore_ready
                       else self._random_action())
                stored = self._store_action(vec)
                t_in_ep = len(ep["actions"])
                next_frame, reward, done = self.env.step(self._env_action(vec))
                if self.env.oracle:
                    ep["gt"].append(self.env.encode_distractor_action(
                        self.env.oracle_distractor_action(t_in_ep)))
                ep["frames"].append(next_frame)
                ep["actions"].append(stored)
                ep["rewards"].append(reward)
                self.env_step += 1
                state = self._filter(self.env, state, stored, next_frame, True)

                if done:
                    rec = EpisodeRecord(
                        frames=np.stack(ep["frames"]),
                        agent_actions=np.stack(ep["actions"]),
                        rewards=np.asarray(ep["rewards"], dtype=np.float32),
                        gt_distractor_actions=(np.stack(ep["gt"]) if ep["gt"] else None))
                    self.buffer.add_episode(rec)
                    self._record("episode", train_return=float(np.sum(rec.rewards)))
                    ep_index += 1
                    frame, state = self._begin_episode(
                        self.env, _episode_seed(cfg["seed"], cfg["env.seed"], ep_index), True)
                    ep = {"frames": [frame], "actions": [], "rewards": [], "gt": []}

                past_warmup = self.env_step >= warmup
                if (self.iag is not None and past_warmup
                        and (self.env_step - warmup) % session_every == 0):
                    self._iag_session()
                if past_warmup and self.env_step % update_every == 0:
                    self._update_models()
                if self.env_step % cfg["eval_every"] == 0:
                    self._evaluate()
        except NumericsError:
            self.save()
            self.metrics.close()
            raise
        self.save()
        result = self._evaluate(final=True)
        self.metrics.close()
        return result

    # -- update blocks ------------------------------------------------------------

    def _iag_session(self) -> None:
        try:
            metrics, self._iag_opt = train_iag(
                self.iag, self.buffer, self.config["iag.steps_per_session"],
                np_rng=self.np_rng, generator=self.torch_gen,
                opt=self._iag_opt)
        except BufferNotReady:
            return
        for i, h in enumerate(metrics["history"]):
            if i % 10 == 0 or i == len(metrics["history"]) - 1:
                self._record("iag_update", iag_cycle=h["cycle"],
                             iag_diff_recon=h["diff_recon"],
                             iag_onestep_recon=h["onestep_recon"], iag_total=h["total"])

    def _update_models(self) -> None:
        cfg = self.config
        try:
            seg = self.buffer.sample_segments(
                cfg["wm.batch"], cfg["wm.seq_len"],
                require_annotation=(self.variant == "iag"), rng=self.np_rng)
        except BufferNotReady:
            return
        minus = self.minus_actions_for(seg)
        self._wm_params.zero_grad()
        terms, states = self.wm.loss(seg.frames, seg.agent_actions, minus,
                                     seg.rewards, generator=self.torch_gen,
                                     return_states=True)
        if not torch.isfinite(terms.total):
            raise NumericsError("non-finite world-model loss")
        terms.total.backward()
        self._wm_opt.step()
        f = terms.floats()
        self._record("wm_update", wm_recon=f["recon"], wm_kl_plus=f["kl_plus"],
                     wm_kl_minus=f["kl_minus"], wm_reward_nll=f["reward_nll"],
                     wm_total=f["total"])

        starts = self._imagination_starts(states)
        ac_metrics = self._ac_trainer.update(self.wm, starts, generator=self.torch_gen)
        self._record("ac_update", **ac_metrics)

    def _imagination_starts(self, states):
        h = torch.cat([p.plus.h for p in states], dim=0).detach()
        z = torch.cat([p.plus.z for p in states], dim=0).detach()
        n = min(self.config["agent.imag_starts"], h.shape[0])
        idx = torch.randperm(h.shape[0], generator=self.torch_gen)[:n]
        return RssmState("plus", h[idx], z[idx])

    # -- evaluation ------------------------------------------------------------------

    def _eval_minus_channel(self, rec: EpisodeRecord) -> np.ndarray:
        if self.variant == "iag":
            with torch.no_grad():
                was = self.iag.training
                self.iag.eval()
                codes = self.iag.taid_infer(rec.frames[:-1], rec.agent_actions,
                                            rec.frames[1:], mode="argmax")
                self.iag.train(was)
            return codes.cpu().numpy().astype(np.float32)
        if self.variant == "agent_action":
            return rec.agent_actions
        if self.variant == "no_action":
            return np.zeros((rec.length, 1), dtype=np.float32)
        return rec.gt_distractor_actions

    def run_eval_episode(self, seed: int):
        env = self.eval_env
        frame = env.reset(seed)
        state = self.wm.plus.initial_state(1)
        state = self._filter(env, state, np.zeros(env.action_dim, dtype=np.float32),
                             frame, explore=False)
        frames, actions, rewards, gts, feet = [frame], [], [], [], []
        done = False
        t = 0
        while not done:
            vec = self._policy_action(state, explore=False)
            stored = self._store_action(vec)
            next_frame, reward, done = env.step(self._env_action(vec))
            if env.oracle:
                gts.append(env.encode_distractor_action(env.oracle_distractor_action(t)))
            if env.mode != "micro":
                feet.append(env.sprite_footprints())
            frames.append(next_frame)
            actions.append(stored)
            rewards.append(reward)
            state = self._filter(env, state, stored, next_frame, explore=False)
            t += 1
        rec = EpisodeRecord(frames=np.stack(frames), agent_actions=np.stack(actions),
                            rewards=np.asarray(rewards, dtype=np.float32),
                            gt_distractor_actions=np.stack(gts) if gts else None)
        return rec, feet

    def _evaluate(self, final: bool = False) -> dict:
        n = self.config["eval_episodes"]
        returns, seps = [], []
        for i in range(n):
            rec, feet = self.run_eval_episode(
                _episode_seed(self.config["seed"], self.config["env.seed"], i, eval_run=True))
            returns.append(float(np.sum(rec.rewards)))
            if i == 0 and self.env.mode != "micro":
                minus = self._eval_minus_channel(rec)
                seps.append(mask_separation(self.wm, rec.frames, rec.agent_actions,
                                            minus, feet)["separation"])
        out = {"eval_return": float(np.mean(returns)),
               "eval_return_std": float(np.std(returns)),
               "separation": float(seps[0]) if seps else None}
        self._record("eval", **out)
        self.metrics.flush()
        return out

    # -- persistence -------------------------------------------------------------------

    def components(self) -> dict:
        comps = {"wm": self.wm, "agent": self.ac}
        if self.iag is not None:
            comps["iag"] = self.iag
        return comps

    def save(self) -> None:
        versions = {"wm": self._wm_params.version,
                    "agent": self.ac._updates,
                    "iag": self.iag.version if self.iag else 0}
        save_checkpoint(self.out_dir, self.components(), versions=versions,
                        config=self.config, env_step=self.env_step)

    def load(self, ckpt_dir) -> dict:
        return restore_components(ckpt_dir, self.components())


def run_training(config: RunConfig, out_dir=None) -> dict:
    """Algorithm entry point: returns the final evaluation metrics."""
    trainer = Trainer(config, out_dir=out_dir)
    return trainer.run()


def eval_policy(ckpt_dir, episodes: int = 10, seed_offset: int = 0):
    """Deterministic evaluation of a stored checkpoint over N episodes."""
    ckpt_dir = Path(ckpt_dir)
    config = RunConfig.from_file(ckpt_dir / "config.txt")
    trainer = Trainer(config, out_dir=ckpt_dir / "eval")
    trainer.load(ckpt_dir)
    returns = []
    for i in range(episodes):
        rec, _ = trainer.run_eval_episode(
            _episode_seed(config["seed"], config["env.seed"], seed_offset + i,
                          eval_run=True))
        returns.append(float(np.sum(rec.rewards)))
    trainer.metrics.close()
    return float(np.mean(returns)), float(np.std(returns))


def annotate_cmd(ckpt_dir) -> int:
    """Re-run the full-buffer annotation sweep machinery on fresh rollouts.

    Collects a handful of random-policy episodes, annotates them with the
    checkpointed IAG, and reports the resulting version stamp.
    """
    from .iag import annotate_buffer

    ckpt_dir = Path(ckpt_dir)
    config = RunConfig.from_file(ckpt_dir / "config.txt")
    if config["variant"] != "iag":
        raise ConfigError("annotate requires an iag-variant checkpoint")
    trainer = Trainer(config, out_dir=ckpt_dir / "annotate")
    manifest = trainer.load(ckpt_dir)
    trainer.iag.version = max(
        (meta["version"] for meta in (manifest or {}).get("arrays", {}).values()
         if meta["module"] == "iag"), default=1)
    for i in range(3):
        rec, _ = trainer.run_eval_episode(_episode_seed(config["seed"], 0, 900 + i))
        trainer.buffer.add_episode(rec)
    annotate_buffer(trainer.iag, trainer.buffer)
    trainer.metrics.close()
    return trainer.buffer.min_iag_version()
