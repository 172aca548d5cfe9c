"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, ContractError, NumericsError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ad3")
    sub = p.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the training loop")
    train.add_argument("--config", help="key=value config file")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="override a config key (repeatable; wins over file)")

    ablate = sub.add_parser("ablate", help="run a comparison suite")
    ablate.add_argument("--suite", required=True, choices=["action_type", "iag_design"])
    ablate.add_argument("--config", help="base config file")
    ablate.add_argument("--set", action="append", default=[], metavar="KEY=VAL")
    ablate.add_argument("--seeds", default="0,1,2,3")
    ablate.add_argument("--out", default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--episodes", type=int, default=10)

    viz = sub.add_parser("viz", help="emit a visualization probe")
    viz.add_argument("--ckpt", required=True)
    viz.add_argument("--probe", required=True,
                     choices=["recon_strip", "action_semantics", "cross_swap",
                              "loss_curves"])
    viz.add_argument("--metrics", action="append", default=[],
                     metavar="LABEL=PATH", help="metrics files for loss_curves")
    viz.add_argument("--out", default=None)

    ann = sub.add_parser("annotate", help="re-run the buffer annotation sweep")
    ann.add_argument("--ckpt", required=True)
    return p


def _load_config(args) -> RunConfig:
    if args.config:
        return RunConfig.from_file(args.config, set_overrides=args.set)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return RunConfig(overrides)


def _cmd_train(args) -> int:
    from .trainer import run_training

    config = _load_config(args)
    result = run_training(config)
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    from .ablate import run_action_type_suite, run_iag_design_suite

    config = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out_dir = Path(args.out or (Path(config["out_dir"]) / f"ablate_{args.suite}"))
    if args.suite == "action_type":
        report = run_action_type_suite(config, seeds, out_dir)
    else:
        report = run_iag_design_suite(config.copy_with({"variant": "iag"}), seeds, out_dir)
    print((out_dir / "report.txt").read_text())
    return 0


def _cmd_eval(args) -> int:
    from .trainer import eval_policy

    mean, std = eval_policy(args.ckpt, episodes=args.episodes)
    print(json.dumps({"episodes": args.episodes, "mean_return": mean,
                      "std_return": std}, sort_keys=True))
    return 0


def _cmd_viz(args) -> int:
    from . import viz as V
    from .trainer import Trainer

    ckpt_dir = Path(args.ckpt)
    out_dir = Path(args.out or (ckpt_dir / "viz"))
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.probe == "loss_curves":
        paths = {}
        for item in args.metrics:
            if "=" not in item:
                raise ConfigError(f"--metrics expects LABEL=PATH, got {item!r}")
            label, path = item.split("=", 1)
            paths[label] = path
        if not paths:
            default = ckpt_dir / "metrics.jsonl"
            if not default.exists():
                raise ConfigError("loss_curves needs --metrics LABEL=PATH")
            paths = {"run": default}
        out = V.loss_curves(paths, out_dir / "loss_curves.png")
        print(out)
        return 0

    config = RunConfig.from_file(ckpt_dir / "config.txt")
    trainer = Trainer(config, out_dir=out_dir / "scratch")
    trainer.load(ckpt_dir)
    trainer.metrics.close()

    if args.probe == "recon_strip":
        episodes = []
        for i in range(6):
            rec, _ = trainer.run_eval_episode(seed=7000 + i)
            episodes.append((rec.frames, rec.agent_actions,
                             trainer._eval_minus_channel(rec)))
        for p in V.recon_strip(trainer.wm, episodes, out_dir):
            print(p)
        return 0

    if trainer.iag is None:
        raise ConfigError(f"probe {args.probe} requires an iag-variant checkpoint")

    if args.probe == "action_semantics":
        rec, _ = trainer.run_eval_episode(seed=7100)
        out = V.action_semantics(trainer.iag, rec.frames[0], rec.agent_actions,
                                 out_dir / "action_semantics.png")
        print(json.dumps({"labels": out["labels"], "path": out["path"]}))
        return 0

    episodes = V.make_probe_episodes()
    probe = V.cross_swap_probe(trainer.iag, episodes)
    path = V.render_cross_swap(probe, episodes, out_dir / "cross_swap.png")
    summary = [{k: v for k, v in d.items() if k != "frames"}
               for d in probe["directions"]]
    print(json.dumps({"path": str(path), "directions": summary}))
    return 0


def _cmd_annotate(args) -> int:
    from .trainer import annotate_cmd

    version = annotate_cmd(args.ckpt)
    print(json.dumps({"min_iag_version": version}))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"train": _cmd_train, "ablate": _cmd_ablate, "eval": _cmd_eval,
                "viz": _cmd_viz, "annotate": _cmd_annotate}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError,) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
