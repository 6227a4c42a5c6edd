"""Command line entry point: ``lipflow <subcommand>``.

Subcommands: make-data, pretrain-speechae, train, generate, bench, ablate.
Every top-level :class:`ExperimentConfig` field has a matching flag
(``--stage2-lr``, ``--batch-size`` ...); nested fields are set with
``--set backbone.width=64``. ``--config`` loads a JSON config first and
``--profile desk`` starts from the desk-scale profile.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, evalbench, pipeline
from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger("lipflow")

_SCALARS = (int, float, str, bool)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment config")
    g.add_argument("--config", help="JSON config file (see `lipflow show-config`)")
    g.add_argument("--profile", choices=("default", "desk"), default="default",
                   help="starting point before --config and flags are applied")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any field, nested ones with dots, e.g. backbone.width=64")
    for f in dataclasses.fields(pipeline.ExperimentConfig):
        if f.type in ("int", "float", "str", "bool"):
            kind = {"int": int, "float": float, "str": str, "bool": _parse_bool}[f.type]
            g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=kind, default=None)


def _coerce(old, value: str):
    if isinstance(old, bool):
        return _parse_bool(value)
    if isinstance(old, (int, float, str)):
        return type(old)(value)
    if old is None or isinstance(old, (list, tuple)):
        v = json.loads(value)
        return tuple(v) if isinstance(old, tuple) else v
    raise ValueError(f"cannot set a field of type {type(old).__name__}")


def _set_path(d: dict, key: str, value: str) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        if p not in d or not isinstance(d[p], dict):
            raise SystemExit(f"unknown config section {key!r}")
        d = d[p]
    if parts[-1] not in d:
        raise SystemExit(f"unknown config field {key!r}")
    d[parts[-1]] = _coerce(d[parts[-1]], value)


def build_config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.desk_config() if args.profile == "desk" else pipeline.ExperimentConfig()
    d = cfg.to_dict()
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        for k, v in loaded.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        _set_path(d, *item.split("=", 1))
    for f in dataclasses.fields(pipeline.ExperimentConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            d[f.name] = v
    cfg = pipeline.ExperimentConfig.from_dict(d)
    cfg.validate()
    return cfg


def cmd_show_config(args) -> int:
    print(json.dumps(build_config(args).to_dict(), indent=2))
    return 0


def cmd_make_data(args) -> int:
    cfg = build_config(args)
    out = args.out or cfg.corpus
    feats = pipeline.feature_config(cfg)
    data.make_dataset(cfg.corpus_clips, out, seed=cfg.corpus_seed, n_frames=cfg.corpus_frames,
                      H=cfg.height, W=cfg.width, features=feats)
    print(f"wrote {cfg.corpus_clips} clips to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    path = pipeline.run_stage1(cfg, args.out)
    print(f"stage-1 checkpoint: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    ckpt = pipeline.train_stage2(cfg, load_checkpoint(args.stage1), steps=args.steps)
    path = save_checkpoint(ckpt, args.out)
    print(f"stage-2 checkpoint: {path}")
    return 0


def _load_image(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path).astype(np.float32)
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def cmd_generate(args) -> int:
    system = pipeline.System.from_checkpoint(load_checkpoint(args.ckpt))
    audio = np.load(args.audio) if args.audio.endswith(".npy") else args.audio
    res = pipeline.generate_video(
        system, audio, _load_image(args.reference), n_frames=args.frames, duration=args.duration,
        steps=args.steps, cfg_mode=args.cfg_mode, alpha=args.alpha, beta=args.beta, seed=args.seed,
        out_dir=args.out, motion_guided=not args.concat,
    )
    print(json.dumps(res.info, indent=2))
    return 0


def cmd_bench(args) -> int:
    out = Path(args.out)
    if args.oracle:
        report = evalbench.long_horizon_eval(args.ckpt, n_clips=args.eval_clips, seed=args.seed, oracle=True)
        report.write(out)
        print(report.summary())
        return 0
    sweep = evalbench.runtime_sweep(args.ckpt, steps=range(args.min_steps, args.max_steps + 1),
                                    modes=tuple(args.modes), reps=args.reps, seed=args.seed,
                                    plot=out / "runtime_sweep.png")
    sweep.write(out)
    print(sweep.summary())
    horizon = evalbench.long_horizon_eval(args.ckpt, n_clips=args.eval_clips, seed=args.seed)
    horizon.write(out)
    print(horizon.summary())
    return 0


def cmd_ablate(args) -> int:
    family: dict[str, list] = {}
    for spec in args.arm:
        if "=" not in spec:
            raise SystemExit(f"--arm expects NAME=CKPT[,CKPT...], got {spec!r}")
        name, paths = spec.split("=", 1)
        if name not in evalbench.ARMS:
            raise SystemExit(f"unknown arm {name!r}; choose from {', '.join(evalbench.ARMS)}")
        family[name] = [load_checkpoint(p) for p in paths.split(",") if p]
    report = evalbench.ablate(family, arms=tuple(family), n_clips=args.eval_clips,
                              gen_seeds=tuple(args.gen_seeds))
    report.write(args.out)
    print(report.summary())
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("show-config", help="print the resolved experiment config as JSON")
    add_config_flags(s)
    s.set_defaults(func=cmd_show_config)

    s = sub.add_parser("make-data", help="write the synthetic corpus")
    add_config_flags(s)
    s.add_argument("--out", help="corpus directory (default: config corpus path)")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("pretrain-speechae", help="stage 1: train the codec and pretrain the speech autoencoder")
    add_config_flags(s)
    s.add_argument("--out", required=True, help="stage-1 checkpoint file")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="stage 2: train the backbone")
    add_config_flags(s)
    s.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    s.add_argument("--out", required=True, help="stage-2 checkpoint file")
    s.add_argument("--steps", type=int, help="override stage2_steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="audio + reference image to PNG frames")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--audio", required=True, help="16-bit PCM WAV or .npy speech features (F, H_w, D_A)")
    s.add_argument("--reference", required=True, help="reference image (PNG/JPEG or .npy in [0, 1])")
    s.add_argument("--out", required=True, help="output frame directory")
    s.add_argument("--frames", type=int)
    s.add_argument("--duration", type=float, help="seconds")
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--cfg-mode", choices=("joint", "split", "none"), default="split")
    s.add_argument("--alpha", type=float, default=2.0)
    s.add_argument("--beta", type=float, default=6.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--concat", action="store_true", help="independent clips, no motion guidance")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("bench", help="step/CFG runtime sweep and long-horizon evaluation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--min-steps", type=int, default=4)
    s.add_argument("--max-steps", type=int, default=10)
    s.add_argument("--modes", nargs="+", default=["joint", "split"])
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--eval-clips", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--oracle", action="store_true", help="long-horizon check with the closed-form oracle only")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("ablate", help="score ablation arms")
    s.add_argument("--arm", action="append", required=True, metavar="NAME=CKPT[,CKPT...]")
    s.add_argument("--out", required=True)
    s.add_argument("--eval-clips", type=int, default=8)
    s.add_argument("--gen-seeds", type=int, nargs="+", default=[0])
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
