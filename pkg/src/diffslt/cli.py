"""Command-line entry point: ``diffslt <subcommand> [flags]``.

Every subcommand reads a config file (``--config``, default the run's own
``config.txt``), applies ``--set key=value`` and shortcut flags, and works in
``--run-dir`` (default ``$DIFFSLT_RUN_DIR/default``).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from diffslt import pipeline as P
from diffslt.checkpoint import CheckpointError
from diffslt.config import ConfigError, RunConfig, parse_pairs

EXIT_USAGE = 2
EXIT_PREREQ = 3
TRAINING_COMMANDS = {"gen-data", "pretrain-visual", "pretrain-ae", "train-diffusion"}

# shortcut flag -> config key
SHORTCUTS = {
    "n_candidates": "n_candidates",
    "sampler": "sampler",
    "steps": "sampling_steps",
    "cfg": "cfg_scale",
    "eta": "eta",
    "seed": "seed",
    "mode": "mode",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=("diffslt", "diffslt_p"), default=None)
    return p


def _sampling() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--n-candidates", dest="n_candidates", type=int, default=None)
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffslt", description="toy latent-diffusion sign translation")
    sub = parser.add_subparsers(dest="command", required=True)
    common, sampling = _common(), _sampling()
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("pretrain-visual", parents=[common], help="stage 1: visual encoder")
    sub.add_parser("pretrain-ae", parents=[common], help="stage 1: text autoencoder")
    sub.add_parser("train-diffusion", parents=[common], help="stage 2: guidance fusion and denoiser")
    sub.add_parser("translate", parents=[common, sampling], help="sample candidates and select by MBR")
    sub.add_parser("evaluate", parents=[common, sampling], help="write metrics.json")
    ab = sub.add_parser("ablate", parents=[common, sampling], help="run an ablation grid")
    ab.add_argument("kind", choices=P.ABLATION_KINDS)
    ab.add_argument("--seeds", type=int, nargs="+", default=[0])
    ab.add_argument("--limit", type=int, default=None, help="evaluate only the first N sources")
    tr = sub.add_parser("export-trajectory", parents=[common, sampling], help="dump sampler latents with PCA")
    tr.add_argument("--sample", type=int, default=0)
    tr.add_argument("--n-seeds", type=int, default=4)
    tr.add_argument("--out", type=Path, default=None)
    return parser


def resolve_config(args) -> tuple[Path, RunConfig]:
    """Config file, then ``--set`` pairs, then shortcut flags; a key set twice to different values is an error."""
    run_dir = args.run_dir or P.Run.default_dir()
    cfg_file = args.config or (run_dir / "config.txt")
    cfg = RunConfig.load(cfg_file) if cfg_file.exists() else RunConfig()
    if args.config is not None and not args.config.exists():
        raise ConfigError(f"config file {args.config} does not exist")
    sets = parse_pairs("\n".join(args.overrides))
    flags = {}
    for attr, key in SHORTCUTS.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags[key] = str(value)
    for key, value in flags.items():
        if key in sets and RunConfig().with_overrides({key: sets[key]}) != RunConfig().with_overrides({key: value}):
            raise ConfigError(f"conflicting flags: --set {key}={sets[key]} vs shortcut value {value}")
    return run_dir, cfg.with_overrides({**sets, **flags})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run_dir, cfg = resolve_config(args)
        run = P.Run(run_dir, cfg, persist=False)
        run.log({"event": "cli", "command": args.command, "argv": list(argv if argv is not None else sys.argv[1:])})
        result = _dispatch(args, run)
        if args.command in TRAINING_COMMANDS:
            run.cfg.save(run.path("config.txt"))
    except (P.PrerequisiteError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if result is not None:
        print(json.dumps(result, sort_keys=True))
    return 0


def _dispatch(args, run: P.Run):
    cmd = args.command
    if cmd == "gen-data":
        split = P.gen_data(run)
        return {"train": len(split.train), "dev": len(split.dev), "test": len(split.test)}
    if cmd == "pretrain-visual":
        P.pretrain_visual_stage(run)
        return {"checkpoint": str(run.path("visual.ckpt"))}
    if cmd == "pretrain-ae":
        P.pretrain_ae_stage(run)
        return {"checkpoint": str(run.path("ae.ckpt"))}
    if cmd == "train-diffusion":
        P.train_diffusion_stage(run)
        return {"checkpoint": str(run.path("diffusion.ckpt"))}
    models = P.load_models(run, cfg=run.cfg)
    if cmd == "translate":
        sets = P.translate(run, args.split, models=models)
        return {"sources": len(sets), "path": str(run.path("candidates.jsonl"))}
    if cmd == "evaluate":
        report = P.evaluate(run, args.split, models=models)
        return {"bleu4": report["bleu4"]["corpus"], "oracle_bleu4": report["oracle"]["bleu4"],
                "path": str(run.path("metrics.json"))}
    if cmd == "ablate":
        rows = P.ablate(run, args.kind, seeds=tuple(args.seeds), split_name=args.split, limit=args.limit)
        return {"arms": len(rows), "path": str(run.path(f"ablate_{args.kind}.csv"))}
    if cmd == "export-trajectory":
        return P.export_trajectory(run, args.sample, args.n_seeds, args.split, models=models, out=args.out)
    raise ValueError(f"unknown command {cmd!r}")


if __name__ == "__main__":
    sys.exit(main())
