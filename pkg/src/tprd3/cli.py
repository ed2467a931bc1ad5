"""Command-line entry point.

Subcommands:
  train           train one run, print the run directory
  eval            evaluate a checkpoint on the held-out pass
  ablate          run the ablation grid over seeds, write ablation.csv
  analyze         dump cosine matrices / heatmaps from a checkpoint
  dump-episodes   print sampled training episodes as JSON lines

Exit codes: 0 success, 1 usage error, 2 bad configuration or input,
3 training diverged.
"""

import argparse
import json
import os
import sys

from . import analysis, checkpoint, trainer
from .config import parse_config, parse_overrides
from .errors import ConfigError, DivergenceError
from .rng import STREAM_INIT, STREAM_TRAIN, make_rng


_USAGE = """usage: tprd3 COMMAND [options] [key=value ...]

commands:
  train           train one run, print the run directory
  eval            evaluate a checkpoint (--ckpt)
  ablate          run the ablation grid, write ablation.csv
  analyze         dump matrices from a checkpoint (--ckpt, --which)
  dump-episodes   print sampled training episodes as JSON lines

run `tprd3 COMMAND --help` for per-command options
"""


def build_parser(command):
    """Standalone parser for one subcommand. Overrides (key=value) may be
    intermixed with flags, which rules out a single subparser tree."""
    p = argparse.ArgumentParser(prog=f"tprd3 {command}")
    p.add_argument("--config", help="key=value lines or a manifest.json")
    p.add_argument("--seed", type=int, help="overrides config and TPRD3_SEED")
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides, applied after --config")
    if command == "train":
        p.add_argument("--out", help="run directory (default: auto under out_dir)")
    elif command == "eval":
        p.add_argument("--ckpt", required=True, help="checkpoint path")
    elif command == "ablate":
        p.add_argument("--out", help="suite directory (default: out_dir)")
        p.add_argument("--seeds", default="0,1111,2222",
                       help="comma-separated seeds (default 0,1111,2222)")
    elif command == "analyze":
        p.add_argument("--ckpt", required=True, help="checkpoint path")
        p.add_argument("--which", required=True,
                       choices=["role", "unbind", "query", "code", "codebook"])
        p.add_argument("--out", help="output directory (default: alongside the checkpoint)")
    elif command == "dump-episodes":
        p.add_argument("--n", type=int, default=1, help="number of episodes")
    return p


def _load_config(args):
    return parse_config(path=args.config,
                        overrides=parse_overrides(args.overrides),
                        seed=args.seed)


def _restore(args):
    """Model + vocab + config for a --ckpt subcommand. The config comes from
    --config when given, else from manifest.json next to the checkpoint."""
    path = args.config
    if path is None:
        path = os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "manifest.json")
        if not os.path.exists(path):
            raise ConfigError(
                f"no manifest.json next to {args.ckpt}; pass --config explicitly")
    cfg = parse_config(path=path, overrides=parse_overrides(args.overrides),
                       seed=args.seed)
    if not os.path.exists(args.ckpt):
        raise ConfigError(f"checkpoint not found: {args.ckpt}")
    vocab, model = trainer.build_model(cfg)
    model.load_arrays(checkpoint.load(args.ckpt))
    return model, vocab, cfg


def cmd_train(args):
    cfg = _load_config(args)
    result = trainer.train(cfg, run_dir=args.out)
    print(result["run_dir"])
    return 0


def cmd_eval(args):
    model, vocab, cfg = _restore(args)
    loss, acc, _, _ = trainer.evaluate(model, vocab, cfg.episode_len, cfg.seed,
                                       batch=cfg.batch)
    print(f"loss={loss:.9g} accuracy={acc:.9g}")
    return 0


def cmd_ablate(args):
    cfg = _load_config(args)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"bad --seeds value {args.seeds!r}")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    _, csv_path = trainer.run_ablation_suite(cfg, seeds=seeds, out_dir=args.out)
    print(csv_path)
    return 0


def cmd_analyze(args):
    model, vocab, _ = _restore(args)
    out_dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)),
                                       "analysis")
    for path in analysis.run_analysis(model, vocab, out_dir, args.which):
        print(path)
    return 0


def cmd_dump_episodes(args):
    from . import sar

    cfg = _load_config(args)
    if args.n < 1:
        raise ConfigError(f"--n must be positive, got {args.n}")
    vocab = sar.make_vocab(cfg.v, make_rng(cfg.seed, STREAM_INIT))
    for i in range(args.n):
        rng = make_rng(cfg.seed, STREAM_TRAIN, i)
        ep = sar.gen_train_episode(vocab, rng, cfg.episode_len)
        print(json.dumps(ep.to_dict(), sort_keys=True))
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "dump-episodes": cmd_dump_episodes,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        print(_USAGE, file=sys.stderr)
        return 1
    if argv[0] in ("-h", "--help"):
        print(_USAGE)
        return 0
    command = argv[0]
    if command not in _COMMANDS:
        print(f"tprd3: unknown command {command!r}\n\n{_USAGE}", file=sys.stderr)
        return 1
    try:
        args = build_parser(command).parse_intermixed_args(argv[1:])
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
