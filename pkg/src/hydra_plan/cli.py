"""Command-line entry point tying the pipeline together.

Subcommands mirror the pipeline stages; `run` executes the whole chain with
content-addressed caching so unchanged stages are skipped.  `vocab` and
`simulate` also work standalone on explicit files.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import metrics as metrics_mod
from . import pipeline as pipeline_mod
from . import vocab as vocab_mod
from . import world as world_mod
from .errors import ConfigurationError, IntegrityError, PipelineError
from .train import ExperimentConfig, load_experiment_config


def _load_config(args) -> ExperimentConfig:
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, base_seed=args.seed)
    return config


def _add_common(parser, out_required=True):
    parser.add_argument("--config", help="experiment config file (key/value sections)")
    parser.add_argument("--seed", type=int, default=None, help="override base seed")
    parser.add_argument("--out-dir", required=out_required, help="run output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hydra-plan",
        description="trajectory-vocabulary planner with rule-based metric distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vocab", help="build the trajectory vocabulary")
    _add_common(p, out_required=False)
    p.add_argument("--n", type=int, default=None, help="number of sampled trajectories")
    p.add_argument("--k", type=int, default=None, help="vocabulary size")
    p.add_argument("--out", default=None, help="write the vocabulary to this file instead "
                                               "of the run directory")

    for name, help_text in (
        ("build-data", "generate scenarios, observations and imitation targets"),
        ("fit", "train the configured model variants"),
        ("search-weights", "grid-search cost weights on the validation split"),
        ("eval", "evaluate the configured ablations on the test split"),
        ("report", "aggregate evaluation results into the comparison table"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("simulate", help="teacher-simulate a vocabulary against scenarios")
    p.add_argument("--scenarios", help="a .scn.jsonl file (standalone mode)")
    p.add_argument("--vocab", help="a vocabulary file (standalone mode)")
    p.add_argument("--out", help="label store prefix (standalone mode)")
    _add_common(p, out_required=False)

    p = sub.add_parser("run", help="run the full pipeline")
    _add_common(p)
    p.add_argument("--stages", nargs="*", default=None,
                   help=f"subset of stages to run (default: all of {', '.join(pipeline_mod.STAGES)})")
    return parser


def _cmd_vocab(args):
    config = _load_config(args)
    if args.n is not None:
        config = replace(config, vocab_samples=args.n)
    if args.k is not None:
        config = replace(config, vocab_size=args.k)
    if args.seed is not None:
        config = replace(config, vocab_seed=args.seed)
    if args.out:
        from .train import build_vocabulary

        vocab = build_vocabulary(config)
        digest = vocab_mod.save_vocabulary(args.out, vocab, provenance={
            "seed": config.vocab_seed, "n_samples": config.vocab_samples,
            "kinematics": config.kinematics.to_dict(),
            "tool_version": pipeline_mod.TOOL_VERSION,
        })
        print(f"wrote {args.out} ({len(vocab)} entries, hash {digest[:12]})")
        return 0
    if not args.out_dir:
        raise ConfigurationError("vocab: provide --out or --out-dir")
    pipeline_mod.run_pipeline(config, args.out_dir, stages=["vocab"])
    return 0


def _cmd_simulate(args):
    if args.scenarios or args.vocab or args.out:
        if not (args.scenarios and args.vocab and args.out):
            raise ConfigurationError("simulate: --scenarios, --vocab and --out go together")
        config = _load_config(args)
        scenarios = world_mod.load_scenarios(args.scenarios)
        vocab = vocab_mod.load_vocabulary(args.vocab)
        ego_dims = (config.world.ego_half_length, config.world.ego_half_width)
        labels = [
            metrics_mod.simulate_vocabulary(s, vocab, ego_dims=ego_dims,
                                            limits=config.limits, tau=config.tau)
            for s in scenarios
        ]
        metrics_mod.save_labels(args.out, labels)
        print(f"wrote {args.out}.npy / {args.out}.json ({len(labels)} scenarios)")
        return 0
    if not args.out_dir:
        raise ConfigurationError("simulate: provide --out-dir or standalone file arguments")
    config = _load_config(args)
    pipeline_mod.run_pipeline(config, args.out_dir,
                              stages=["vocab", "build-data", "simulate"])
    return 0


_STAGE_CHAINS = {
    "build-data": ["vocab", "build-data"],
    "fit": ["vocab", "build-data", "simulate", "fit"],
    "search-weights": ["vocab", "build-data", "simulate", "fit", "search-weights"],
    "eval": ["vocab", "build-data", "simulate", "fit", "search-weights", "eval"],
    "report": ["vocab", "build-data", "simulate", "fit", "search-weights", "eval", "report"],
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "vocab":
            return _cmd_vocab(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        config = _load_config(args)
        if args.command == "run":
            run = pipeline_mod.run_pipeline(config, args.out_dir, stages=args.stages)
            table = os.path.join(run.out_dir, "report", "table.txt")
            if os.path.exists(table) and (not args.stages or "report" in args.stages):
                with open(table) as fh:
                    print(fh.read(), end="")
            return 0
        run = pipeline_mod.run_pipeline(config, args.out_dir,
                                        stages=_STAGE_CHAINS[args.command])
        if args.command == "report":
            with open(os.path.join(run.out_dir, "report", "table.txt")) as fh:
                print(fh.read(), end="")
        return 0
    except (ConfigurationError, IntegrityError, PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
