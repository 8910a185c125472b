"""Command-line entry point: ``metricforge <subcommand> ...``.

Exit status: 0 success, 2 usage/config error, 3 missing prerequisite
artifact, 4 malformed data, 5 degenerate input, 6 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from . import pipeline
from .denoise import DenoiseConfig
from .encoder import EncoderConfig, TokenizerConfig
from .errors import ConfigError, MetricForgeError
from .regression import TrainConfig
from .synthesis import NoiseConfig

log = logging.getLogger("metricforge")


def _add_train_args(p: argparse.ArgumentParser, defaults: TrainConfig):
    p.add_argument("--data", required=True, help="quadruple JSONL or segment dataset")
    p.add_argument("--dev", help="dev dataset for best-checkpoint selection")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=defaults.total_steps)
    p.add_argument("--warmup", type=int, default=defaults.warmup_steps)
    p.add_argument("--lr", type=float, default=defaults.max_lr)
    p.add_argument("--batch", type=int, default=defaults.batch_size)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=defaults.optimizer)
    p.add_argument("--seed", type=int)
    p.add_argument("--with-src", dest="with_src", action="store_true", default=None)
    p.add_argument("--no-src", dest="with_src", action="store_false")
    p.add_argument("--model-id")
    p.add_argument("--select", choices=("pearson", "darr"), default="pearson")
    p.add_argument("--threshold", type=float, help="daRR pair threshold for --select darr")
    p.add_argument("--config", help="pipeline config supplying tokenizer/encoder sections")
    p.add_argument("--hidden", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--run-log")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metricforge", description="Train and evaluate learned MT metrics.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a pseudo-labelled pre-training corpus")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=NoiseConfig.selection_fraction)
    p.add_argument("--ratio-min", type=float, default=NoiseConfig.drop_ratio_min)
    p.add_argument("--ratio-max", type=float, default=NoiseConfig.drop_ratio_max)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-src", action="store_true", help="strip sources (reference-only setting)")
    p.add_argument("--oracle", default="lexical", choices=sorted(pipeline.ORACLES))
    p.add_argument("--run-log")

    _add_train_args(sub.add_parser("pretrain", help="train on pseudo-labelled data"), TrainConfig())
    _add_train_args(sub.add_parser("finetune", help="continue training on human labels"),
                    TrainConfig(total_steps=2000, warmup_steps=200))

    p = sub.add_parser("predict", help="score a dataset with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-id")
    p.add_argument("--run-log")

    p = sub.add_parser("denoise", help="flag and rescore noisy labels")
    p.add_argument("--data", required=True)
    p.add_argument("--preds", required=True, nargs="+", help="prediction TSVs or globs")
    p.add_argument("--tau", type=float, default=DenoiseConfig.variance_threshold)
    p.add_argument("--min-models", type=int, default=DenoiseConfig.min_models)
    p.add_argument("--include-human", action="store_true", help="rank human labels as an extra row")
    p.add_argument("--group-key", default="dataset_tag")
    p.add_argument("--out", required=True)
    p.add_argument("--flagged-out")
    p.add_argument("--run-log")

    p = sub.add_parser("combine", help="tune combination weights on a dev set")
    p.add_argument("--preds", required=True, nargs="+")
    p.add_argument("--dev", required=True)
    p.add_argument("--objective", choices=("darr", "pearson"), default="darr")
    p.add_argument("--grid", type=float, default=0.1)
    p.add_argument("--threshold", type=float)
    p.add_argument("--z-normalized", action="store_true")
    p.add_argument("--standardize", action="store_true", help="Z-score each model's scores before combining")
    p.add_argument("--out", required=True)
    p.add_argument("--combined-out", help="also write combined predictions")
    p.add_argument("--run-log")

    p = sub.add_parser("evaluate", help="segment-level Pearson and daRR per language pair")
    p.add_argument("--data", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--threshold", type=float, help="daRR gap (default 25 on raw DA)")
    p.add_argument("--z-normalized", action="store_true", help="human scores are Z-scores; needs --threshold")
    p.add_argument("--model-id")
    p.add_argument("--out", required=True)
    p.add_argument("--run-log")

    p = sub.add_parser("split", help="grouped k-fold split on (src, ref)")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--with-train", action="store_true", help="also write each fold's complement")
    p.add_argument("--run-log")

    p = sub.add_parser("check-config", help="validate a pipeline config")
    p.add_argument("config")

    p = sub.add_parser("run", help="run pipeline stages from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--stages", nargs="+", choices=pipeline.STAGES, default=list(pipeline.STAGES))
    p.add_argument("--seed", type=int)
    return parser


def _model_configs(args, seed):
    tok, enc = TokenizerConfig(), EncoderConfig(seed=seed)
    if args.config:
        cfg = pipeline.load_config(args.config, seed)
        tok, enc = cfg.tokenizer, cfg.encoder
    if args.vocab is not None:
        tok = TokenizerConfig(**{**asdict(tok), "vocab_size": args.vocab})
    overrides = {k: v for k, v in (("hidden_size", args.hidden), ("dropout", args.dropout)) if v is not None}
    if overrides:
        enc = EncoderConfig(**{**asdict(enc), **overrides})
    return tok, enc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except MetricForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "synth":
        noise = NoiseConfig(args.fraction, args.ratio_min, args.ratio_max, pipeline.resolve_seed(args.seed, None))
        pipeline.stage_synth(args.inp, args.out, noise, include_src=not args.no_src, oracle=args.oracle,
                             run_log=args.run_log)
    elif cmd in ("pretrain", "finetune"):
        seed = pipeline.resolve_seed(args.seed, None)
        tok, enc = _model_configs(args, seed)
        cfg = TrainConfig(max_lr=args.lr, total_steps=args.steps, warmup_steps=args.warmup,
                          batch_size=args.batch, seed=seed, optimizer=args.optimizer)
        if not cfg.max_lr > 0:
            raise ConfigError("--lr must be > 0")
        pipeline.stage_train(cmd, args.data, args.out, cfg, init=args.init, dev_path=args.dev,
                             with_src=args.with_src, tokenizer=tok, encoder=enc, model_id=args.model_id,
                             select_metric=args.select, threshold=args.threshold, run_log=args.run_log)
    elif cmd == "predict":
        pipeline.stage_predict(args.model, args.data, args.out, model_id=args.model_id, run_log=args.run_log)
    elif cmd == "denoise":
        cfg = DenoiseConfig(args.tau, args.min_models, args.include_human, args.group_key)
        pipeline.stage_denoise(args.data, pipeline.expand_globs(args.preds), args.out, cfg,
                               flagged_out=args.flagged_out, run_log=args.run_log)
    elif cmd == "combine":
        pipeline.stage_combine(pipeline.expand_globs(args.preds), args.dev, args.out, objective=args.objective,
                               grid=args.grid, threshold=args.threshold, z_normalized=args.z_normalized,
                               standardize=args.standardize, combined_out=args.combined_out, run_log=args.run_log)
    elif cmd == "evaluate":
        pipeline.stage_evaluate(args.data, args.preds, args.out, threshold=args.threshold,
                                z_normalized=args.z_normalized, model_id=args.model_id, run_log=args.run_log)
    elif cmd == "split":
        pipeline.stage_split(args.data, args.k, pipeline.resolve_seed(args.seed, None), args.out_prefix,
                             with_train=args.with_train, run_log=args.run_log)
    elif cmd == "check-config":
        errors = pipeline.validate_config(args.config)
        if errors:
            for e in errors:
                print(f"error: {e}", file=sys.stderr)
            return ConfigError.exit_code
        print("ok")
    elif cmd == "run":
        cfg = pipeline.load_config(args.config, args.seed)
        for line in pipeline.run_pipeline(cfg, args.stages):
            log.info("%s -> %s", line["stage"], line["outputs_digest"][:12])
        print(json.dumps({"workdir": str(cfg.workdir), "manifest": str(cfg.run_log)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
