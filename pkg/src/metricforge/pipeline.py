"""Pipeline stages over files, the JSON run config, and the run manifest.

Every stage reads its inputs, writes outputs atomically and appends one JSON
line to a manifest: stage name, SHA-256 digests of inputs and outputs, and
the seed. Stages refuse to write over any of their own inputs.
"""

from __future__ import annotations

import glob
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

from .combine import combine_scores, tune_weights, weights_to_json
from .data import (Dataset, PredictionRecord, atomic_write, dumps_predictions, load_predictions,
                   load_quadruples, load_segments, save_quadruples, save_segments, GROUP_KEYS)
from .denoise import DenoiseConfig, EnsembleMatrix, denoise
from .encoder import EncoderConfig, TokenizerConfig, read_header
from .errors import ConfigError, DataFormatError, MissingArtifactError
from .evaluation import evaluate, kfold_split
from .regression import (TrainConfig, checkpoint_bytes, load_checkpoint, new_bundle, predict_many,
                         read_descriptor, train)
from .synthesis import LexicalOracle, NoiseConfig, build_pretrain_corpus

log = logging.getLogger(__name__)

ORACLES = {"lexical": LexicalOracle}
STAGES = ("split", "synth", "pretrain", "denoise", "finetune", "predict", "combine", "evaluate")


# ---------------------------------------------------------------------------
# provenance helpers


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _combined(digests: dict[str, str]) -> str:
    # content only, in argument order, so identical runs in other directories agree
    h = hashlib.sha256()
    for value in digests.values():
        h.update(f"{value}\n".encode())
    return h.hexdigest()


def append_manifest(run_log, stage: str, inputs: Iterable, outputs: Iterable, seed: int | None):
    ins = {str(p): file_digest(p) for p in inputs}
    outs = {str(p): file_digest(p) for p in outputs}
    line = {"stage": stage, "inputs_digest": _combined(ins), "outputs_digest": _combined(outs),
            "seed": seed, "inputs": ins, "outputs": outs}
    run_log = Path(run_log)
    run_log.parent.mkdir(parents=True, exist_ok=True)
    with open(run_log, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(line, sort_keys=True) + "\n")
    return line


def _require(*paths):
    for p in paths:
        if p is None or not Path(p).is_file():
            raise MissingArtifactError(f"missing prerequisite artifact: {p}")


def _guard_outputs(inputs: Sequence, outputs: Sequence):
    resolved = {Path(p).resolve() for p in inputs if p is not None}
    for out in outputs:
        if out is not None and Path(out).resolve() in resolved:
            raise ConfigError(f"refusing to overwrite input file {out}")


def _default_log(out) -> Path:
    return Path(out).parent / "manifest.jsonl"


def expand_globs(patterns: Iterable[str]) -> list[str]:
    out: list[str] = []
    for pat in patterns:
        matches = sorted(glob.glob(pat)) if glob.has_magic(pat) else [pat]
        if not matches:
            raise MissingArtifactError(f"no files match {pat!r}")
        out.extend(m for m in matches if m not in out)
    return out


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_labeled(path) -> list:
    """Quadruple files (``hyp_noisy`` key) or segment datasets."""
    path = Path(path)
    if path.suffix.lower() != ".tsv":
        with open(path, encoding="utf-8") as fh:
            first = next((line for line in fh if line.strip()), "")
        try:
            if "hyp_noisy" in json.loads(first or "{}"):
                return load_quadruples(path)
        except json.JSONDecodeError:
            pass
    return list(load_segments(path))


# ---------------------------------------------------------------------------
# stages


def stage_synth(in_path, out_path, noise: NoiseConfig, *, include_src: bool = True, oracle: str = "lexical",
                run_log=None):
    _require(in_path)
    _guard_outputs([in_path], [out_path])
    if oracle not in ORACLES:
        raise ConfigError(f"unknown oracle {oracle!r}; available: {sorted(ORACLES)}")
    quads = build_pretrain_corpus(load_segments(in_path), noise, ORACLES[oracle](), include_src)
    save_quadruples(quads, out_path)
    return append_manifest(run_log or _default_log(out_path), "synth", [in_path], [out_path], noise.seed)


def stage_train(name: str, data_path, out_path, cfg: TrainConfig, *, init=None, dev_path=None,
                with_src: bool | None = None, tokenizer: TokenizerConfig = TokenizerConfig(),
                encoder: EncoderConfig = EncoderConfig(), model_id: str | None = None,
                select_metric: str = "pearson", threshold: float | None = None, run_log=None):
    """``pretrain`` / ``finetune``: train from ``init`` (or fresh) and save the checkpoint.

    With a dev set the best-dev checkpoint is saved.
    """
    inputs = [data_path] + [p for p in (init, dev_path) if p is not None]
    _require(*inputs)
    _guard_outputs(inputs, [out_path])
    if init is not None:
        bundle = load_checkpoint(init)
        if with_src is not None and with_src != bundle.with_src:
            raise ConfigError(f"--with-src={with_src} conflicts with checkpoint {init} (with_src={bundle.with_src})")
        if model_id:
            bundle = bundle.copy(model_id=model_id)
    else:
        if name == "finetune":
            raise MissingArtifactError("finetune needs an --init checkpoint from pretrain")
        bundle = new_bundle(tokenizer, encoder, with_src=bool(with_src), model_id=model_id or "model",
                            seed=cfg.seed)
    data = load_labeled(data_path)
    dev = list(load_segments(dev_path)) if dev_path is not None else None
    result = train(bundle, data, cfg, dev, select_metric=select_metric,
                   darr_threshold=25.0 if threshold is None else threshold)
    final = result.best_bundle if result.best_bundle is not None else result.bundle
    final.meta = {**final.meta, name: {**asdict(cfg), "best_dev": result.best_dev, "data": Path(data_path).name}}
    atomic_write(out_path, checkpoint_bytes(final))
    log.info("%s: %d steps, final loss %.4g", name, result.steps_run,
             result.losses[-1] if result.steps_run else float("nan"))
    return append_manifest(run_log or _default_log(out_path), name, inputs, [out_path], cfg.seed)


def stage_predict(model_path, data_path, out_path, *, model_id: str | None = None, run_log=None):
    _require(model_path, data_path)
    _guard_outputs([model_path, data_path], [out_path])
    bundle = load_checkpoint(model_path)
    ds = load_segments(data_path)
    mid = model_id or bundle.model_id
    scores = predict_many(bundle, list(ds))
    atomic_write(out_path, dumps_predictions(PredictionRecord(s.id, mid, float(v)) for s, v in zip(ds, scores)))
    return append_manifest(run_log or _default_log(out_path), "predict", [model_path, data_path], [out_path], None)


def load_ensemble(pred_paths: Sequence, segment_ids=None) -> EnsembleMatrix:
    records = [r for p in pred_paths for r in load_predictions(p)]
    return EnsembleMatrix.from_predictions(records, segment_ids)


def stage_denoise(data_path, pred_paths: Sequence, out_path, cfg: DenoiseConfig, *, flagged_out=None,
                  run_log=None):
    pred_paths = list(pred_paths)
    _require(data_path, *pred_paths)
    flagged_out = flagged_out or Path(out_path).with_suffix(".flagged.txt")
    _guard_outputs([data_path, *pred_paths], [out_path, flagged_out])
    ds = load_segments(data_path)
    m = load_ensemble(pred_paths, ds.ids)
    cleaned, flagged = denoise(ds, m, cfg)
    save_segments(cleaned, out_path)
    atomic_write(flagged_out, "".join(f"{s}\n" for s in flagged))
    log.info("denoise: flagged %d of %d segments", len(flagged), len(ds))
    return append_manifest(run_log or _default_log(out_path), "denoise", [data_path, *pred_paths],
                           [out_path, flagged_out], None)


def stage_combine(pred_paths: Sequence, dev_path, out_path, *, objective: str = "darr", grid: float = 0.1,
                  threshold: float | None = None, z_normalized: bool = False, standardize: bool = False,
                  combined_out=None, run_log=None):
    pred_paths = list(pred_paths)
    _require(dev_path, *pred_paths)
    _guard_outputs([dev_path, *pred_paths], [out_path, combined_out])
    dev = load_segments(dev_path)
    m = load_ensemble(pred_paths)
    w = tune_weights(m, dev, grid, objective, pair_threshold=threshold, z_normalized=z_normalized,
                     standardize=standardize)
    atomic_write(out_path, _json_text(weights_to_json(m.model_ids, w)))
    outputs = [out_path]
    if combined_out is not None:
        combined = combine_scores(m, w, standardize=standardize)
        atomic_write(combined_out, dumps_predictions(
            PredictionRecord(s, "combined", float(v)) for s, v in zip(m.segment_ids, combined)))
        outputs.append(combined_out)
    return append_manifest(run_log or _default_log(out_path), "combine", [dev_path, *pred_paths], outputs, None)


def stage_evaluate(data_path, pred_path, out_path, *, threshold: float | None = None, z_normalized: bool = False,
                   model_id: str | None = None, run_log=None):
    _require(data_path, pred_path)
    _guard_outputs([data_path, pred_path], [out_path])
    ds = load_segments(data_path)
    records = load_predictions(pred_path)
    models = sorted({r.model_id for r in records})
    if model_id is None:
        if len(models) != 1:
            raise DataFormatError(f"{pred_path} holds models {models}; choose one with --model-id")
        model_id = models[0]
    preds = {r.segment_id: r.score for r in records if r.model_id == model_id}
    reports = evaluate(ds, preds, pair_threshold=threshold, z_normalized=z_normalized)
    atomic_write(out_path, _json_text([r.to_dict() for r in reports]))
    return append_manifest(run_log or _default_log(out_path), "evaluate", [data_path, pred_path], [out_path], None)


def stage_split(data_path, k: int, seed: int, out_prefix, *, with_train: bool = False, fmt: str | None = None,
                run_log=None):
    _require(data_path)
    fmt = fmt or ("tsv" if str(data_path).endswith(".tsv") else "jsonl")
    ds = load_segments(data_path)
    folds = kfold_split(ds, k, seed)
    outputs = [Path(f"{out_prefix}{i}.{fmt}") for i in range(k)]
    if with_train:
        outputs += [Path(f"{out_prefix}{i}_train.{fmt}") for i in range(k)]
    _guard_outputs([data_path], outputs)
    for i, fold in enumerate(folds):
        save_segments(fold, outputs[i], fmt)
    if with_train:
        for i in range(k):
            dev_ids = set(folds[i].ids)
            save_segments(Dataset(f"{ds.tag}.train{i}", tuple(s for s in ds if s.id not in dev_ids)),
                          outputs[k + i], fmt)
    return append_manifest(run_log or _default_log(outputs[0]), "split", [data_path], outputs, seed)


# ---------------------------------------------------------------------------
# config


def _section(cls, raw: dict, name: str, errors: list[str], overrides: dict | None = None):
    raw = dict(raw or {})
    allowed = {f.name for f in fields(cls)}
    for key in sorted(set(raw) - allowed):
        errors.append(f"{name}.{key}: unknown field")
        raw.pop(key)
    raw.update(overrides or {})
    try:
        return cls(**raw)
    except (ConfigError, TypeError, ValueError) as exc:
        # a field-level message for this section already says it better
        if not any(e.startswith(f"{name}.") for e in errors):
            errors.append(f"{name}: {exc}")
        return None


@dataclass
class ModelSpec:
    id: str
    with_src: bool


@dataclass
class PipelineConfig:
    seed: int
    corpus: Path
    workdir: Path
    tokenizer: TokenizerConfig
    encoder: EncoderConfig
    noise: NoiseConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    denoise: DenoiseConfig
    models: list[ModelSpec]
    oracle: str = "lexical"
    k_folds: int = 4
    dev_fold: int = 0
    threshold: float | None = None
    z_normalized: bool = False
    objective: str = "darr"
    grid_step: float = 0.1
    select_metric: str = "pearson"
    source: Path | None = None

    def path(self, name: str) -> Path:
        return self.workdir / name

    @property
    def run_log(self) -> Path:
        return self.workdir / "manifest.jsonl"


TOP_KEYS = {"seed", "paths", "tokenizer", "encoder", "noise", "pretrain", "finetune", "denoise", "models",
            "oracle", "split", "evaluation"}


def resolve_seed(flag: int | None, config_value: int | None) -> int:
    """Explicit flag, then config, then ``METRICFORGE_SEED``, then 0."""
    if flag is not None:
        return int(flag)
    if config_value is not None:
        return int(config_value)
    env = os.environ.get("METRICFORGE_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"METRICFORGE_SEED={env!r} is not an integer") from None
    return 0


def _check_train_fields(raw: dict, name: str, errors: list[str]):
    total, warm = raw.get("total_steps", TrainConfig.total_steps), raw.get("warmup_steps", TrainConfig.warmup_steps)
    if isinstance(total, int) and isinstance(warm, int) and warm >= total:
        errors.append(f"{name}.warmup_steps ({warm}) must be < {name}.total_steps ({total})")
    lr = raw.get("max_lr", TrainConfig.max_lr)
    if isinstance(lr, (int, float)) and not lr > 0:
        errors.append(f"{name}.max_lr: must be > 0")


def parse_config(doc: dict, base_dir: Path = Path("."), seed: int | None = None) -> tuple[PipelineConfig | None, list[str]]:
    errors: list[str] = []
    if not isinstance(doc, dict):
        return None, ["config: top level must be a JSON object"]
    for key in sorted(set(doc) - TOP_KEYS):
        errors.append(f"{key}: unknown section")
    seed = resolve_seed(seed, doc.get("seed"))
    paths = doc.get("paths", {})
    corpus = paths.get("corpus")
    if corpus is None:
        errors.append("paths.corpus: required")
    corpus_path = (base_dir / corpus) if corpus else None
    if corpus_path is not None and not corpus_path.is_file():
        errors.append(f"paths.corpus: file not found: {corpus_path}")
    workdir = base_dir / paths.get("workdir", "run")

    for name in ("pretrain", "finetune"):
        _check_train_fields(doc.get(name, {}), name, errors)
    den_raw = doc.get("denoise", {})
    tau = den_raw.get("variance_threshold", DenoiseConfig.variance_threshold)
    if isinstance(tau, (int, float)) and not 0 < tau <= 0.25:
        errors.append(f"denoise.variance_threshold: {tau} outside (0, 0.25]")
    if den_raw.get("group_key", "dataset_tag") not in GROUP_KEYS:
        errors.append(f"denoise.group_key: must be one of {GROUP_KEYS}")
    tok = _section(TokenizerConfig, doc.get("tokenizer"), "tokenizer", errors)
    enc = _section(EncoderConfig, doc.get("encoder"), "encoder", errors, {"seed": seed})
    noise = _section(NoiseConfig, doc.get("noise"), "noise", errors, {"seed": seed})
    pre = _section(TrainConfig, doc.get("pretrain"), "pretrain", errors, {"seed": seed})
    fine = _section(TrainConfig, doc.get("finetune"), "finetune", errors, {"seed": seed + 1})
    den = _section(DenoiseConfig, den_raw, "denoise", errors)

    models = []
    for i, m in enumerate(doc.get("models", [{"id": "nosrc", "with_src": False}])):
        if not isinstance(m, dict) or "id" not in m:
            errors.append(f"models[{i}]: needs an 'id'")
            continue
        models.append(ModelSpec(str(m["id"]), bool(m.get("with_src", False))))
    if len({m.id for m in models}) != len(models):
        errors.append("models: duplicate model ids")
    if den is not None and len(models) < den.min_models:
        errors.append(f"models: denoising needs >= {den.min_models} models, config has {len(models)}")

    oracle = doc.get("oracle", "lexical")
    if oracle not in ORACLES:
        errors.append(f"oracle: unknown oracle {oracle!r}")
    split = doc.get("split", {})
    k, dev_fold = split.get("k", 4), split.get("dev_fold", 0)
    if not isinstance(k, int) or k < 2:
        errors.append("split.k: must be an integer >= 2")
    elif not isinstance(dev_fold, int) or not 0 <= dev_fold < k:
        errors.append("split.dev_fold: must be in [0, k)")
    ev = doc.get("evaluation", {})
    for key in sorted(set(ev) - {"threshold", "z_normalized", "objective", "grid_step", "select_metric"}):
        errors.append(f"evaluation.{key}: unknown field")
    if ev.get("z_normalized") and ev.get("threshold") is None:
        errors.append("evaluation.threshold: required when evaluation.z_normalized is true")
    if ev.get("objective", "darr") not in ("darr", "pearson"):
        errors.append("evaluation.objective: must be 'darr' or 'pearson'")
    if ev.get("select_metric", "pearson") not in ("darr", "pearson"):
        errors.append("evaluation.select_metric: must be 'darr' or 'pearson'")
    step = ev.get("grid_step", 0.1)
    if not isinstance(step, (int, float)) or step <= 0 or abs(round(1 / step) * step - 1) > 1e-9:
        errors.append("evaluation.grid_step: must divide 1")

    if errors:
        return None, errors
    cfg = PipelineConfig(seed=seed, corpus=corpus_path, workdir=workdir, tokenizer=tok, encoder=enc, noise=noise,
                         pretrain=pre, finetune=fine, denoise=den, models=models, oracle=oracle, k_folds=k,
                         dev_fold=dev_fold, threshold=ev.get("threshold"), z_normalized=bool(ev.get("z_normalized")),
                         objective=ev.get("objective", "darr"), grid_step=step,
                         select_metric=ev.get("select_metric", "pearson"))
    errors.extend(_check_checkpoints(cfg))
    return (None, errors) if errors else (cfg, [])


def _check_checkpoints(cfg: PipelineConfig) -> list[str]:
    """Existing checkpoints must agree with the encoder and model sections."""
    errors = []
    for m in cfg.models:
        for stage in ("pretrain", "finetune"):
            path = cfg.path(f"{stage}_{m.id}.ckpt")
            if not path.is_file():
                continue
            blob = path.read_bytes()
            try:
                V, d, P = read_header(blob)
                desc = read_descriptor(blob)
            except DataFormatError as exc:
                errors.append(f"models[{m.id}]: unreadable checkpoint {path}: {exc}")
                continue
            if d != cfg.encoder.hidden_size:
                errors.append(f"encoder.hidden_size: {cfg.encoder.hidden_size} but {path.name} has d={d}")
            if V != cfg.tokenizer.vocab_size:
                errors.append(f"tokenizer.vocab_size: {cfg.tokenizer.vocab_size} but {path.name} has V={V}")
            if P != cfg.encoder.max_positions:
                errors.append(f"encoder.max_tokens_src: {cfg.encoder.max_positions} but {path.name} has {P}")
            if bool(desc.get("with_src")) != m.with_src:
                errors.append(f"models[{m.id}].with_src: {m.with_src} but {path.name} was trained "
                              f"with_src={desc.get('with_src')}")
    return errors


def read_config_file(path, seed: int | None = None) -> tuple[PipelineConfig | None, list[str]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return None, [f"config: file not found: {path}"]
    except json.JSONDecodeError as exc:
        return None, [f"config: invalid JSON at line {exc.lineno}: {exc.msg}"]
    cfg, errors = parse_config(doc, path.parent, seed)
    if cfg is not None:
        cfg.source = path
    return cfg, errors


def validate_config(path) -> list[str]:
    """Empty list means the config is valid."""
    return read_config_file(path)[1]


def load_config(path, seed: int | None = None) -> PipelineConfig:
    cfg, errors = read_config_file(path, seed)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


# ---------------------------------------------------------------------------
# whole-pipeline driver


def run_stage(name: str, cfg: PipelineConfig) -> list[dict]:
    """Run one pipeline stage with the fixed artifact names under ``cfg.workdir``."""
    p = cfg.path
    thr = cfg.threshold
    if name == "split":
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        line = stage_split(cfg.corpus, cfg.k_folds, cfg.seed, p("fold"), run_log=cfg.run_log)
        ds = load_segments(cfg.corpus)
        dev = load_segments(p(f"fold{cfg.dev_fold}.jsonl"))
        dev_ids = set(dev.ids)
        save_segments(Dataset("dev", dev.segments), p("dev.jsonl"))
        save_segments(Dataset("train", tuple(s for s in ds if s.id not in dev_ids)), p("train.jsonl"))
        folds = [p(f"fold{i}.jsonl") for i in range(cfg.k_folds)]
        return [line, append_manifest(cfg.run_log, "split.select", folds, [p("train.jsonl"), p("dev.jsonl")], cfg.seed)]
    if name == "synth":
        return [stage_synth(p("train.jsonl"), p("synthetic.jsonl"), cfg.noise, include_src=True,
                            oracle=cfg.oracle, run_log=cfg.run_log)]
    if name == "pretrain":
        return [stage_train("pretrain", p("synthetic.jsonl"), p(f"pretrain_{m.id}.ckpt"),
                            _seeded(cfg.pretrain, cfg.seed + 101 * (i + 1)), with_src=m.with_src,
                            tokenizer=cfg.tokenizer, encoder=cfg.encoder, model_id=m.id, run_log=cfg.run_log)
                for i, m in enumerate(cfg.models)]
    if name == "denoise":
        lines = [stage_predict(p(f"pretrain_{m.id}.ckpt"), p("train.jsonl"), p(f"preds_train_{m.id}.tsv"),
                               run_log=cfg.run_log) for m in cfg.models]
        lines.append(stage_denoise(p("train.jsonl"), [p(f"preds_train_{m.id}.tsv") for m in cfg.models],
                                   p("train_denoised.jsonl"), cfg.denoise, flagged_out=p("flagged.txt"),
                                   run_log=cfg.run_log))
        return lines
    if name == "finetune":
        # the denoised labels are Z-scores, so daRR selection needs an explicit threshold
        return [stage_train("finetune", p("train_denoised.jsonl"), p(f"finetune_{m.id}.ckpt"),
                            _seeded(cfg.finetune, cfg.seed + 202 * (i + 1)), init=p(f"pretrain_{m.id}.ckpt"),
                            dev_path=p("dev.jsonl"), select_metric=cfg.select_metric, threshold=thr,
                            run_log=cfg.run_log)
                for i, m in enumerate(cfg.models)]
    if name == "predict":
        return [stage_predict(p(f"finetune_{m.id}.ckpt"), p("dev.jsonl"), p(f"preds_dev_{m.id}.tsv"),
                              run_log=cfg.run_log) for m in cfg.models]
    if name == "combine":
        return [stage_combine([p(f"preds_dev_{m.id}.tsv") for m in cfg.models], p("dev.jsonl"), p("weights.json"),
                              objective=cfg.objective, grid=cfg.grid_step, threshold=thr,
                              z_normalized=cfg.z_normalized, combined_out=p("preds_dev_combined.tsv"),
                              run_log=cfg.run_log)]
    if name == "evaluate":
        names = [m.id for m in cfg.models] + ["combined"]
        return [stage_evaluate(p("dev.jsonl"), p(f"preds_dev_{n}.tsv"), p(f"report_{n}.json"), threshold=thr,
                               z_normalized=cfg.z_normalized, run_log=cfg.run_log) for n in names]
    raise ConfigError(f"unknown stage {name!r}; stages: {', '.join(STAGES)}")


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**asdict(cfg), "seed": seed})


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] = STAGES) -> list[dict]:
    lines = []
    for name in stages:
        log.info("stage %s", name)
        lines.extend(run_stage(name, cfg))
    return lines
