"""Command-line entry point for the full pipeline.

Subcommands: train-esd, train-ec, finetune, build-datastore,
sample-episodes, infer, eval. Every RunConfig field is exposed as a flag
(underscores become dashes) and can also come from a "key = value" config
file via --config; flags win. Each run validates its inputs before writing
anything, dumps the resolved configuration next to its outputs, and exits
0 on success, 2 on configuration errors, 3 on data errors, 4 on numeric
failures.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .classifier import ContrastiveConfig
from .config import (
    ConfigError,
    RunConfig,
    _FIELD_TYPES,
    dump_config,
    resolve_config,
)
from .crf import Span
from .encoder import (
    EmbeddingFormatError,
    Encoder,
    EncoderConfig,
    Vocab,
    build_vocab,
    load_embedding_file,
)
from .episodes import (
    Corpus,
    CorpusParseError,
    SamplingError,
    micro_f1,
    parse_corpus,
    read_episode,
    sample_episode,
    write_episode,
)
from .knn import (
    DatastoreFormatError,
    DecoderConfig,
    build_datastore,
    infer,
    load_datastore,
    read_predictions,
    write_datastore,
    write_predictions,
)
from .meta import (
    Checkpoint,
    CheckpointFormatError,
    EntityClassifier,
    SpanDetector,
    TrainerConfig,
    TrainingAborted,
    derive_seed,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .report import plot_eval_scores, plot_training_curve, write_eval_table, write_metrics


class DataError(RuntimeError):
    pass


def _add_config_flags(sp: argparse.ArgumentParser, skip: tuple[str, ...] = ()) -> None:
    sp.add_argument("--config", help="key = value config file")
    for fld in dataclasses.fields(RunConfig):
        if fld.name in skip:
            continue
        flag = "--" + fld.name.replace("_", "-")
        ftype = _FIELD_TYPES[fld.name]
        if ftype is bool:
            sp.add_argument(flag, dest=fld.name, default=None, type=_parse_bool,
                            metavar="BOOL")
        elif ftype is int:
            sp.add_argument(flag, dest=fld.name, default=None, type=int)
        elif ftype is float:
            sp.add_argument(flag, dest=fld.name, default=None, type=float)
        elif ftype == int | None:
            sp.add_argument(flag, dest=fld.name, default=None, type=_parse_opt_int,
                            metavar="INT|none")
        else:
            sp.add_argument(flag, dest=fld.name, default=None)


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: '{raw}'")


def _parse_opt_int(raw: str):
    return None if raw.lower() == "none" else int(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msfner",
        description="Few-shot NER: span detection, entity typing, KNN-interpolated decoding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    commands = [
        ("train-esd", cmd_train_esd, "meta-train the span detector"),
        ("train-ec", cmd_train_ec, "meta-train the entity classifier"),
        ("finetune", cmd_finetune, "finetune both models on an episode's support set"),
        ("build-datastore", cmd_build_datastore, "build the entity datastore from a support set"),
        ("sample-episodes", cmd_sample_episodes, "sample and cache N-way K~2K-shot episodes"),
        ("infer", cmd_infer, "decode and type entities for an episode's query set"),
        ("eval", cmd_eval, "score prediction files against episode gold spans"),
    ]
    for name, func, help_text in commands:
        sp = sub.add_parser(name, help=help_text)
        if name == "eval":
            _add_config_flags(sp, skip=("episode", "predictions"))
            sp.add_argument("--episode", action="append", default=None,
                            help="episode JSON (repeatable, paired with --predictions)")
            sp.add_argument("--predictions", action="append", default=None,
                            help="predictions JSONL (repeatable, paired with --episode)")
        else:
            _add_config_flags(sp)
        if name == "sample-episodes":
            sp.add_argument("--episodes", type=int, default=10,
                            help="number of episodes to sample")
        sp.set_defaults(func=func)
    return parser


def _config_values(args: argparse.Namespace) -> dict:
    single = {}
    for name in _FIELD_TYPES:
        value = getattr(args, name, None)
        if name in ("episode", "predictions") and isinstance(value, list):
            continue
        single[name] = value
    return single


def _require_set(config: RunConfig, fields: tuple[str, ...]) -> None:
    for name in fields:
        if getattr(config, name) is None:
            raise ConfigError(f"config field '{name}' is required for this command")


def _require_readable(config: RunConfig, fields: tuple[str, ...]) -> None:
    for name in fields:
        path = getattr(config, name)
        if path is not None and not os.path.exists(path):
            raise DataError(f"config field '{name}': path '{path}' does not exist")


def _dtype(config: RunConfig):
    return np.float32 if config.float32 else np.float64


def _encoder_config(config: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        mode=config.encoder_mode,
        embedding_dim=config.embedding_dim,
        hidden_dim=config.hidden_dim,
        window=config.window,
        dropout=config.dropout,
        max_len=config.max_len,
    )


def _contrastive_config(config: RunConfig) -> ContrastiveConfig:
    return ContrastiveConfig(
        tau=config.contrastive_tau,
        similarity=config.similarity,
        proto_distance=config.proto_distance,
        projection_dim=config.projection_dim,
    )


def _trainer_config(config: RunConfig) -> TrainerConfig:
    return TrainerConfig(
        inner_lr=config.inner_lr,
        outer_lr=config.outer_lr,
        outer_optimizer=config.outer_optimizer,
        batch_size=config.batch_size,
        total_steps=config.total_steps,
        gamma=config.gamma,
        finetune_steps=config.finetune_steps,
        finetune_clip=config.finetune_clip,
        validation_interval=config.validation_interval,
        validation_episodes=config.validation_episodes,
        n_way=config.n_way,
        k_shot=config.k_shot,
        query_k_shot=config.query_k_shot,
        mask_extra_types=config.mask_extra_types,
        adam_beta1=config.adam_beta1,
        adam_beta2=config.adam_beta2,
        adam_eps=config.adam_eps,
        weight_decay=config.weight_decay,
        seed=config.seed,
    )


def _decoder_config(config: RunConfig) -> DecoderConfig:
    return DecoderConfig(k=config.knn_k, lam=config.knn_lambda, tau=config.knn_tau)


def _load_corpus(path: str, config: RunConfig) -> Corpus:
    return parse_corpus(path, config.corpus_format, max_len=config.max_len)


def _build_encoder(config: RunConfig, vocab_source: Corpus | None) -> tuple[Encoder, list[str]]:
    """Encoder plus the vocabulary token list recorded in the snapshot."""
    ecfg = _encoder_config(config)
    if config.encoder_mode == "trainable":
        if config.vocab_corpus is not None:
            vocab_source = _load_corpus(config.vocab_corpus, config)
        if vocab_source is None:
            raise ConfigError("config field 'vocab_corpus' is required for this command")
        vocab = build_vocab([list(ls.tokens) for ls in vocab_source.sentences])
        return Encoder(ecfg, vocab=vocab), vocab.tokens
    _require_set(config, ("embeddings",))
    _require_readable(config, ("embeddings",))
    store = load_embedding_file(config.embeddings)
    return Encoder(ecfg, embeddings=store), []


def _model_from_checkpoint(ckpt: Checkpoint, config: RunConfig):
    """Rebuild the model a checkpoint was trained with from its snapshot."""
    known = {k: v for k, v in ckpt.config.items() if k in _FIELD_TYPES}
    try:
        snap = RunConfig(**known)
        snap.validate()
    except (TypeError, ConfigError) as err:
        raise DataError(f"checkpoint carries an invalid config snapshot: {err}") from err
    ecfg = _encoder_config(snap)
    if snap.encoder_mode == "trainable":
        tokens = ckpt.config.get("vocab")
        if not tokens:
            raise DataError("checkpoint snapshot lacks a vocabulary")
        enc = Encoder(ecfg, vocab=Vocab(tokens))
    else:
        _require_set(config, ("embeddings",))
        _require_readable(config, ("embeddings",))
        enc = Encoder(ecfg, embeddings=load_embedding_file(config.embeddings))
    if ckpt.kind == "esd":
        return SpanDetector(enc), snap
    if ckpt.kind == "ec":
        return EntityClassifier(enc, _contrastive_config(snap)), snap
    raise DataError(f"checkpoint has unknown kind '{ckpt.kind}'")


def _load_typed_checkpoint(path: str, want_kind: str) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.kind != want_kind:
        raise DataError(f"'{path}' holds a '{ckpt.kind}' checkpoint, expected '{want_kind}'")
    return ckpt


def _prepare_out_dir(config: RunConfig) -> str:
    _require_set(config, ("out_dir",))
    os.makedirs(config.out_dir, exist_ok=True)
    dump_config(config, os.path.join(config.out_dir, "resolved_config.cfg"))
    return config.out_dir


def _cmd_train(kind: str, args: argparse.Namespace, config: RunConfig) -> int:
    _require_set(config, ("train_corpus",))
    _require_readable(config, ("train_corpus", "valid_corpus", "vocab_corpus"))
    corpus = _load_corpus(config.train_corpus, config)
    vcorpus = corpus
    if config.valid_corpus is not None and config.valid_corpus != config.train_corpus:
        vcorpus = _load_corpus(config.valid_corpus, config)
    encoder, vocab_tokens = _build_encoder(config, corpus)
    if kind == "esd":
        model = SpanDetector(encoder)
    else:
        model = EntityClassifier(encoder, _contrastive_config(config))
    snapshot = config.snapshot()
    snapshot["vocab"] = vocab_tokens
    out_dir = _prepare_out_dir(config)
    ckpt_path = os.path.join(out_dir, f"{kind}.msfc")
    metrics_path = os.path.join(out_dir, f"{kind}_metrics.tsv")
    curve_path = os.path.join(out_dir, f"{kind}_curve.png")
    try:
        result = train(model, kind, corpus, vcorpus, _trainer_config(config),
                       snapshot, dtype=_dtype(config))
    except TrainingAborted as err:
        save_checkpoint(err.last_good, ckpt_path)
        write_metrics(err.history, metrics_path)
        print(f"numeric failure at step {err.step}: {err}", file=sys.stderr)
        print(f"wrote last-good checkpoint to {ckpt_path}", file=sys.stderr)
        return 4
    save_checkpoint(result.best, ckpt_path)
    write_metrics(result.history, metrics_path)
    plot_training_curve(result.history, curve_path, f"{kind} meta-training")
    print(f"wrote {ckpt_path} (best step {result.best.step}, "
          f"validation score {result.best.score:.4f})")
    return 0


def cmd_train_esd(args: argparse.Namespace, config: RunConfig) -> int:
    return _cmd_train("esd", args, config)


def cmd_train_ec(args: argparse.Namespace, config: RunConfig) -> int:
    return _cmd_train("ec", args, config)


def cmd_finetune(args: argparse.Namespace, config: RunConfig) -> int:
    _require_set(config, ("esd_checkpoint", "ec_checkpoint", "episode"))
    _require_readable(config, ("esd_checkpoint", "ec_checkpoint", "episode"))
    episode = read_episode(config.episode)
    tcfg = _trainer_config(config)
    out_dir = _prepare_out_dir(config)
    written = []
    for kind, path in (("esd", config.esd_checkpoint), ("ec", config.ec_checkpoint)):
        ckpt = _load_typed_checkpoint(path, kind)
        model, _ = _model_from_checkpoint(ckpt, config)
        tuned = finetune(model, kind, ckpt.params, episode.support, episode.label_set,
                         tcfg, base_seed=config.seed)
        out_path = os.path.join(out_dir, f"{kind}_finetuned.msfc")
        save_checkpoint(
            Checkpoint(kind=kind, step=ckpt.step, score=ckpt.score,
                       config=ckpt.config, params=tuned),
            out_path,
        )
        written.append(out_path)
    print(f"wrote {written[0]} and {written[1]} "
          f"({tcfg.finetune_steps} steps on {len(episode.support)} support sentences)")
    return 0


def cmd_build_datastore(args: argparse.Namespace, config: RunConfig) -> int:
    _require_set(config, ("ec_checkpoint", "episode"))
    _require_readable(config, ("ec_checkpoint", "episode"))
    episode = read_episode(config.episode)
    ckpt = _load_typed_checkpoint(config.ec_checkpoint, "ec")
    model, _ = _model_from_checkpoint(ckpt, config)
    store = build_datastore(model, ckpt.params, episode.support)
    out_dir = _prepare_out_dir(config)
    path = os.path.join(out_dir, "datastore.msfd")
    write_datastore(store, path)
    print(f"wrote {path} ({len(store)} entries, {len(store.labels)} types, dim {store.dim})")
    return 0


def cmd_sample_episodes(args: argparse.Namespace, config: RunConfig) -> int:
    _require_set(config, ("train_corpus",))
    _require_readable(config, ("train_corpus",))
    if args.episodes < 1:
        raise ConfigError("--episodes must be at least 1")
    corpus = _load_corpus(config.train_corpus, config)
    out_dir = _prepare_out_dir(config)
    paths = []
    for i in range(args.episodes):
        ep = sample_episode(
            corpus, config.n_way, config.k_shot,
            seed=derive_seed(config.seed, "cli-episode", i),
            query_k_shot=config.query_k_shot,
            mask_extra_types=config.mask_extra_types,
        )
        path = os.path.join(out_dir, f"episode_{i:03d}.json")
        write_episode(ep, path)
        paths.append(path)
    print(f"wrote {len(paths)} episodes to {out_dir}")
    return 0


def cmd_infer(args: argparse.Namespace, config: RunConfig) -> int:
    _require_set(config, ("esd_checkpoint", "ec_checkpoint", "datastore", "episode"))
    _require_readable(config, ("esd_checkpoint", "ec_checkpoint", "datastore", "episode"))
    episode = read_episode(config.episode)
    store = load_datastore(config.datastore)
    if set(store.labels) - set(episode.label_set):
        raise DataError(
            f"datastore types {sorted(store.labels)} are not a subset of "
            f"episode types {sorted(episode.label_set)}"
        )
    esd_ckpt = _load_typed_checkpoint(config.esd_checkpoint, "esd")
    ec_ckpt = _load_typed_checkpoint(config.ec_checkpoint, "ec")
    esd_model, _ = _model_from_checkpoint(esd_ckpt, config)
    ec_model, ec_snap = _model_from_checkpoint(ec_ckpt, config)
    records = infer(
        esd_model, esd_ckpt.params, ec_model, ec_ckpt.params,
        [ls.sentence for ls in episode.query], store, _decoder_config(config),
        proto_distance=ec_snap.proto_distance,
    )
    out_dir = _prepare_out_dir(config)
    path = os.path.join(out_dir, "predictions.jsonl")
    write_predictions(records, path)
    n_spans = sum(len(r["spans"]) for r in records)
    print(f"wrote {path} ({len(records)} sentences, {n_spans} spans)")
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    episodes = args.episode or ([config.episode] if config.episode else [])
    predictions = args.predictions or ([config.predictions] if config.predictions else [])
    if not episodes or not predictions:
        raise ConfigError("eval needs at least one --episode/--predictions pair")
    if len(episodes) != len(predictions):
        raise ConfigError(
            f"got {len(episodes)} episodes but {len(predictions)} prediction files"
        )
    for path in episodes + predictions:
        if not os.path.exists(path):
            raise DataError(f"path '{path}' does not exist")
    reports = []
    for i, (ep_path, pred_path) in enumerate(zip(episodes, predictions)):
        episode = read_episode(ep_path)
        records = {rec["id"]: rec for rec in read_predictions(pred_path)}
        known = {ls.sentence.id for ls in episode.query}
        for rid in records:
            if rid not in known:
                raise DataError(f"{pred_path}: prediction for unknown sentence id '{rid}'")
        predicted, gold = [], []
        for ls in episode.query:
            rec = records.get(ls.sentence.id)
            if rec is None:
                raise DataError(f"{pred_path}: no prediction for sentence id '{ls.sentence.id}'")
            predicted.append(
                [Span(sp["start"], sp["end"], sp["type"]) for sp in rec["spans"]]
            )
            gold.append(list(ls.spans))
        rep = micro_f1(predicted, gold)
        reports.append({
            "episode": os.path.basename(ep_path),
            "precision": rep.precision, "recall": rep.recall, "f1": rep.f1,
            "predicted": rep.predicted, "gold": rep.gold, "correct": rep.correct,
        })
    out_dir = _prepare_out_dir(config)
    table_path = os.path.join(out_dir, "eval.tsv")
    fig_path = os.path.join(out_dir, "eval.png")
    write_eval_table(reports, table_path)
    plot_eval_scores(reports, fig_path, "episode micro F1")
    f1s = [r["f1"] for r in reports]
    mean = float(np.mean(f1s))
    std = float(np.std(f1s))
    print(f"episodes={len(reports)} mean_f1={mean:.4f} std={std:.4f}")
    print(f"wrote {table_path} and {fig_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        config = resolve_config(args.config, _config_values(args))
        return args.func(args, config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except TrainingAborted as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4
    except FloatingPointError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4
    except (DataError, CorpusParseError, SamplingError, EmbeddingFormatError,
            DatastoreFormatError, CheckpointFormatError, json.JSONDecodeError,
            KeyError, OSError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
