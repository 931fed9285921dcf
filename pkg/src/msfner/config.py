"""Flat run configuration: defaults, file parsing, overrides, dumping.

One dataclass holds every knob the pipeline exposes, plus the file paths
commands read and write. Config files are plain "key = value" lines with
'#' comments. Precedence: command-line flag > config file > MSFNER_SEED
environment variable (seed only) > built-in default. Every resolved run is
dumped back out in the same format so the effective settings are always on
disk next to the artifacts.
"""

import dataclasses
import math
import os
from dataclasses import dataclass

SEED_ENV_VAR = "MSFNER_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 0
    # encoder
    encoder_mode: str = "trainable"  # trainable | precomputed
    embedding_dim: int = 32
    hidden_dim: int = 64
    window: int = 1
    dropout: float = 0.2
    max_len: int = 128
    float32: bool = False
    # meta-training
    inner_lr: float = 0.01
    outer_lr: float = 3e-05
    outer_optimizer: str = "adaptive"  # adaptive | sgd
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-08
    weight_decay: float = 0.01
    batch_size: int = 32
    total_steps: int = 1000
    gamma: float = 1.0
    finetune_steps: int = 20
    finetune_clip: float = 5.0
    validation_interval: int = 50
    validation_episodes: int = 4
    # episodes
    n_way: int = 5
    k_shot: int = 1
    query_k_shot: int | None = None
    mask_extra_types: bool = False
    corpus_format: str = "io-typed"  # io-typed | bioes-typed
    # classifier
    contrastive_tau: float = 0.1
    similarity: str = "auto"  # auto | gaussian-kl | neg-sq-euclid
    proto_distance: str = "sq-euclid"  # sq-euclid | euclid
    projection_dim: int = 32
    # decoding
    knn_k: int = 10
    knn_lambda: float = 0.1
    knn_tau: float = 1.0
    # paths
    train_corpus: str | None = None
    valid_corpus: str | None = None
    vocab_corpus: str | None = None
    episode: str | None = None
    esd_checkpoint: str | None = None
    ec_checkpoint: str | None = None
    datastore: str | None = None
    embeddings: str | None = None
    predictions: str | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        checks = [
            (self.seed >= 0, "seed", "must be non-negative"),
            (self.encoder_mode in ("trainable", "precomputed"), "encoder_mode",
             "must be 'trainable' or 'precomputed'"),
            (self.embedding_dim >= 1, "embedding_dim", "must be at least 1"),
            (self.hidden_dim >= 1, "hidden_dim", "must be at least 1"),
            (self.window >= 0, "window", "must be non-negative"),
            (0.0 <= self.dropout < 1.0, "dropout", "must lie in [0, 1)"),
            (self.max_len >= 1, "max_len", "must be at least 1"),
            (self.inner_lr >= 0, "inner_lr", "must be non-negative"),
            (self.outer_lr > 0, "outer_lr", "must be positive"),
            (self.outer_optimizer in ("adaptive", "sgd"), "outer_optimizer",
             "must be 'adaptive' or 'sgd'"),
            (self.weight_decay >= 0, "weight_decay", "must be non-negative"),
            (self.batch_size >= 1, "batch_size", "must be at least 1"),
            (self.total_steps >= 0, "total_steps", "must be non-negative"),
            (self.gamma >= 0, "gamma", "must be non-negative"),
            (self.finetune_steps >= 0, "finetune_steps", "must be non-negative"),
            (math.isfinite(self.finetune_clip), "finetune_clip",
             "must be finite (zero or negative disables clipping)"),
            (self.validation_interval >= 1, "validation_interval", "must be at least 1"),
            (self.validation_episodes >= 0, "validation_episodes", "must be non-negative"),
            (self.n_way >= 1, "n_way", "must be at least 1"),
            (self.k_shot >= 1, "k_shot", "must be at least 1"),
            (self.query_k_shot is None or self.query_k_shot >= 1, "query_k_shot",
             "must be at least 1 when set"),
            (self.corpus_format in ("io-typed", "bioes-typed"), "corpus_format",
             "must be 'io-typed' or 'bioes-typed'"),
            (self.contrastive_tau > 0, "contrastive_tau", "must be positive"),
            (self.similarity in ("auto", "gaussian-kl", "neg-sq-euclid"), "similarity",
             "must be 'auto', 'gaussian-kl', or 'neg-sq-euclid'"),
            (self.proto_distance in ("sq-euclid", "euclid"), "proto_distance",
             "must be 'sq-euclid' or 'euclid'"),
            (self.projection_dim >= 1, "projection_dim", "must be at least 1"),
            (self.knn_k >= 1, "knn_k", "must be at least 1"),
            (0.0 <= self.knn_lambda <= 1.0, "knn_lambda", "must lie in [0, 1]"),
            (self.knn_tau > 0, "knn_tau", "must be positive"),
        ]
        for ok, name, message in checks:
            if not ok:
                raise ConfigError(f"config field '{name}' {message}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def snapshot(self) -> dict:
        """Model-relevant fields only; paths are deployment details and would
        break byte-identical artifacts across working directories."""
        d = self.to_dict()
        for name in PATH_FIELDS:
            d.pop(name)
        return d


PATH_FIELDS = (
    "train_corpus", "valid_corpus", "vocab_corpus", "episode", "esd_checkpoint",
    "ec_checkpoint", "datastore", "embeddings", "predictions", "out_dir",
)

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key '{name}'")
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if ftype is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype == int | None:
            return None if raw.lower() == "none" else int(raw)
        # str and str | None
        return None if raw.lower() == "none" else raw
    except ValueError as err:
        raise ConfigError(f"config field '{name}': {err}") from err


def parse_config_file(path: str) -> dict:
    """Read "key = value" lines; '#' starts a comment; blank lines skipped."""
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as err:
        raise ConfigError(f"cannot read config file '{path}': {err}") from err
    for ln, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got '{stripped}'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return values


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(config: RunConfig, path: str) -> None:
    """Write the resolved configuration in the same key = value format."""
    with open(path, "w", encoding="utf-8") as f:
        for fld in dataclasses.fields(RunConfig):
            f.write(f"{fld.name} = {format_value(getattr(config, fld.name))}\n")


def resolve_config(file_path: str | None, cli_values: dict, env: dict | None = None) -> RunConfig:
    """Defaults <- MSFNER_SEED <- config file <- CLI flags, then validate."""
    env = os.environ if env is None else env
    merged = {}
    if SEED_ENV_VAR in env:
        try:
            merged["seed"] = int(env[SEED_ENV_VAR])
        except ValueError as err:
            raise ConfigError(f"environment variable {SEED_ENV_VAR}: {err}") from err
    if file_path is not None:
        merged.update(parse_config_file(file_path))
    merged.update({k: v for k, v in cli_values.items() if v is not None})
    try:
        config = RunConfig(**merged)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    config.validate()
    return config
