"""Episodic meta-training for the two models, finetuning, and checkpoints.

Both models train with the same first-order scheme: for each task in a
batch, clone-adapt the base parameters with exactly one gradient step on the
support loss, differentiate the query loss at the adapted parameters, and
apply the gradient sum across tasks directly to the base parameters (no
second-order terms). The span detector's loss is the CRF negative
log-likelihood summed over sentences; the classifier's support loss is the
prototype cross-entropy plus gamma times the contrastive term, while its
query loss reuses the support prototypes as fixed vectors and drops the
contrastive term.

Checkpoints are little-endian binary: magic "MSFC", version, model kind,
step, validation score, a JSON config snapshot (which carries the
vocabulary), and named tensors.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tensor, backward
from .classifier import (
    ContrastiveConfig,
    build_prototypes,
    contrastive_loss,
    ec_loss,
    pool_span,
    project,
    proto_distances,
    proto_distribution,
)
from .crf import apply_transition_mask, crf_nll, emissions, init_crf_params, spans_to_tags, tags_to_spans, viterbi
from .encoder import Encoder
from .episodes import Corpus, Episode, LabeledSentence, micro_f1, sample_episode
from .optim import AdamState, adaptive_step, clip_grads, sgd_step

CHECKPOINT_MAGIC = b"MSFC"
CHECKPOINT_VERSION = 1


def derive_seed(*parts) -> int:
    """Deterministic child seed from mixed int/str parts."""
    entropy = [
        int(p) & 0xFFFFFFFFFFFFFFFF if isinstance(p, (int, np.integer)) else zlib.crc32(str(p).encode())
        for p in parts
    ]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class TrainerConfig:
    inner_lr: float = 1e-2
    outer_lr: float = 3e-5
    outer_optimizer: str = "adaptive"  # adaptive | sgd
    batch_size: int = 32
    total_steps: int = 1000
    gamma: float = 1.0
    finetune_steps: int = 20
    finetune_clip: float = 5.0
    validation_interval: int = 50
    validation_episodes: int = 4
    n_way: int = 5
    k_shot: int = 1
    query_k_shot: int | None = None
    mask_extra_types: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive (inner_lr may be zero)")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.outer_optimizer not in ("adaptive", "sgd"):
            raise ValueError(f"unknown outer optimizer '{self.outer_optimizer}'")
        if not np.isfinite(self.finetune_clip):
            raise ValueError("finetune_clip must be finite (<= 0 disables clipping)")


class SpanDetector:
    """Encoder plus CRF head; stage one of the pipeline."""

    def __init__(self, encoder: Encoder):
        self.encoder = encoder

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
        enc = self.encoder.init_params(rng, dtype)
        crf = init_crf_params(self.encoder.output_dim, rng, dtype)
        merged = dict(enc.items())
        merged.update(dict(crf.items()))
        return ParamSet(merged)

    def batch_loss(self, params: ParamSet, batch: list[LabeledSentence],
                   train: bool = False, seed: int = 0) -> Tensor:
        """Sum of per-sentence CRF negative log-likelihoods."""
        if not batch:
            raise ValueError("empty sentence batch")
        trans = apply_transition_mask(params["crf_trans"])
        total = None
        for i, ls in enumerate(batch):
            h = self.encoder.encode(params, list(ls.tokens), ls.sentence.id,
                                    train=train, seed=derive_seed(seed, i))
            em = emissions(h, params)
            tags = spans_to_tags([sp.with_label(None) for sp in ls.spans], len(ls.tokens))
            nll = crf_nll(em, trans, tags)
            total = nll if total is None else ag.add(total, nll)
        return total

    def decode(self, params: ParamSet, tokens: list[str], sentence_id: str | None = None):
        """Viterbi spans (untyped) for one sentence, eval mode."""
        h = self.encoder.encode(params, list(tokens), sentence_id, train=False)
        em = emissions(h, params)
        trans = apply_transition_mask(params["crf_trans"])
        tags, _ = viterbi(em.data, trans.data)
        return tags_to_spans(tags)


class EntityClassifier:
    """Encoder plus projection head; prototype-based typing, stage two."""

    def __init__(self, encoder: Encoder, contrastive: ContrastiveConfig):
        self.encoder = encoder
        self.contrastive = contrastive

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
        enc = self.encoder.init_params(rng, dtype)
        proj = self._init_projection(rng, dtype)
        merged = dict(enc.items())
        merged.update(dict(proj.items()))
        return ParamSet(merged)

    def _init_projection(self, rng, dtype):
        from .classifier import init_projection_params

        return init_projection_params(self.encoder.output_dim, self.contrastive.projection_dim, rng, dtype)

    def entity_embeddings(self, params: ParamSet, batch: list[LabeledSentence],
                          train: bool = False, seed: int = 0):
        """Pooled embeddings and labels for every gold entity in the batch."""
        embs, labels = [], []
        for i, ls in enumerate(batch):
            if not ls.spans:
                continue
            h = self.encoder.encode(params, list(ls.tokens), ls.sentence.id,
                                    train=train, seed=derive_seed(seed, i))
            for sp in ls.spans:
                embs.append(pool_span(h, sp.start, sp.end))
                labels.append(sp.label)
        return embs, labels

    def batch_loss(self, params: ParamSet, batch: list[LabeledSentence],
                   label_set: tuple[str, ...], k_shot: int, gamma: float,
                   train: bool = False, seed: int = 0, prototypes=None) -> Tensor:
        """Prototype cross-entropy plus gamma times the contrastive term.

        With prototypes=None they are built from this very batch (support
        pattern, fully differentiable); otherwise the given prototypes are
        used as-is (query pattern). gamma == 0 skips the contrastive graph
        entirely.
        """
        embs, labels = self.entity_embeddings(params, batch, train=train, seed=seed)
        if not embs:
            raise ValueError("batch contains no entities")
        missing = [t for t in label_set if t not in set(labels)] if prototypes is None else []
        if missing:
            raise ValueError(f"support does not cover label(s): {', '.join(missing)}")
        protos = prototypes if prototypes is not None else build_prototypes(embs, labels, list(label_set))
        dists = [proto_distances(e, protos, self.contrastive.proto_distance) for e in embs]
        gold = [protos.labels.index(lab) for lab in labels]
        loss = ec_loss(dists, gold)
        if gamma != 0.0:
            mode = self.contrastive.resolve_similarity(k_shot)
            projected = [project(e, params) for e in embs]
            loss = ag.add(loss, ag.scale(contrastive_loss(projected, labels, self.contrastive.tau, mode), gamma))
        return loss

    def support_prototypes(self, params: ParamSet, support: list[LabeledSentence],
                           label_set: tuple[str, ...]):
        """Eval-mode prototypes from support gold entities."""
        embs, labels = self.entity_embeddings(params, support, train=False)
        if not embs:
            raise ValueError("support contains no entities")
        return build_prototypes(embs, labels, list(label_set))

    def classify(self, params: ParamSet, ls: LabeledSentence, span, protos) -> np.ndarray:
        """Eval-mode type distribution for one span of one sentence."""
        h = self.encoder.encode(params, list(ls.tokens), ls.sentence.id, train=False)
        e = pool_span(h, span.start, span.end)
        return proto_distribution(e, protos, self.contrastive.proto_distance).data


def inner_update(params: ParamSet, support, loss_fn, alpha: float, context: str = "inner step") -> ParamSet:
    """One SGD step on loss_fn(params, support); base params untouched."""
    loss = loss_fn(params, support)
    if not loss.is_finite():
        raise FloatingPointError(f"non-finite loss in {context}")
    grads = params.grad_arrays(backward(loss))
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for '{name}' in {context}")
    return sgd_step(params, grads, alpha)


def _accumulate(total: dict[str, np.ndarray] | None, grads: dict[str, np.ndarray]):
    if total is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        total[k] += v
    return total


def _outer_step(params: ParamSet, grads: dict[str, np.ndarray],
                opt_state: AdamState | None, config: TrainerConfig):
    if config.outer_optimizer == "sgd":
        return sgd_step(params, grads, config.outer_lr), opt_state
    state, params = adaptive_step(
        opt_state if opt_state is not None else AdamState(),
        params,
        grads,
        lr=config.outer_lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    return params, state


def meta_step_esd(model: SpanDetector, params: ParamSet, episodes: list[Episode],
                  config: TrainerConfig, opt_state: AdamState | None = None,
                  base_seed: int = 0):
    """One outer update of the span detector over a batch of tasks."""
    if not episodes:
        raise ValueError("meta step needs at least one episode")
    total = None
    query_losses = []
    for ti, ep in enumerate(episodes):
        adapted = inner_update(
            params,
            ep.support,
            lambda p, batch: model.batch_loss(p, batch, train=True, seed=derive_seed(base_seed, ti, "sup")),
            config.inner_lr,
            context=f"task {ti} inner step",
        )
        qloss = model.batch_loss(adapted, ep.query, train=True, seed=derive_seed(base_seed, ti, "qry"))
        if not qloss.is_finite():
            raise FloatingPointError(f"non-finite query loss in task {ti}")
        total = _accumulate(total, adapted.grad_arrays(backward(qloss)))
        query_losses.append(float(qloss.data))
    params, opt_state = _outer_step(params, total, opt_state, config)
    return params, opt_state, {"query_loss": float(np.mean(query_losses))}


def meta_step_ec(model: EntityClassifier, params: ParamSet, episodes: list[Episode],
                 config: TrainerConfig, opt_state: AdamState | None = None,
                 base_seed: int = 0):
    """One outer update of the classifier over a batch of tasks.

    Prototypes are built once per task from the support at the base
    parameters (inside the support-loss graph, so the inner step
    differentiates through them); the query loss reuses their values as
    constants and omits the contrastive term.
    """
    if not episodes:
        raise ValueError("meta step needs at least one episode")
    total = None
    query_losses = []
    for ti, ep in enumerate(episodes):
        proto_box = {}

        def support_loss(p, batch, _ep=ep, _ti=ti, _box=proto_box):
            embs, labels = model.entity_embeddings(p, batch, train=True, seed=derive_seed(base_seed, _ti, "sup"))
            if not embs:
                raise ValueError("support contains no entities")
            missing = [t for t in _ep.label_set if t not in set(labels)]
            if missing:
                raise ValueError(f"support does not cover label(s): {', '.join(missing)}")
            protos = build_prototypes(embs, labels, list(_ep.label_set))
            from .classifier import Prototypes

            _box["protos"] = Prototypes(protos.labels, Tensor(protos.matrix.data.copy()))
            dists = [proto_distances(e, protos, model.contrastive.proto_distance) for e in embs]
            loss = ec_loss(dists, [protos.labels.index(lab) for lab in labels])
            if config.gamma != 0.0:
                mode = model.contrastive.resolve_similarity(_ep.k_shot)
                projected = [project(e, p) for e in embs]
                loss = ag.add(loss, ag.scale(contrastive_loss(projected, labels, model.contrastive.tau, mode), config.gamma))
            return loss

        adapted = inner_update(params, ep.support, support_loss, config.inner_lr,
                               context=f"task {ti} inner step")
        qloss = model.batch_loss(
            adapted, ep.query, ep.label_set, ep.k_shot, gamma=0.0,
            train=True, seed=derive_seed(base_seed, ti, "qry"), prototypes=proto_box["protos"],
        )
        if not qloss.is_finite():
            raise FloatingPointError(f"non-finite query loss in task {ti}")
        total = _accumulate(total, adapted.grad_arrays(backward(qloss)))
        query_losses.append(float(qloss.data))
    params, opt_state = _outer_step(params, total, opt_state, config)
    return params, opt_state, {"query_loss": float(np.mean(query_losses))}


def evaluate_esd(model: SpanDetector, params: ParamSet, episode: Episode, config: TrainerConfig) -> float:
    """Adapt one step on support, then span F1 (boundaries only) on query."""
    adapted = inner_update(
        params, episode.support,
        lambda p, batch: model.batch_loss(p, batch, train=False),
        config.inner_lr, context="validation adaptation",
    )
    predicted = [model.decode(adapted, list(ls.tokens), ls.sentence.id) for ls in episode.query]
    gold = [[sp.with_label(None) for sp in ls.spans] for ls in episode.query]
    return micro_f1(predicted, gold).f1


def evaluate_ec(model: EntityClassifier, params: ParamSet, episode: Episode, config: TrainerConfig) -> float:
    """Adapt one step on support, then gold-span typing accuracy on query."""
    adapted = inner_update(
        params, episode.support,
        lambda p, batch: model.batch_loss(p, batch, episode.label_set, episode.k_shot,
                                          config.gamma, train=False),
        config.inner_lr, context="validation adaptation",
    )
    protos = model.support_prototypes(adapted, episode.support, episode.label_set)
    correct = 0
    totaln = 0
    for ls in episode.query:
        for sp in ls.spans:
            p = model.classify(adapted, ls, sp, protos)
            if protos.labels[int(np.argmax(p))] == sp.label:
                correct += 1
            totaln += 1
    return correct / totaln if totaln else 0.0


@dataclass
class Checkpoint:
    kind: str  # esd | ec
    step: int
    score: float
    config: dict
    params: ParamSet


@dataclass
class TrainResult:
    best: Checkpoint
    final_params: ParamSet
    history: list[dict] = field(default_factory=list)


class TrainingAborted(RuntimeError):
    """Raised when a training loop hits a non-finite loss; carries the best
    checkpoint gathered before the failure plus the metrics so far."""

    def __init__(self, message: str, step: int, last_good: Checkpoint, history: list[dict]):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
        self.history = history


def train(model, kind: str, corpus: Corpus, valid_corpus: Corpus,
          config: TrainerConfig, config_snapshot: dict | None = None,
          dtype=np.float64) -> TrainResult:
    """Meta-train one model, validating periodically, keeping the best.

    Deterministic given config.seed: episode sampling, dropout, and
    validation all derive their randomness from it.
    """
    if kind not in ("esd", "ec"):
        raise ValueError(f"unknown model kind '{kind}'")
    rng = np.random.default_rng(derive_seed(config.seed, "init", kind))
    params = model.init_params(rng, dtype)
    opt_state = None
    history: list[dict] = []
    snapshot = config_snapshot or {}

    def validate(p: ParamSet, step: int) -> float:
        scores = []
        for vi in range(config.validation_episodes):
            ep = sample_episode(
                valid_corpus, config.n_way, config.k_shot,
                seed=derive_seed(config.seed, "valid", step, vi),
                query_k_shot=config.query_k_shot, mask_extra_types=config.mask_extra_types,
            )
            if kind == "esd":
                scores.append(evaluate_esd(model, p, ep, config))
            else:
                scores.append(evaluate_ec(model, p, ep, config))
        return float(np.mean(scores)) if scores else 0.0

    best_score = validate(params, 0)
    best = Checkpoint(kind=kind, step=0, score=best_score, config=snapshot, params=params.clone())
    history.append({"step": 0, "train_loss": float("nan"), "val_score": best_score})

    for step in range(1, config.total_steps + 1):
        episodes = [
            sample_episode(
                corpus, config.n_way, config.k_shot,
                seed=derive_seed(config.seed, "episode", step, i),
                query_k_shot=config.query_k_shot, mask_extra_types=config.mask_extra_types,
            )
            for i in range(config.batch_size)
        ]
        step_seed = derive_seed(config.seed, "step", step)
        try:
            if kind == "esd":
                params, opt_state, metrics = meta_step_esd(model, params, episodes, config, opt_state, step_seed)
            else:
                params, opt_state, metrics = meta_step_ec(model, params, episodes, config, opt_state, step_seed)
            row = {"step": step, "train_loss": metrics["query_loss"], "val_score": float("nan")}
            if step % config.validation_interval == 0 or step == config.total_steps:
                score = validate(params, step)
                row["val_score"] = score
                if score > best_score:
                    best_score = score
                    best = Checkpoint(kind=kind, step=step, score=score, config=snapshot, params=params.clone())
        except FloatingPointError as err:
            raise TrainingAborted(str(err), step, best, history) from err
        history.append(row)
    return TrainResult(best=best, final_params=params, history=history)


def finetune(model, kind: str, params: ParamSet, support: list[LabeledSentence],
             label_set: tuple[str, ...], config: TrainerConfig, base_seed: int | None = None) -> ParamSet:
    """Plain gradient descent on the support set (no inner/outer split).

    The span detector descends its NLL; the classifier descends the
    prototype cross-entropy plus gamma times the contrastive term, with
    prototypes rebuilt (differentiably) every step. Gradients are clipped
    to a global norm of config.finetune_clip: unlike the single inner step,
    a run of consecutive full-batch steps can feed back into divergence.
    """
    if not support:
        raise ValueError("empty support set")
    if kind not in ("esd", "ec"):
        raise ValueError(f"unknown model kind '{kind}'")
    seed = config.seed if base_seed is None else base_seed
    current = params
    for step in range(config.finetune_steps):
        if kind == "esd":
            loss = model.batch_loss(current, support, train=True, seed=derive_seed(seed, "ft", step))
        else:
            loss = model.batch_loss(current, support, label_set, config.k_shot, config.gamma,
                                    train=True, seed=derive_seed(seed, "ft", step))
        if not loss.is_finite():
            raise FloatingPointError(f"non-finite loss at finetune step {step}")
        grads = clip_grads(current.grad_arrays(backward(loss)), config.finetune_clip)
        current = sgd_step(current, grads, config.inner_lr)
    return current


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write the MSFC binary atomically."""
    payload = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    kind_b = ckpt.kind.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(kind_b)))
            f.write(kind_b)
            f.write(struct.pack("<I", ckpt.step))
            f.write(struct.pack("<d", ckpt.score))
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            f.write(struct.pack("<I", len(ckpt.params)))
            for name, tensor in ckpt.params.items():
                name_b = name.encode("utf-8")
                arr = tensor.data
                f.write(struct.pack("<I", len(name_b)))
                f.write(name_b)
                f.write(struct.pack("<I", arr.ndim))
                for d in arr.shape:
                    f.write(struct.pack("<I", d))
                wide = arr.dtype == np.float64
                f.write(struct.pack("<B", 1 if wide else 0))
                f.write(np.ascontiguousarray(arr, dtype="<f8" if wide else "<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CheckpointFormatError(ValueError):
    pass


def _read(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"unexpected end of checkpoint while reading {what}")
    return data


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"'{path}' is not an MSFC checkpoint")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (kind_len,) = struct.unpack("<I", _read(f, 4, "kind length"))
        kind = _read(f, kind_len, "kind").decode("utf-8")
        (step,) = struct.unpack("<I", _read(f, 4, "step"))
        (score,) = struct.unpack("<d", _read(f, 8, "score"))
        (cfg_len,) = struct.unpack("<I", _read(f, 4, "config length"))
        config = json.loads(_read(f, cfg_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4, "tensor name length"))
            name = _read(f, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read(f, 4 * rank, "dims")) if rank else ()
            (wide,) = struct.unpack("<B", _read(f, 1, "dtype flag"))
            dt = "<f8" if wide else "<f4"
            size = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read(f, size * (8 if wide else 4), f"tensor '{name}'")
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
        if f.read(1):
            raise CheckpointFormatError("trailing bytes in checkpoint")
    return Checkpoint(kind=kind, step=step, score=score, config=config, params=ParamSet.from_arrays(arrays))
