"""Acceptance suite: one test per shipped guarantee.

Every numeric claim is checked against an oracle computed independently in
this file (path enumeration, central differences, full-sort retrieval), and
the end-to-end claims drive the installed command-line interface exactly the
way a user would. Stated runtime budgets are asserted, so a pathological
slowdown fails the suite rather than going unnoticed.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest

from msfner import autograd as ag
from msfner.autograd import ParamSet, Tensor, grad_check
from msfner.classifier import (
    ContrastiveConfig,
    Prototypes,
    build_prototypes,
    contrastive_loss,
    ec_loss,
    init_projection_params,
    pool_span,
    project,
    proto_distances,
    proto_distribution,
)
from msfner.cli import main
from msfner.crf import (
    MASK_VALUE,
    NUM_LABELS,
    START,
    STOP,
    VALID_TRANSITIONS,
    Span,
    apply_transition_mask,
    crf_nll,
    emissions,
    init_crf_params,
    log_partition,
    spans_to_tags,
    tags_to_spans,
    viterbi,
)
from msfner.encoder import Encoder, EncoderConfig, build_vocab
from msfner.episodes import sample_episode, write_corpus
from msfner.knn import Datastore, DecoderConfig, TypeDistribution, interpolate, knn_distribution
from msfner.meta import (
    EntityClassifier,
    SpanDetector,
    TrainerConfig,
    derive_seed,
    inner_update,
    train,
)
from msfner.synthetic import SOURCE_TYPES, TARGET_TYPES, source_corpus, synthetic_corpus, target_corpus


def enumerate_paths(em: np.ndarray, tr: np.ndarray) -> np.ndarray:
    """Score of every label sequence, by explicit enumeration."""
    n = em.shape[0]
    paths = np.array(list(itertools.product(range(NUM_LABELS), repeat=n)), dtype=np.intp)
    scores = em[np.arange(n)[None, :], paths].sum(axis=1)
    scores += tr[START, paths[:, 0]] + tr[paths[:, -1], STOP]
    if n > 1:
        scores += tr[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return scores


def path_is_valid(tags: list[int]) -> bool:
    seq = [START] + list(tags) + [STOP]
    return all(VALID_TRANSITIONS[a, b] for a, b in zip(seq, seq[1:]))


def test_crf_forward_and_viterbi_match_enumeration():
    t0 = time.monotonic()
    rng = np.random.default_rng(1001)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        em = rng.normal(scale=2.0, size=(n, NUM_LABELS))
        masked = apply_transition_mask(Tensor(rng.normal(size=(7, 7))))
        tr = masked.data

        scores = enumerate_paths(em, tr)
        m = scores.max()
        oracle_logz = float(m + np.log(np.exp(scores - m).sum()))
        got_logz = float(log_partition(Tensor(em), masked).data)
        assert abs(got_logz - oracle_logz) <= 1e-6

        tags, got_best = viterbi(em, tr)
        assert abs(got_best - float(scores.max())) <= 1e-9
        assert path_is_valid(tags)
    assert time.monotonic() - t0 < 30.0


def crf_nll_case(rng):
    n = int(rng.integers(1, 5))
    hid = 3
    h = Tensor(rng.normal(size=(n, hid)))
    tags = [int(t) for t in rng.integers(0, NUM_LABELS, size=n)]
    base = init_crf_params(hid, rng)
    arrays = {name: t.data for name, t in base.items()}
    arrays["crf_trans"] = rng.normal(size=(7, 7)) * 0.5
    params = ParamSet.from_arrays(arrays)

    def f(p):
        return crf_nll(emissions(h, p), apply_transition_mask(p["crf_trans"]), tags)

    return f, params


def contrastive_case(mode, tau):
    def make(rng):
        n = int(rng.integers(4, 7))
        labels = [("a", "b", "c")[int(x)] for x in rng.integers(0, 3, size=n)]
        labels[1] = labels[0]  # at least one positive pair
        inputs = [Tensor(rng.normal(size=4)) for _ in range(n)]
        params = init_projection_params(4, 3, rng)

        def f(p):
            return contrastive_loss([project(e, p) for e in inputs], labels, tau, mode)

        return f, params

    return make


def ec_pipeline_case(rng):
    hid, n_tok = 3, 4

    def random_span():
        start = int(rng.integers(0, n_tok))
        return start, int(rng.integers(start, n_tok))

    sup = [(rng.normal(size=(n_tok, hid)), *random_span(), lab)
           for lab in ("a", "a", "b", "b")]
    queries = [(rng.normal(size=(n_tok, hid)), *random_span(), gold)
               for gold in (0, 1)]
    params = ParamSet.from_arrays({"w": rng.normal(size=(hid, hid))})

    def f(p):
        embs = [pool_span(ag.matmul(Tensor(m), p["w"]), s, e) for m, s, e, _ in sup]
        protos = build_prototypes(embs, [lab for *_, lab in sup], ["a", "b"])
        dists = [proto_distances(pool_span(ag.matmul(Tensor(m), p["w"]), s, e), protos)
                 for m, s, e, _ in queries]
        return ec_loss(dists, [g for *_, g in queries])

    return f, params


def encoder_case(rng):
    cfg = EncoderConfig(mode="trainable", embedding_dim=3, hidden_dim=4,
                        window=1, dropout=0.0, max_len=16)
    enc = Encoder(cfg, vocab=build_vocab([["red", "green", "blue", "dot"]]))
    params = enc.init_params(rng)
    words = ("red", "green", "blue", "dot", "zzz")
    toks = [words[int(i)] for i in rng.integers(0, len(words), size=int(rng.integers(2, 6)))]

    def f(p):
        h = enc.encode(p, toks, "s0", train=False)
        return ag.reduce_sum(ag.mul(h, h))

    return f, params


def test_gradient_suite_matches_central_differences():
    t0 = time.monotonic()
    families = [
        ("crf-nll", crf_nll_case),
        ("contrastive-kl", contrastive_case("gaussian-kl", 0.7)),
        ("contrastive-euclid", contrastive_case("neg-sq-euclid", 0.5)),
        ("ec-pipeline", ec_pipeline_case),
        ("encoder", encoder_case),
    ]
    for fi, (name, case) in enumerate(families):
        worst = 0.0
        for trial in range(50):
            rng = np.random.default_rng(derive_seed(2002, fi, trial))
            f, params = case(rng)
            report = grad_check(f, params, tol=1e-4)
            worst = max(worst, report.max_rel_error)
            assert report.passed, f"{name} trial {trial}: {report.failures[:3]}"
        assert worst < 1e-4, f"{name}: worst relative error {worst}"
    assert time.monotonic() - t0 < 60.0


def assert_distribution(probs: np.ndarray):
    assert (probs >= 0.0).all()
    assert abs(float(probs.sum()) - 1.0) <= 1e-9


def random_labeled_store(rng, labels, count, dim, scale):
    indices = rng.integers(0, len(labels), size=count)
    indices[: len(labels)] = np.arange(len(labels))
    return Datastore(
        labels=labels,
        keys=(rng.normal(size=(count, dim)) * scale).astype(np.float32),
        label_indices=indices.astype(np.int64),
    )


def test_type_distribution_invariants_and_lambda_endpoints():
    rng = np.random.default_rng(3003)
    for _ in range(200):
        dim = int(rng.integers(1, 9))
        n_labels = int(rng.integers(1, 6))
        labels = tuple(f"t{i}" for i in range(n_labels))
        scale = float(rng.uniform(0.5, 15.0))
        protos = Prototypes(labels, Tensor(rng.normal(size=(n_labels, dim)) * scale))
        e = rng.normal(size=dim) * scale

        p_soft = TypeDistribution(labels, proto_distribution(Tensor(e), protos).data)
        assert_distribution(p_soft.probs)

        count = max(n_labels, int(rng.integers(1, 40)))
        store = random_labeled_store(rng, labels, count, dim, 1.0)
        cfg = DecoderConfig(k=int(rng.integers(1, 60)), lam=0.5, tau=float(rng.uniform(0.3, 3.0)))
        p_knn = knn_distribution(e, store, cfg)
        assert_distribution(p_knn.probs)

        mixed = interpolate(p_knn, p_soft, float(rng.uniform(0.0, 1.0)))
        assert_distribution(mixed.probs)

        at_zero = interpolate(p_knn, p_soft, 0.0)
        assert np.array_equal(at_zero.probs, p_soft.probs)
        assert at_zero.argmax_label() == p_soft.argmax_label()
        at_one = interpolate(p_knn, p_soft, 1.0)
        assert np.array_equal(at_one.probs, p_knn.probs)
        assert at_one.argmax_label() == p_knn.argmax_label()


def test_knn_distribution_matches_brute_force():
    rng = np.random.default_rng(4004)
    for _ in range(100):
        dim = int(rng.integers(1, 17))
        count = int(rng.integers(1, 51))
        n_labels = min(int(rng.integers(1, 7)), count)
        labels = tuple(f"t{i}" for i in range(n_labels))
        store = random_labeled_store(rng, labels, count, dim, float(rng.uniform(0.3, 2.0)))
        k = int(rng.integers(1, 61))
        tau = float(rng.uniform(0.5, 4.0))
        e = rng.normal(size=dim)

        got = knn_distribution(e, store, DecoderConfig(k=k, lam=0.1, tau=tau)).probs

        d = ((store.keys.astype(np.float64) - e) ** 2).sum(axis=1)
        picked = np.argsort(d, kind="stable")[: min(k, count)]
        w = np.exp(-d[picked] / tau)
        want = np.zeros(n_labels)
        np.add.at(want, store.label_indices[picked], w)
        want /= want.sum()
        assert np.abs(got - want).max() <= 1e-9


def random_span_set(rng, n: int) -> list[Span]:
    spans = []
    i = 0
    while i < n:
        if rng.random() < 0.45:
            end = min(n - 1, i + int(rng.integers(0, 3)))
            spans.append(Span(i, end, None))
            i = end + 1
        else:
            i += 1
    return spans


def test_bioes_round_trip_and_mask_valid_decoding():
    rng = np.random.default_rng(5005)
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        spans = random_span_set(rng, n)
        assert tags_to_spans(spans_to_tags(spans, n)) == spans
    for _ in range(200):
        n = int(rng.integers(1, 13))
        em = rng.normal(scale=3.0, size=(n, NUM_LABELS))
        masked = apply_transition_mask(Tensor(rng.normal(size=(7, 7))))
        tags, _ = viterbi(em, masked)
        assert path_is_valid(tags)


def test_maml_inner_step_and_meta_training_progress():
    t0 = time.monotonic()
    corpus = source_corpus(120, seed=5)
    vocab = build_vocab([list(ls.tokens) for ls in corpus.sentences])
    enc_cfg = EncoderConfig(mode="trainable", embedding_dim=8, hidden_dim=10,
                            window=1, dropout=0.1, max_len=64)
    cc = ContrastiveConfig(tau=0.1, similarity="auto", proto_distance="sq-euclid",
                           projection_dim=8)
    alpha = 1e-3
    esd_wins = ec_wins = 0
    for ti in range(100):
        rng = np.random.default_rng(derive_seed(6006, "init", ti))
        ep = sample_episode(corpus, 3, 1, seed=derive_seed(6006, "task", ti))

        esd = SpanDetector(Encoder(enc_cfg, vocab=vocab))
        esd_loss = lambda p, b: esd.batch_loss(p, b, train=True, seed=ti)
        p0 = esd.init_params(rng)
        before = float(esd_loss(p0, ep.support).data)
        after = float(esd_loss(inner_update(p0, ep.support, esd_loss, alpha), ep.support).data)
        esd_wins += after < before

        ec = EntityClassifier(Encoder(enc_cfg, vocab=vocab), cc)
        ec_loss_fn = lambda p, b: ec.batch_loss(p, b, ep.label_set, ep.k_shot,
                                                gamma=1.0, train=True, seed=ti)
        q0 = ec.init_params(rng)
        before = float(ec_loss_fn(q0, ep.support).data)
        after = float(ec_loss_fn(inner_update(q0, ep.support, ec_loss_fn, alpha), ep.support).data)
        ec_wins += after < before
    assert esd_wins >= 95, f"span detector inner step reduced loss in only {esd_wins}/100 tasks"
    assert ec_wins >= 95, f"classifier inner step reduced loss in only {ec_wins}/100 tasks"

    train_cfg = TrainerConfig(inner_lr=0.05, outer_lr=0.01, outer_optimizer="adaptive",
                              batch_size=4, total_steps=300, n_way=4, k_shot=1,
                              validation_interval=100, validation_episodes=2, seed=0)
    model = SpanDetector(Encoder(
        EncoderConfig(mode="trainable", embedding_dim=16, hidden_dim=24,
                      window=1, dropout=0.2, max_len=64),
        vocab=vocab,
    ))
    result = train(model, "esd", corpus, corpus, train_cfg)
    losses = [row["train_loss"] for row in result.history if row["step"] >= 1]
    assert len(losses) == 300
    early = float(np.mean(losses[:10]))
    late = float(np.mean(losses[-10:]))
    assert late <= 0.5 * early, f"moving average went {early:.4f} -> {late:.4f}"
    assert time.monotonic() - t0 < 180.0


def run_cli(args: list[str]):
    rc = main(args)
    assert rc == 0, f"command failed with exit code {rc}: {args}"


def eval_mean_f1(table_path) -> float:
    for line in table_path.read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if parts[0] == "mean":
            return float(parts[3])
    raise AssertionError(f"no mean row in {table_path}")


TRAIN_FLAGS = [
    "--seed", "0",
    "--embedding-dim", "16", "--hidden-dim", "24", "--max-len", "64",
    "--inner-lr", "0.05", "--outer-lr", "0.01",
    "--batch-size", "4", "--total-steps", "300",
    "--n-way", "4", "--k-shot", "1",
    "--validation-interval", "50", "--validation-episodes", "2",
]


def test_synthetic_end_to_end_f1(tmp_path):
    t0 = time.monotonic()
    source_path = str(tmp_path / "source.txt")
    target_path = str(tmp_path / "target.txt")
    vocab_path = str(tmp_path / "vocab.txt")
    write_corpus(source_corpus(160, 0), source_path, "io-typed")
    write_corpus(target_corpus(160, 1), target_path, "io-typed")
    write_corpus(synthetic_corpus(SOURCE_TYPES + TARGET_TYPES, 32, 7), vocab_path, "io-typed")

    run_cli(["train-esd", "--train-corpus", source_path, "--vocab-corpus", vocab_path,
             "--out-dir", str(tmp_path / "esd")] + TRAIN_FLAGS)
    run_cli(["train-ec", "--train-corpus", source_path, "--vocab-corpus", vocab_path,
             "--out-dir", str(tmp_path / "ec")] + TRAIN_FLAGS)
    run_cli(["sample-episodes", "--train-corpus", target_path, "--out-dir", str(tmp_path / "eps"),
             "--episodes", "10", "--n-way", "4", "--k-shot", "1", "--max-len", "64", "--seed", "0"])

    full_pairs, zero_pairs = [], []
    for i in range(10):
        ep = str(tmp_path / "eps" / f"episode_{i:03d}.json")
        work = tmp_path / f"ep{i:03d}"
        run_cli(["finetune", "--esd-checkpoint", str(tmp_path / "esd" / "esd.msfc"),
                 "--ec-checkpoint", str(tmp_path / "ec" / "ec.msfc"),
                 "--episode", ep, "--out-dir", str(work),
                 "--finetune-steps", "20", "--inner-lr", "0.05", "--seed", "0"])
        run_cli(["build-datastore", "--ec-checkpoint", str(work / "ec_finetuned.msfc"),
                 "--episode", ep, "--out-dir", str(work), "--seed", "0"])
        for lam, out, pairs in (("0.1", work / "full", full_pairs),
                                ("0.0", work / "zero", zero_pairs)):
            run_cli(["infer", "--esd-checkpoint", str(work / "esd_finetuned.msfc"),
                     "--ec-checkpoint", str(work / "ec_finetuned.msfc"),
                     "--datastore", str(work / "datastore.msfd"), "--episode", ep,
                     "--out-dir", str(out), "--knn-lambda", lam, "--knn-k", "10", "--seed", "0"])
            pairs += ["--episode", ep, "--predictions", str(out / "predictions.jsonl")]

    run_cli(["eval"] + full_pairs + ["--out-dir", str(tmp_path / "eval_full"), "--seed", "0"])
    run_cli(["eval"] + zero_pairs + ["--out-dir", str(tmp_path / "eval_zero"), "--seed", "0"])
    mean_full = eval_mean_f1(tmp_path / "eval_full" / "eval.tsv")
    mean_zero = eval_mean_f1(tmp_path / "eval_zero" / "eval.tsv")
    assert mean_full >= 0.90, f"full decode mean F1 {mean_full:.4f}"
    assert abs(mean_full - mean_zero) <= 0.10, (
        f"retrieval-free decode moved mean F1 from {mean_full:.4f} to {mean_zero:.4f}"
    )
    assert time.monotonic() - t0 < 300.0


TINY_FLAGS = [
    "--seed", "3",
    "--embedding-dim", "5", "--hidden-dim", "6", "--max-len", "64",
    "--inner-lr", "0.05", "--outer-lr", "0.01",
    "--batch-size", "2", "--total-steps", "30",
    "--n-way", "2", "--k-shot", "1",
    "--validation-interval", "10", "--validation-episodes", "1",
]


def run_pipeline_once(base, source_path, target_path, vocab_path) -> list:
    run_cli(["train-esd", "--train-corpus", source_path, "--vocab-corpus", vocab_path,
             "--out-dir", str(base / "esd")] + TINY_FLAGS)
    run_cli(["train-ec", "--train-corpus", source_path, "--vocab-corpus", vocab_path,
             "--out-dir", str(base / "ec")] + TINY_FLAGS)
    run_cli(["sample-episodes", "--train-corpus", target_path, "--out-dir", str(base / "eps"),
             "--episodes", "1", "--n-way", "2", "--k-shot", "1", "--max-len", "64", "--seed", "3"])
    ep = str(base / "eps" / "episode_000.json")
    run_cli(["finetune", "--esd-checkpoint", str(base / "esd" / "esd.msfc"),
             "--ec-checkpoint", str(base / "ec" / "ec.msfc"), "--episode", ep,
             "--out-dir", str(base / "ft"), "--finetune-steps", "10",
             "--inner-lr", "0.05", "--seed", "3"])
    run_cli(["build-datastore", "--ec-checkpoint", str(base / "ft" / "ec_finetuned.msfc"),
             "--episode", ep, "--out-dir", str(base / "ds"), "--seed", "3"])
    run_cli(["infer", "--esd-checkpoint", str(base / "ft" / "esd_finetuned.msfc"),
             "--ec-checkpoint", str(base / "ft" / "ec_finetuned.msfc"),
             "--datastore", str(base / "ds" / "datastore.msfd"), "--episode", ep,
             "--out-dir", str(base / "inf"), "--seed", "3"])
    run_cli(["eval", "--episode", ep, "--predictions", str(base / "inf" / "predictions.jsonl"),
             "--out-dir", str(base / "ev"), "--seed", "3"])
    return [
        base / "esd" / "esd.msfc", base / "esd" / "esd_metrics.tsv",
        base / "ec" / "ec.msfc", base / "ec" / "ec_metrics.tsv",
        base / "eps" / "episode_000.json",
        base / "ft" / "esd_finetuned.msfc", base / "ft" / "ec_finetuned.msfc",
        base / "ds" / "datastore.msfd",
        base / "inf" / "predictions.jsonl",
        base / "ev" / "eval.tsv",
    ]


def test_rerun_determinism_byte_identical(tmp_path):
    source_path = str(tmp_path / "source.txt")
    target_path = str(tmp_path / "target.txt")
    vocab_path = str(tmp_path / "vocab.txt")
    write_corpus(source_corpus(48, 0), source_path, "io-typed")
    write_corpus(target_corpus(48, 1), target_path, "io-typed")
    write_corpus(synthetic_corpus(SOURCE_TYPES + TARGET_TYPES, 24, 7), vocab_path, "io-typed")

    first = run_pipeline_once(tmp_path / "a", source_path, target_path, vocab_path)
    second = run_pipeline_once(tmp_path / "b", source_path, target_path, vocab_path)
    for fa, fb in zip(first, second):
        assert fa.read_bytes() == fb.read_bytes(), f"{fa.name} differs between reruns"


def test_default_config_dump_values(tmp_path, monkeypatch):
    monkeypatch.delenv("MSFNER_SEED", raising=False)
    corpus_path = str(tmp_path / "all_types.txt")
    write_corpus(synthetic_corpus(SOURCE_TYPES + TARGET_TYPES, 80, 11), corpus_path, "io-typed")
    out = tmp_path / "out"
    run_cli(["sample-episodes", "--train-corpus", corpus_path,
             "--out-dir", str(out), "--episodes", "1"])
    lines = (out / "resolved_config.cfg").read_text(encoding="utf-8").splitlines()
    for expected in (
        "knn_k = 10",
        "knn_lambda = 0.1",
        "dropout = 0.2",
        "batch_size = 32",
        "total_steps = 1000",
        "outer_lr = 3e-05",
        "max_len = 128",
    ):
        assert expected in lines, f"missing '{expected}' in resolved config dump"
