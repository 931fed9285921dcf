"""CRF scoring, partition, and decoding against brute-force enumeration.

The oracle enumerates all 5^n tag sequences with an independently written
scoring loop; ties (which only arise in the designed instances, not the
continuous random ones) replicate the decoder's lowest-index rule by
minimizing the reversed tag tuple among optimal sequences.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from msfner import autograd as ag
from msfner.autograd import ParamSet, Tensor, backward, grad_check
from msfner.crf import (
    B,
    E,
    I,
    LABEL_NAMES,
    MASK_VALUE,
    NUM_LABELS,
    O,
    S,
    START,
    STOP,
    Span,
    VALID_TRANSITIONS,
    apply_transition_mask,
    crf_nll,
    emissions,
    init_crf_params,
    log_partition,
    sequence_score,
    spans_to_tags,
    tags_to_spans,
    viterbi,
)


def enumerate_scores(em: np.ndarray, trans: np.ndarray):
    """(score, tags) for every tag sequence, scored by an independent loop."""
    n = em.shape[0]
    out = []
    for seq in itertools.product(range(NUM_LABELS), repeat=n):
        s = trans[START, seq[0]]
        for i, y in enumerate(seq):
            s += em[i, y]
            if i > 0:
                s += trans[seq[i - 1], y]
        s += trans[seq[-1], STOP]
        out.append((s, seq))
    return out


def oracle_viterbi(em: np.ndarray, trans: np.ndarray):
    scored = enumerate_scores(em, trans)
    best = max(s for s, _ in scored)
    winners = [seq for s, seq in scored if s >= best - 1e-9]
    choice = min(winners, key=lambda seq: tuple(reversed(seq)))
    return list(choice), best


def oracle_log_partition(em: np.ndarray, trans: np.ndarray) -> float:
    scores = np.array([s for s, _ in enumerate_scores(em, trans)])
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def random_instance(rng, n, masked=True, scale=1.0):
    em = rng.normal(size=(n, NUM_LABELS)) * scale
    trans = rng.normal(size=(7, 7)) * scale
    if masked:
        trans = np.where(VALID_TRANSITIONS, trans, MASK_VALUE)
    return em, trans


def random_valid_tags(rng, n):
    """Sample a uniformly random well-formed BIOES sequence via spans."""
    spans = []
    i = 0
    while i < n:
        if rng.random() < 0.5:
            length = int(rng.integers(1, min(3, n - i) + 1))
            spans.append(Span(i, i + length - 1))
            i += length
        else:
            i += 1
    return spans_to_tags(spans, n)


def test_sequence_score_hand_computed():
    em = np.arange(10, dtype=float).reshape(2, 5)
    trans = np.zeros((7, 7))
    trans[START, O] = 0.5
    trans[O, B] = 0.25
    trans[B, STOP] = -1.0
    score = sequence_score(Tensor(em), Tensor(trans), [O, B])
    # em[0,O] + em[1,B] + start->O + O->B + B->STOP
    assert score.item() == pytest.approx(0.0 + 6.0 + 0.5 + 0.25 - 1.0, abs=1e-12)


def test_sequence_score_matches_enumeration_entry():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        em, trans = random_instance(rng, n)
        tags = random_valid_tags(rng, n)
        scored = dict((tuple(seq), s) for s, seq in enumerate_scores(em, trans))
        got = sequence_score(Tensor(em), Tensor(trans), tags).item()
        assert got == pytest.approx(scored[tuple(tags)], abs=1e-9)


def test_log_partition_uniform_is_log_label_count():
    em = np.zeros((1, 5))
    trans = np.zeros((7, 7))
    assert log_partition(Tensor(em), Tensor(trans)).item() == pytest.approx(math.log(5), abs=1e-12)


def test_log_partition_matches_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(25):
        n = int(rng.integers(1, 6))
        em, trans = random_instance(rng, n, masked=bool(rng.integers(0, 2)))
        got = log_partition(Tensor(em), Tensor(trans)).item()
        assert got == pytest.approx(oracle_log_partition(em, trans), abs=1e-8)


def test_log_partition_dominates_any_path():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        em, trans = random_instance(rng, n)
        tags = random_valid_tags(rng, n)
        lp = log_partition(Tensor(em), Tensor(trans)).item()
        sc = sequence_score(Tensor(em), Tensor(trans), tags).item()
        assert lp >= sc


def test_emission_shift_cancels_in_nll():
    # adding c to every label's emission at one token shifts logZ and the
    # path score equally, leaving the NLL unchanged
    rng = np.random.default_rng(5)
    em, trans = random_instance(rng, 4)
    tags = random_valid_tags(rng, 4)
    base = crf_nll(Tensor(em), Tensor(trans), tags).item()
    em2 = em.copy()
    em2[2] += 3.7
    shifted = crf_nll(Tensor(em2), Tensor(trans), tags).item()
    assert shifted == pytest.approx(base, abs=1e-9)


def test_nll_uniform_frozen():
    em = np.zeros((3, 5))
    trans = np.zeros((7, 7))
    tags = [O, O, O]
    assert crf_nll(Tensor(em), Tensor(trans), tags).item() == pytest.approx(3 * math.log(5), abs=1e-12)


def test_nll_is_proper_distribution():
    rng = np.random.default_rng(6)
    for masked in (False, True):
        em, trans = random_instance(rng, 3, masked=masked)
        total = 0.0
        for seq in itertools.product(range(NUM_LABELS), repeat=3):
            total += math.exp(-crf_nll(Tensor(em), Tensor(trans), list(seq)).item())
        assert total == pytest.approx(1.0, abs=1e-9)


def test_nll_decreases_as_gold_emissions_grow():
    rng = np.random.default_rng(7)
    em, trans = random_instance(rng, 4)
    tags = random_valid_tags(rng, 4)
    prev = None
    for boost in (0.0, 0.5, 1.0, 2.0, 4.0):
        em2 = em.copy()
        for i, t in enumerate(tags):
            em2[i, t] += boost
        val = crf_nll(Tensor(em2), Tensor(trans), tags).item()
        if prev is not None:
            assert val < prev
        prev = val


def test_nll_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    tags = [B, I, E]

    def loss(p):
        tr = apply_transition_mask(p["crf_trans"])
        return crf_nll(p["em"], tr, tags)

    for _ in range(5):
        params = ParamSet.from_arrays(
            {"em": rng.normal(size=(3, 5)), "crf_trans": rng.normal(size=(7, 7))}
        )
        report = grad_check(loss, params, step=1e-5, tol=1e-6)
        assert report.passed, report.failures[:3]


def test_nll_gradient_through_emission_head():
    rng = np.random.default_rng(9)
    h = Tensor(rng.normal(size=(4, 6)))
    tags = random_valid_tags(rng, 4)

    def loss(p):
        em = ag.add(ag.matmul(h, p["crf_emit_w"]), p["crf_emit_b"])
        tr = apply_transition_mask(p["crf_trans"])
        return crf_nll(em, tr, tags)

    params = init_crf_params(6, rng)
    report = grad_check(loss, params, tol=1e-6)
    assert report.passed, report.failures[:3]


def test_masked_entries_receive_no_gradient():
    rng = np.random.default_rng(10)
    params = ParamSet.from_arrays({"crf_trans": rng.normal(size=(7, 7))})
    em = Tensor(rng.normal(size=(3, 5)))
    loss = crf_nll(em, apply_transition_mask(params["crf_trans"]), [S, O, S])
    g = backward(loss)[params["crf_trans"]].data
    assert np.array_equal(g[~VALID_TRANSITIONS], np.zeros((~VALID_TRANSITIONS).sum()))
    assert np.abs(g[VALID_TRANSITIONS]).max() > 0


def test_viterbi_all_zero_breaks_ties_low():
    em = np.zeros((4, 5))
    trans = np.zeros((7, 7))
    tags, score = viterbi(em, trans)
    assert tags == [O, O, O, O]
    assert score == 0.0


def test_viterbi_prefers_dominant_emission():
    em = np.zeros((3, 5))
    em[:, S] = 2.0
    tags, score = viterbi(em, np.zeros((7, 7)))
    assert tags == [S, S, S]
    assert score == pytest.approx(6.0)


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(40):
        n = int(rng.integers(1, 6))
        em, trans = random_instance(rng, n)
        tags, score = viterbi(em, trans)
        exp_tags, exp_score = oracle_viterbi(em, trans)
        assert tags == exp_tags
        assert score == pytest.approx(exp_score, abs=1e-9)


def test_viterbi_respects_mask():
    rng = np.random.default_rng(12)
    for _ in range(30):
        n = int(rng.integers(1, 7))
        em, trans = random_instance(rng, n, scale=3.0)
        tags, _ = viterbi(em, trans)
        path = [START] + tags + [STOP]
        for a, b in zip(path, path[1:]):
            assert VALID_TRANSITIONS[a, b], f"invalid {a}->{b} in {tags}"


def test_apply_transition_mask_values():
    trans = Tensor(np.full((7, 7), 2.5))
    masked = apply_transition_mask(trans).data
    assert np.all(masked[VALID_TRANSITIONS] == 2.5)
    assert np.all(masked[~VALID_TRANSITIONS] == MASK_VALUE)


def test_mask_table_spot_checks():
    assert not VALID_TRANSITIONS[START, I]
    assert not VALID_TRANSITIONS[START, E]
    assert not VALID_TRANSITIONS[O, I]
    assert not VALID_TRANSITIONS[B, STOP]
    assert not VALID_TRANSITIONS[I, O]
    assert not VALID_TRANSITIONS[E, I]
    assert not VALID_TRANSITIONS[S, E]
    assert VALID_TRANSITIONS[B, I] and VALID_TRANSITIONS[I, E] and VALID_TRANSITIONS[E, B]
    assert VALID_TRANSITIONS[START, S] and VALID_TRANSITIONS[S, STOP]
    assert not VALID_TRANSITIONS[START, STOP]


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        log_partition(Tensor(np.zeros((0, 5))), Tensor(np.zeros((7, 7))))
    with pytest.raises(ValueError):
        log_partition(Tensor(np.zeros((2, 4))), Tensor(np.zeros((7, 7))))
    with pytest.raises(ValueError):
        sequence_score(Tensor(np.zeros((2, 5))), Tensor(np.zeros((7, 7))), [0])
    with pytest.raises(ValueError):
        sequence_score(Tensor(np.zeros((2, 5))), Tensor(np.zeros((7, 7))), [0, 9])
    with pytest.raises(ValueError):
        apply_transition_mask(Tensor(np.zeros((5, 5))))


def test_tags_to_spans_examples():
    assert tags_to_spans([S, O, B, I, E]) == [Span(0, 0), Span(2, 4)]
    assert tags_to_spans([B, E]) == [Span(0, 1)]
    assert tags_to_spans([O, O]) == []
    # malformed fragments are dropped
    assert tags_to_spans([B, O, E]) == []
    assert tags_to_spans([I, E]) == []
    assert tags_to_spans([B, I]) == []
    assert tags_to_spans([B, B, E]) == [Span(1, 2)]
    assert tags_to_spans([B, S]) == [Span(1, 1)]
    assert tags_to_spans([E]) == []


def test_spans_to_tags_examples():
    assert spans_to_tags([Span(1, 1)], 3) == [O, S, O]
    assert spans_to_tags([Span(0, 2)], 4) == [B, I, E, O]
    assert spans_to_tags([], 2) == [O, O]


def test_spans_to_tags_errors():
    with pytest.raises(ValueError):
        spans_to_tags([Span(0, 3)], 3)
    with pytest.raises(ValueError):
        spans_to_tags([Span(-1, 0)], 3)
    with pytest.raises(ValueError):
        spans_to_tags([Span(0, 1), Span(1, 2)], 4)


def test_span_round_trip():
    rng = np.random.default_rng(13)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        tags = random_valid_tags(rng, n)
        spans = tags_to_spans(tags)
        assert spans_to_tags(spans, n) == tags
        assert tags_to_spans(spans_to_tags(spans, n)) == spans


def test_label_names_align_with_indices():
    assert LABEL_NAMES == ("O", "B", "I", "E", "S")
    assert (O, B, I, E, S) == (0, 1, 2, 3, 4)
    assert (START, STOP) == (5, 6)
