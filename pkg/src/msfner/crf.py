"""Linear-chain CRF over the BIOES tag scheme, plus span/tag conversion.

Tag indices are fixed: O=0, B=1, I=2, E=3, S=4. The transition matrix is
7x7 with START=5 and STOP=6; those two extra rows/columns score how a
sequence may begin and end. Scoring and decoding operate on whatever
matrices they are given, so the structural BIOES constraints are imposed by
handing them a matrix that went through :func:`apply_transition_mask`, which
overwrites invalid entries with a large negative constant while leaving the
valid entries trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tensor

O, B, I, E, S = 0, 1, 2, 3, 4
START, STOP = 5, 6
NUM_LABELS = 5
NUM_STATES = 7
MASK_VALUE = -1e4

LABEL_NAMES = ("O", "B", "I", "E", "S")


def _build_valid() -> np.ndarray:
    valid = np.zeros((NUM_STATES, NUM_STATES), dtype=bool)
    valid[O, [O, B, S, STOP]] = True
    valid[B, [I, E]] = True
    valid[I, [I, E]] = True
    valid[E, [O, B, S, STOP]] = True
    valid[S, [O, B, S, STOP]] = True
    valid[START, [O, B, S]] = True
    return valid


VALID_TRANSITIONS = _build_valid()
VALID_TRANSITIONS.setflags(write=False)


def apply_transition_mask(trans: Tensor) -> Tensor:
    """Overwrite structurally invalid transitions with MASK_VALUE.

    Composed as trans*valid + MASK_VALUE*invalid so gradients flow only to
    the valid entries.
    """
    if trans.data.shape != (NUM_STATES, NUM_STATES):
        raise ValueError(f"transition matrix must be {NUM_STATES}x{NUM_STATES}, got {trans.data.shape}")
    valid = VALID_TRANSITIONS.astype(trans.dtype)
    offset = MASK_VALUE * (1.0 - valid)
    return ag.add(ag.mul(trans, Tensor(valid)), Tensor(offset))


def init_crf_params(hidden_dim: int, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    """Emission projection + transition matrix, transitions starting at zero."""
    scale = 1.0 / np.sqrt(hidden_dim)
    return ParamSet.from_arrays(
        {
            "crf_emit_w": (rng.normal(size=(hidden_dim, NUM_LABELS)) * scale).astype(dtype),
            "crf_emit_b": np.zeros(NUM_LABELS, dtype=dtype),
            "crf_trans": np.zeros((NUM_STATES, NUM_STATES), dtype=dtype),
        }
    )


def emissions(h: Tensor, params: ParamSet) -> Tensor:
    """Per-token label scores, shape (n, 5)."""
    return ag.add(ag.matmul(h, params["crf_emit_w"]), params["crf_emit_b"])


def _check_instance(em: Tensor, trans: Tensor, tags=None) -> int:
    if em.data.ndim != 2 or em.data.shape[1] != NUM_LABELS:
        raise ValueError(f"emissions must be (n, {NUM_LABELS}), got {em.data.shape}")
    n = em.data.shape[0]
    if n == 0:
        raise ValueError("empty sequence")
    if trans.data.shape != (NUM_STATES, NUM_STATES):
        raise ValueError(f"transitions must be {NUM_STATES}x{NUM_STATES}, got {trans.data.shape}")
    if tags is not None:
        if len(tags) != n:
            raise ValueError(f"tag sequence length {len(tags)} does not match {n} tokens")
        if any(t < 0 or t >= NUM_LABELS for t in tags):
            raise ValueError("tag index out of range")
    return n


def sequence_score(em: Tensor, trans: Tensor, tags: list[int]) -> Tensor:
    """Score of one tag path: emissions plus transitions, START/STOP included."""
    n = _check_instance(em, trans, tags)
    em_part = ag.reduce_sum(ag.take_pairs(em, np.arange(n), tags))
    rows = [START] + list(tags)
    cols = list(tags) + [STOP]
    trans_part = ag.reduce_sum(ag.take_pairs(trans, rows, cols))
    return ag.add(em_part, trans_part)


def _em_row(em: Tensor, i: int) -> Tensor:
    return ag.reshape(ag.slice2d(em, i, i + 1, 0, NUM_LABELS), (NUM_LABELS,))


def log_partition(em: Tensor, trans: Tensor) -> Tensor:
    """log sum over all label sequences of exp(score), by the forward recursion.

    alpha_0[y] = em[0, y] + trans[START, y]
    alpha_i[y] = em[i, y] + logsumexp_y'(alpha_{i-1}[y'] + trans[y', y])
    logZ       = logsumexp_y(alpha_{n-1}[y] + trans[y, STOP])
    """
    n = _check_instance(em, trans)
    inner = ag.slice2d(trans, 0, NUM_LABELS, 0, NUM_LABELS)
    start_row = ag.reshape(ag.slice2d(trans, START, START + 1, 0, NUM_LABELS), (NUM_LABELS,))
    stop_col = ag.reshape(ag.slice2d(trans, 0, NUM_LABELS, STOP, STOP + 1), (NUM_LABELS,))
    alpha = ag.add(_em_row(em, 0), start_row)
    for i in range(1, n):
        # broadcast alpha down columns of the 5x5 inner transition block
        expanded = ag.add(ag.reshape(alpha, (NUM_LABELS, 1)), inner)
        alpha = ag.add(_em_row(em, i), ag.logsumexp(expanded, axis=0))
    return ag.logsumexp(ag.add(alpha, stop_col))


def crf_nll(em: Tensor, trans: Tensor, tags: list[int]) -> Tensor:
    """Negative log-likelihood of the gold path: logZ - score(path)."""
    return ag.sub(log_partition(em, trans), sequence_score(em, trans, tags))


def viterbi(em, trans) -> tuple[list[int], float]:
    """Highest-scoring tag sequence and its score.

    Ties break toward the lowest label index at every argmax, so an all-zero
    instance decodes to all O. Pure numpy; accepts Tensors or arrays.
    """
    em_a = em.data if isinstance(em, Tensor) else np.asarray(em, dtype=np.float64)
    tr_a = trans.data if isinstance(trans, Tensor) else np.asarray(trans, dtype=np.float64)
    _check_instance(Tensor(em_a), Tensor(tr_a))
    n = em_a.shape[0]
    inner = tr_a[:NUM_LABELS, :NUM_LABELS]
    delta = em_a[0] + tr_a[START, :NUM_LABELS]
    backptr = np.zeros((n, NUM_LABELS), dtype=np.intp)
    for i in range(1, n):
        cand = delta[:, None] + inner  # cand[prev, cur]
        backptr[i] = np.argmax(cand, axis=0)
        delta = em_a[i] + cand[backptr[i], np.arange(NUM_LABELS)]
    final = delta + tr_a[:NUM_LABELS, STOP]
    last = int(np.argmax(final))
    score = float(final[last])
    tags = [last]
    for i in range(n - 1, 0, -1):
        last = int(backptr[i, last])
        tags.append(last)
    tags.reverse()
    return tags, score


@dataclass(frozen=True, order=True)
class Span:
    """An entity span with inclusive token boundaries; label None = untyped."""

    start: int
    end: int
    label: str | None = None

    def with_label(self, label: str) -> "Span":
        return Span(self.start, self.end, label)


def tags_to_spans(tags: list[int]) -> list[Span]:
    """Decode BIOES indices into untyped spans.

    Emits one span per S tag and per maximal well-formed B I* E run;
    malformed fragments (B without E, dangling I/E) are dropped.
    """
    spans: list[Span] = []
    open_start: int | None = None
    for i, t in enumerate(tags):
        if t == S:
            spans.append(Span(i, i))
            open_start = None
        elif t == B:
            open_start = i
        elif t == I:
            pass  # continues an open run, or dangles (no-op either way)
        elif t == E:
            if open_start is not None:
                spans.append(Span(open_start, i))
            open_start = None
        else:
            open_start = None
    return spans


def spans_to_tags(spans: list[Span], length: int) -> list[int]:
    """Encode non-overlapping spans as BIOES indices over `length` tokens."""
    tags = [O] * length
    occupied = [False] * length
    for sp in spans:
        if sp.start < 0 or sp.end >= length or sp.start > sp.end:
            raise ValueError(f"span ({sp.start}, {sp.end}) out of range for length {length}")
        if any(occupied[sp.start : sp.end + 1]):
            raise ValueError(f"span ({sp.start}, {sp.end}) overlaps another span")
        for i in range(sp.start, sp.end + 1):
            occupied[i] = True
        if sp.start == sp.end:
            tags[sp.start] = S
        else:
            tags[sp.start] = B
            tags[sp.end] = E
            for i in range(sp.start + 1, sp.end):
                tags[i] = I
    return tags
