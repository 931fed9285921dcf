"""Corpus ingestion, N-way K~2K-shot episode sampling, and span metrics.

Corpora are UTF-8 text, one "token<TAB>tag" per line with blank lines between
sentences. Two tag conventions are understood: io-typed (the tag is a type
name or O; maximal runs of one type form an entity) and bioes-typed (tags
like B-person/I-person/E-person/S-person, with malformed fragments dropped
the same way the decoder drops them). Episodes can be cached to JSON and
read back; support/query sentence ids never overlap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .crf import Span

CORPUS_FORMATS = ("io-typed", "bioes-typed")


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class LabeledSentence:
    sentence: Sentence
    spans: tuple[Span, ...]

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.sentence.tokens


@dataclass
class Corpus:
    sentences: list[LabeledSentence]
    types: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        inventory = set()
        for ls in self.sentences:
            occupied = set()
            n = len(ls.tokens)
            for sp in ls.spans:
                if sp.label is None:
                    raise ValueError(f"untyped span in sentence '{ls.sentence.id}'")
                if not (0 <= sp.start <= sp.end < n):
                    raise ValueError(f"span out of range in sentence '{ls.sentence.id}'")
                cells = set(range(sp.start, sp.end + 1))
                if cells & occupied:
                    raise ValueError(f"overlapping spans in sentence '{ls.sentence.id}'")
                occupied |= cells
                inventory.add(sp.label)
        self.types = tuple(sorted(inventory))

    def __len__(self):
        return len(self.sentences)


class CorpusParseError(ValueError):
    """Malformed corpus text; the message carries a 1-based line number."""


def _close_sentence(tokens, typed_tags, fmt, start_line, index, max_len, out):
    if not tokens:
        return
    if len(tokens) > max_len:
        raise CorpusParseError(
            f"line {start_line}: sentence of {len(tokens)} tokens exceeds max length {max_len}"
        )
    if fmt == "io-typed":
        spans = _io_runs_to_spans(typed_tags)
    else:
        spans = _bioes_to_spans(typed_tags)
    out.append(LabeledSentence(Sentence(id=f"s{index}", tokens=tuple(tokens)), tuple(spans)))


def _io_runs_to_spans(tags: list[str]) -> list[Span]:
    spans = []
    start = None
    current = None
    for i, tag in enumerate(tags + ["O"]):
        if tag == current and tag != "O":
            continue
        if current is not None and current != "O":
            spans.append(Span(start, i - 1, current))
        start, current = i, tag
    return spans


def _bioes_to_spans(tags: list[str]) -> list[Span]:
    spans = []
    open_start = None
    open_type = None
    for i, tag in enumerate(tags):
        if tag == "O":
            open_start = None
            continue
        prefix, typ = tag.split("-", 1)
        if prefix == "S":
            spans.append(Span(i, i, typ))
            open_start = None
        elif prefix == "B":
            open_start, open_type = i, typ
        elif prefix == "I":
            if open_start is not None and typ != open_type:
                open_start = None  # type switch mid-run: drop the fragment
        elif prefix == "E":
            if open_start is not None and typ == open_type:
                spans.append(Span(open_start, i, typ))
            open_start = None
    return spans


def parse_corpus(path: str, fmt: str, max_len: int = 128) -> Corpus:
    """Read a token/tag corpus file.

    Raises CorpusParseError (with line numbers) for lines without a tab,
    unrecognized bioes tags, and sentences longer than max_len.
    """
    if fmt not in CORPUS_FORMATS:
        raise ValueError(f"unknown corpus format '{fmt}'")
    sentences: list[LabeledSentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    start_line = 1
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                _close_sentence(tokens, tags, fmt, start_line, len(sentences), max_len, sentences)
                tokens, tags = [], []
                start_line = lineno + 1
                continue
            if "\t" not in line:
                raise CorpusParseError(f"line {lineno}: expected 'token<TAB>tag', got {line!r}")
            token, tag = line.split("\t", 1)
            if not token:
                raise CorpusParseError(f"line {lineno}: empty token")
            if fmt == "bioes-typed" and tag != "O":
                if "-" not in tag or tag.split("-", 1)[0] not in ("B", "I", "E", "S"):
                    raise CorpusParseError(f"line {lineno}: unrecognized bioes tag {tag!r}")
            tokens.append(token)
            tags.append(tag)
    _close_sentence(tokens, tags, fmt, start_line, len(sentences), max_len, sentences)
    return Corpus(sentences)


def write_corpus(corpus: Corpus, path: str, fmt: str) -> None:
    """Serialize a corpus; parse(write(c)) reproduces c for bioes-typed
    always, and for io-typed whenever no two same-type spans are adjacent."""
    if fmt not in CORPUS_FORMATS:
        raise ValueError(f"unknown corpus format '{fmt}'")
    lines = []
    for ls in corpus.sentences:
        tags = ["O"] * len(ls.tokens)
        for sp in ls.spans:
            if fmt == "io-typed":
                for i in range(sp.start, sp.end + 1):
                    tags[i] = sp.label
            elif sp.start == sp.end:
                tags[sp.start] = f"S-{sp.label}"
            else:
                tags[sp.start] = f"B-{sp.label}"
                tags[sp.end] = f"E-{sp.label}"
                for i in range(sp.start + 1, sp.end):
                    tags[i] = f"I-{sp.label}"
        for token, tag in zip(ls.tokens, tags):
            lines.append(f"{token}\t{tag}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))


@dataclass
class Episode:
    support: list[LabeledSentence]
    query: list[LabeledSentence]
    label_set: tuple[str, ...]
    n_way: int
    k_shot: int


class SamplingError(RuntimeError):
    pass


def _greedy_fill(pool: list[LabeledSentence], chosen: set[str], k: int, rng,
                 mask_extra_types: bool, max_passes: int):
    for _ in range(max_passes):
        order = rng.permutation(len(pool))
        counts = {t: 0 for t in chosen}
        taken: list[LabeledSentence] = []
        for idx in order:
            cand = pool[int(idx)]
            if mask_extra_types:
                spans = tuple(sp for sp in cand.spans if sp.label in chosen)
                if spans != cand.spans:
                    cand = LabeledSentence(cand.sentence, spans)
            else:
                spans = cand.spans
                if any(sp.label not in chosen for sp in spans):
                    continue
            if not spans:
                continue
            gain: dict[str, int] = {}
            for sp in spans:
                gain[sp.label] = gain.get(sp.label, 0) + 1
            if any(counts[t] + c > 2 * k for t, c in gain.items()):
                continue
            taken.append(cand)
            for t, c in gain.items():
                counts[t] += c
            if all(v >= k for v in counts.values()):
                return taken
    return None


def sample_episode(corpus: Corpus, n_way: int, k_shot: int, seed: int,
                   query_k_shot: int | None = None, mask_extra_types: bool = False,
                   max_passes: int = 20) -> Episode:
    """Greedy N-way K~2K-shot sampling, deterministic given the seed.

    Support first, then query from the remaining sentences with the same
    acceptance rule (query_k_shot overrides K for the query side). A sentence
    is admitted only if it has at least one entity, every entity type is
    among the chosen N (unless mask_extra_types relabels strays to O by
    dropping them), and no chosen type's entity count would exceed 2K.
    """
    if n_way < 1 or k_shot < 1:
        raise ValueError("n_way and k_shot must be at least 1")
    sent_count: dict[str, int] = {}
    for ls in corpus.sentences:
        for t in {sp.label for sp in ls.spans}:
            sent_count[t] = sent_count.get(t, 0) + 1
    eligible = sorted(t for t, c in sent_count.items() if c >= k_shot)
    if len(eligible) < n_way:
        raise SamplingError(
            f"corpus has {len(eligible)} types with >= {k_shot} sentences, need {n_way}"
        )
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(eligible, size=n_way, replace=False).tolist())
    support = _greedy_fill(corpus.sentences, chosen, k_shot, rng, mask_extra_types, max_passes)
    if support is None:
        raise SamplingError(f"could not fill a {n_way}-way {k_shot}~{2*k_shot}-shot support in {max_passes} passes")
    support_ids = {ls.sentence.id for ls in support}
    remaining = [ls for ls in corpus.sentences if ls.sentence.id not in support_ids]
    qk = k_shot if query_k_shot is None else query_k_shot
    query = _greedy_fill(remaining, chosen, qk, rng, mask_extra_types, max_passes)
    if query is None:
        raise SamplingError(f"could not fill a {n_way}-way {qk}~{2*qk}-shot query in {max_passes} passes")
    return Episode(support=support, query=query, label_set=tuple(sorted(chosen)), n_way=n_way, k_shot=k_shot)


def episode_to_dict(ep: Episode) -> dict:
    def pack(group):
        return [
            {
                "id": ls.sentence.id,
                "tokens": list(ls.tokens),
                "spans": [[sp.start, sp.end, sp.label] for sp in ls.spans],
            }
            for ls in group
        ]

    return {
        "n": ep.n_way,
        "k": ep.k_shot,
        "types": list(ep.label_set),
        "support": pack(ep.support),
        "query": pack(ep.query),
    }


def episode_from_dict(data: dict) -> Episode:
    def unpack(group, prefix):
        out = []
        for i, item in enumerate(group):
            sid = item.get("id", f"{prefix}{i}")
            spans = tuple(Span(int(s), int(e), str(t)) for s, e, t in item["spans"])
            out.append(LabeledSentence(Sentence(id=sid, tokens=tuple(item["tokens"])), spans))
        return out

    return Episode(
        support=unpack(data["support"], "support-"),
        query=unpack(data["query"], "query-"),
        label_set=tuple(data["types"]),
        n_way=int(data["n"]),
        k_shot=int(data["k"]),
    )


def write_episode(ep: Episode, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(episode_to_dict(ep), f, indent=1, sort_keys=True)
        f.write("\n")


def read_episode(path: str) -> Episode:
    with open(path, encoding="utf-8") as f:
        return episode_from_dict(json.load(f))


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    predicted: int
    gold: int
    correct: int


def micro_f1(predicted: list[list[Span]], gold: list[list[Span]]) -> EvalReport:
    """Exact-match span F1, micro-averaged over sentences.

    A prediction counts iff (sentence index, start, end, label) all match.
    Zero predictions or zero gold give precision/recall 0 by convention.
    """
    if len(predicted) != len(gold):
        raise ValueError(f"prediction/gold sentence counts differ: {len(predicted)} vs {len(gold)}")
    pred_set = {(i, sp.start, sp.end, sp.label) for i, spans in enumerate(predicted) for sp in spans}
    gold_set = {(i, sp.start, sp.end, sp.label) for i, spans in enumerate(gold) for sp in spans}
    correct = len(pred_set & gold_set)
    p = correct / len(pred_set) if pred_set else 0.0
    r = correct / len(gold_set) if gold_set else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return EvalReport(precision=p, recall=r, f1=f1, predicted=len(pred_set), gold=len(gold_set), correct=correct)
