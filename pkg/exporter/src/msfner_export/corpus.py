"""Token/tag corpus reader.

The on-disk rules match the core pipeline's reader: UTF-8 text, one
"token<TAB>tag" line per token, blank lines between sentences, and ids
assigned positionally as s0, s1, ... Two tag conventions are accepted,
io-typed (any type name or O) and bioes-typed (O or B-/I-/E-/S- prefixed).
Tags are validated so a corpus this module accepts also parses downstream,
but only the tokens matter for embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

CORPUS_FORMATS = ("io-typed", "bioes-typed")


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[str, ...]


class CorpusParseError(ValueError):
    """Malformed corpus text; the message carries a 1-based line number."""


def _close_sentence(tokens, start_line, index, max_len, out):
    if not tokens:
        return
    if len(tokens) > max_len:
        raise CorpusParseError(
            f"line {start_line}: sentence of {len(tokens)} tokens exceeds max length {max_len}"
        )
    out.append(Sentence(id=f"s{index}", tokens=tuple(tokens)))


def parse_corpus(path: str, fmt: str, max_len: int = 128) -> list[Sentence]:
    """Read a token/tag corpus file.

    Raises CorpusParseError (with line numbers) for lines without a tab,
    empty tokens, unrecognized bioes tags, and sentences longer than max_len.
    """
    if fmt not in CORPUS_FORMATS:
        raise ValueError(f"unknown corpus format '{fmt}'")
    sentences: list[Sentence] = []
    tokens: list[str] = []
    start_line = 1
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                _close_sentence(tokens, start_line, len(sentences), max_len, sentences)
                tokens = []
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
    _close_sentence(tokens, start_line, len(sentences), max_len, sentences)
    return sentences
