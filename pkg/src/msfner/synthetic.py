"""Seeded synthetic corpora for exercising the pipeline end to end.

Each entity type owns a single surface word, and an entity is that word
repeated one to three times (tagged S, B E, or B I E). Because a type's
mentions all share one surface form, any support set covers the vocabulary
a query of the same type will use, which makes 1-shot episodes learnable by
construction. Source and target inventories are disjoint so the
train-then-finetune split is a genuine domain transfer; filler words are
shared, giving the encoder context tokens whose representations carry over.
"""

import numpy as np

from .crf import Span
from .episodes import Corpus, LabeledSentence, Sentence

SOURCE_TYPES = ("amber", "basil", "cobalt", "dill")
TARGET_TYPES = ("ember", "fig", "garnet", "hazel")
FILLERS = (
    "the", "a", "near", "old", "quiet", "river", "runs", "past", "stone",
    "walls", "under", "grey", "skies", "while", "birds", "sing",
)


def synthetic_corpus(types: tuple[str, ...], n_sentences: int, seed: int,
                     second_entity_rate: float = 0.25) -> Corpus:
    """Balanced corpus: sentence i carries type i mod len(types)."""
    rng = np.random.default_rng(seed)
    sentences = []
    for i in range(n_sentences):
        t = types[i % len(types)]
        tokens: list[str] = []
        spans: list[Span] = []

        def filler_run(lo, hi):
            for _ in range(int(rng.integers(lo, hi + 1))):
                tokens.append(FILLERS[int(rng.integers(0, len(FILLERS)))])

        def entity():
            length = int(rng.integers(1, 4))
            start = len(tokens)
            tokens.extend([t] * length)
            spans.append(Span(start, start + length - 1, t))

        filler_run(1, 2)
        entity()
        if rng.random() < second_entity_rate:
            filler_run(1, 2)
            entity()
        filler_run(1, 2)
        sentences.append(LabeledSentence(Sentence(f"s{i}", tuple(tokens)), tuple(spans)))
    return Corpus(tuple(sentences))


def source_corpus(n_sentences: int = 120, seed: int = 0) -> Corpus:
    return synthetic_corpus(SOURCE_TYPES, n_sentences, seed)


def target_corpus(n_sentences: int = 120, seed: int = 1) -> Corpus:
    return synthetic_corpus(TARGET_TYPES, n_sentences, seed)
