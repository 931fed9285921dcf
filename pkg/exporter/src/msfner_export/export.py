"""Run a pretrained encoder over a corpus and write MSFE embeddings.

Sentences are encoded one at a time in evaluation mode (no dropout, no
gradients), and subword vectors are pooled back to the corpus's token
boundaries so every output matrix has exactly one row per source token.
Output dimension is the encoder's hidden size; values are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer
from transformers.utils import logging as hf_logging

from .corpus import CORPUS_FORMATS, Sentence, parse_corpus
from .msfe import write_msfe

POOLING_MODES = ("mean", "first-subword")


class ExportError(ValueError):
    """Sentence-level export failure; the message names the sentence id."""


@dataclass(frozen=True)
class ExportJob:
    input_path: str
    fmt: str
    model: str
    out_path: str
    pooling: str = "mean"
    device: str = "cpu"

    def __post_init__(self):
        if self.fmt not in CORPUS_FORMATS:
            raise ValueError(f"unknown corpus format '{self.fmt}'")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling mode '{self.pooling}'")
        try:
            torch.device(self.device)
        except RuntimeError as err:
            raise ValueError(f"bad device hint '{self.device}': {err}") from err


def load_encoder(model_name: str, device: str = "cpu"):
    """Load tokenizer and encoder from a model name or local directory.

    The tokenizer must be a fast one: subword-to-token alignment relies on
    its word ids.
    """
    hf_logging.disable_progress_bar()
    tokenizer = AutoTokenizer.from_pretrained(model_name)
    if not getattr(tokenizer, "is_fast", False):
        raise ExportError(f"model '{model_name}' has no fast tokenizer; cannot align subwords")
    model = AutoModel.from_pretrained(model_name).to(torch.device(device))
    model.eval()
    return tokenizer, model


def encode_sentence(tokenizer, model, sentence: Sentence, pooling: str) -> np.ndarray:
    """Embed one sentence, pooling subword vectors per source token.

    Raises ExportError when the subword sequence exceeds the encoder's
    position limit or when a token contributes no subword at all (the
    normalizer can erase tokens made of control characters or bare
    combining marks).
    """
    enc = tokenizer([list(sentence.tokens)], is_split_into_words=True, return_tensors="pt")
    word_ids = enc.word_ids(0)
    max_pos = getattr(model.config, "max_position_embeddings", None)
    length = enc["input_ids"].shape[1]
    if max_pos is not None and length > max_pos:
        raise ExportError(
            f"sentence '{sentence.id}': {length} subword pieces exceed the encoder limit of {max_pos}"
        )
    enc = {k: v.to(model.device) for k, v in enc.items()}
    with torch.no_grad():
        hidden = model(**enc).last_hidden_state[0]
    rows = []
    for ti, token in enumerate(sentence.tokens):
        positions = [pi for pi, wi in enumerate(word_ids) if wi == ti]
        if not positions:
            raise ExportError(
                f"sentence '{sentence.id}': token {ti} ({token!r}) produced no subword pieces"
            )
        if pooling == "first-subword":
            vec = hidden[positions[0]]
        else:
            vec = hidden[positions].mean(dim=0)
        rows.append(vec.cpu().numpy())
    return np.stack(rows).astype(np.float32, copy=False)


def export(job: ExportJob) -> dict[str, np.ndarray]:
    """Embed every sentence of the corpus and write the MSFE file.

    Returns the written mapping {sentence id: (n, hidden) float32 array}.
    """
    sentences = parse_corpus(job.input_path, job.fmt)
    if not sentences:
        raise ExportError(f"empty corpus '{job.input_path}': nothing to export")
    tokenizer, model = load_encoder(job.model, job.device)
    embeddings = {}
    for sentence in sentences:
        embeddings[sentence.id] = encode_sentence(tokenizer, model, sentence, job.pooling)
    write_msfe(job.out_path, embeddings)
    return embeddings
