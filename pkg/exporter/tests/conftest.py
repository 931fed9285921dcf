"""Shared fixture: a tiny randomly initialized encoder saved to disk.

Built once per session, entirely offline. The WordPiece vocabulary is
crafted so test corpora exercise whole-word hits, multi-subword splits
(garnet -> gar + ##net, ember -> em + ##ber, basil -> ba + ##sil), and the
unknown-token fallback.
"""

from __future__ import annotations

import pytest
import torch
from tokenizers import Tokenizer
from tokenizers.models import WordPiece
from tokenizers.normalizers import BertNormalizer
from tokenizers.pre_tokenizers import BertPreTokenizer
from tokenizers.processors import TemplateProcessing
from transformers import BertConfig, BertModel, PreTrainedTokenizerFast
from transformers.utils import logging as hf_logging

hf_logging.disable_progress_bar()

PIECES = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "cat", "sat", "on", "a", "mat", "fig", "dill", "river",
    "gar", "##net", "em", "##ber", "ba", "##sil",
]

HIDDEN_SIZE = 32
MAX_POSITIONS = 40


def _build_tokenizer(directory: str) -> None:
    vocab = {piece: i for i, piece in enumerate(PIECES)}
    tok = Tokenizer(WordPiece(vocab, unk_token="[UNK]"))
    tok.normalizer = BertNormalizer(lowercase=True)
    tok.pre_tokenizer = BertPreTokenizer()
    tok.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])],
    )
    PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="[UNK]", pad_token="[PAD]",
        cls_token="[CLS]", sep_token="[SEP]", mask_token="[MASK]",
    ).save_pretrained(directory)


def build_tiny_model(directory: str, poison: bool = False) -> str:
    """Save a tokenizer plus a small random encoder into directory.

    poison=True plants a NaN in the embedding row of the word "the" to
    exercise the non-finite failure path.
    """
    _build_tokenizer(directory)
    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(PIECES), hidden_size=HIDDEN_SIZE, num_hidden_layers=2,
        num_attention_heads=2, intermediate_size=64,
        max_position_embeddings=MAX_POSITIONS,
    )
    model = BertModel(config)
    if poison:
        with torch.no_grad():
            model.embeddings.word_embeddings.weight[PIECES.index("the"), 0] = float("nan")
    model.save_pretrained(directory)
    return directory


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> str:
    return build_tiny_model(str(tmp_path_factory.mktemp("tinybert")))


@pytest.fixture(scope="session")
def model_builder():
    return build_tiny_model


@pytest.fixture()
def write_corpus(tmp_path):
    """Callable writing [[(token, tag), ...], ...] as corpus text; returns the path."""

    def write(sentences, name="corpus.txt"):
        lines = []
        for sent in sentences:
            lines.extend(f"{token}\t{tag}" for token, tag in sent)
            lines.append("")
        path = tmp_path / name
        path.write_text("\n".join(lines), encoding="utf-8")
        return str(path)

    return write
