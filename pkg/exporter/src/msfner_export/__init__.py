"""Embedding exporter: pretrained transformer -> MSFE binary file."""

from .corpus import CORPUS_FORMATS, CorpusParseError, Sentence, parse_corpus
from .export import POOLING_MODES, ExportError, ExportJob, encode_sentence, export, load_encoder
from .msfe import MAGIC, VERSION, NonFiniteEmbeddingError, write_msfe

__all__ = [
    "CORPUS_FORMATS",
    "CorpusParseError",
    "Sentence",
    "parse_corpus",
    "POOLING_MODES",
    "ExportError",
    "ExportJob",
    "encode_sentence",
    "export",
    "load_encoder",
    "MAGIC",
    "VERSION",
    "NonFiniteEmbeddingError",
    "write_msfe",
]
