"""Token encoders and the binary sentence-embedding format.

Two interchangeable ways to turn a sentence into per-token vectors:

* trainable: an embedding table plus one ReLU layer over a concatenation of
  each token's embedding with its neighbors inside a fixed window. Unknown
  tokens share a dedicated UNK row; out-of-range window slots contribute
  zeros. Dropout applies to the hidden layer in train mode only.
* precomputed: per-token vectors are read from an embedding file produced by
  an external encoder and passed through a trainable linear projection,
  initialized to the identity when the dimensions agree.

The embedding file is little-endian binary: magic "MSFE", a u32 version, the
sentence count and vector dimension, then per sentence its id, token count,
and float32 vectors.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tensor

UNK = "<unk>"

MAGIC = b"MSFE"
VERSION = 1


class EmbeddingFormatError(ValueError):
    """Base class for malformed embedding files."""


class BadMagicError(EmbeddingFormatError):
    pass


class TruncatedFileError(EmbeddingFormatError):
    pass


class NonFiniteEmbeddingError(EmbeddingFormatError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "trainable"  # trainable | precomputed
    embedding_dim: int = 32
    hidden_dim: int = 64
    window: int = 1
    dropout: float = 0.2
    max_len: int = 128

    def __post_init__(self):
        if self.mode not in ("trainable", "precomputed"):
            raise ValueError(f"unknown encoder mode '{self.mode}'")
        if self.window < 0:
            raise ValueError("window radius must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class Vocab:
    """Token-to-row mapping with UNK pinned at row 0."""

    def __init__(self, tokens: list[str]):
        self.tokens = [UNK] + [t for t in tokens if t != UNK]
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self._index.get(token, 0)

    def indices(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.intp)


def build_vocab(sentences) -> Vocab:
    """First-occurrence-ordered vocabulary over token sequences."""
    seen: dict[str, None] = {}
    for tokens in sentences:
        for t in tokens:
            seen.setdefault(t, None)
    return Vocab(list(seen))


class Encoder:
    """Bundles an encoder config with its vocabulary or embedding store."""

    def __init__(self, config: EncoderConfig, vocab: Vocab | None = None,
                 embeddings: dict[str, np.ndarray] | None = None):
        self.config = config
        if config.mode == "trainable":
            if vocab is None:
                raise ValueError("trainable mode requires a vocabulary")
            self.vocab = vocab
            self.input_dim = None
        else:
            if embeddings is None:
                raise ValueError("precomputed mode requires an embedding store")
            if not embeddings:
                raise ValueError("embedding store is empty")
            self.vocab = None
            dims = {v.shape[1] for v in embeddings.values()}
            if len(dims) != 1:
                raise ValueError(f"inconsistent embedding dimensions {sorted(dims)}")
            self.input_dim = dims.pop()
        self.embeddings = embeddings

    @property
    def output_dim(self) -> int:
        return self.config.hidden_dim

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
        cfg = self.config
        if cfg.mode == "trainable":
            width = (2 * cfg.window + 1) * cfg.embedding_dim
            emb = rng.normal(size=(self.vocab.size, cfg.embedding_dim)) * 0.5
            w = rng.normal(size=(width, cfg.hidden_dim)) / np.sqrt(width)
            return ParamSet.from_arrays(
                {
                    "enc_emb": emb.astype(dtype),
                    "enc_w": w.astype(dtype),
                    "enc_b": np.zeros(cfg.hidden_dim, dtype=dtype),
                }
            )
        proj = np.eye(self.input_dim, cfg.hidden_dim)
        return ParamSet.from_arrays(
            {
                "enc_proj_w": proj.astype(dtype),
                "enc_proj_b": np.zeros(cfg.hidden_dim, dtype=dtype),
            }
        )

    def encode(self, params: ParamSet, tokens: list[str], sentence_id: str | None = None,
               train: bool = False, seed: int = 0) -> Tensor:
        """Per-token encodings, shape (len(tokens), hidden_dim)."""
        n = len(tokens)
        if n == 0:
            raise ValueError("cannot encode an empty sentence")
        if n > self.config.max_len:
            raise ValueError(f"sentence of {n} tokens exceeds max length {self.config.max_len}")
        if self.config.mode == "precomputed":
            return self._encode_precomputed(params, tokens, sentence_id)
        return self._encode_trainable(params, tokens, train, seed)

    def _encode_trainable(self, params: ParamSet, tokens: list[str], train: bool, seed: int) -> Tensor:
        cfg = self.config
        n = len(tokens)
        idx = self.vocab.indices(tokens)
        pieces = []
        for off in range(-cfg.window, cfg.window + 1):
            pos = np.arange(n) + off
            inside = (pos >= 0) & (pos < n)
            looked = ag.gather_rows(params["enc_emb"], idx[np.clip(pos, 0, n - 1)])
            # zero out slots that fell off either end of the sentence
            mask = inside.astype(looked.dtype).reshape(n, 1)
            pieces.append(ag.mul(looked, Tensor(mask)))
        ctx = pieces[0] if len(pieces) == 1 else ag.concat(pieces, axis=1)
        hidden = ag.relu(ag.add(ag.matmul(ctx, params["enc_w"]), params["enc_b"]))
        return ag.dropout(hidden, cfg.dropout, seed=seed, train=train)

    def _encode_precomputed(self, params: ParamSet, tokens: list[str], sentence_id: str | None) -> Tensor:
        if sentence_id is None:
            raise ValueError("precomputed mode needs a sentence id to look up embeddings")
        if sentence_id not in self.embeddings:
            raise KeyError(f"no precomputed embeddings for sentence '{sentence_id}'")
        vectors = self.embeddings[sentence_id]
        if vectors.shape[0] != len(tokens):
            raise ValueError(
                f"sentence '{sentence_id}' has {len(tokens)} tokens but {vectors.shape[0]} stored vectors"
            )
        return ag.add(ag.matmul(Tensor(vectors.astype(np.float64)), params["enc_proj_w"]), params["enc_proj_b"])


def write_embedding_file(path: str, embeddings: dict[str, np.ndarray]) -> None:
    """Write the MSFE binary format atomically (temp file + rename)."""
    dims = {np.asarray(v).shape[1] for v in embeddings.values()}
    if len(dims) > 1:
        raise ValueError(f"inconsistent embedding dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<III", VERSION, len(embeddings), dim))
            for sid, vectors in embeddings.items():
                arr = np.ascontiguousarray(np.asarray(vectors), dtype="<f4")
                if not np.isfinite(arr).all():
                    raise NonFiniteEmbeddingError(f"non-finite values in embeddings for '{sid}'")
                sid_b = sid.encode("utf-8")
                f.write(struct.pack("<I", len(sid_b)))
                f.write(sid_b)
                f.write(struct.pack("<I", arr.shape[0]))
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"unexpected end of file while reading {what}")
    return data


def load_embedding_file(path: str) -> dict[str, np.ndarray]:
    """Read an MSFE file back into {sentence id: (n, dim) float32 array}.

    Raises BadMagicError on a wrong magic or version, TruncatedFileError when
    the file ends early, and NonFiniteEmbeddingError on NaN/Inf payloads.
    """
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise BadMagicError(f"'{path}' is not an MSFE embedding file")
        version, count, dim = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != VERSION:
            raise BadMagicError(f"unsupported MSFE version {version}")
        for _ in range(count):
            (sid_len,) = struct.unpack("<I", _read_exact(f, 4, "sentence id length"))
            sid = _read_exact(f, sid_len, "sentence id").decode("utf-8")
            (n,) = struct.unpack("<I", _read_exact(f, 4, "token count"))
            raw = _read_exact(f, 4 * n * dim, f"vectors for '{sid}'")
            arr = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
            if not np.isfinite(arr).all():
                raise NonFiniteEmbeddingError(f"non-finite values in embeddings for '{sid}'")
            out[sid] = arr
        if f.read(1):
            raise EmbeddingFormatError(f"trailing bytes after {count} sentences in '{path}'")
    return out
