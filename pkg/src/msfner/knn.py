"""Two-stage inference: datastore, KNN vote, interpolation, decoding.

The datastore maps pooled support-entity embeddings (keys, stored as 32-bit
floats) to their type labels. At inference each detected span's embedding is
typed by a convex combination p = lam * p_knn + (1 - lam) * p_soft, where
p_knn is a distance-weighted vote over the k nearest keys and p_soft is the
prototype softmax with prototypes taken as per-label means of the datastore
keys (the same embeddings the prototypes are defined over).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .autograd import ParamSet, Tensor
from .classifier import Prototypes, pool_span, proto_distribution
from .episodes import LabeledSentence, Sentence

DATASTORE_MAGIC = b"MSFD"
DATASTORE_VERSION = 1


@dataclass(frozen=True)
class DecoderConfig:
    k: int = 10
    lam: float = 0.1
    tau: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.tau <= 0.0:
            raise ValueError("KNN temperature must be positive")


class DatastoreFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Datastore:
    """Immutable entity-embedding store: keys row-aligned with label indices."""

    labels: tuple[str, ...]
    keys: np.ndarray  # (count, dim) float32
    label_indices: np.ndarray  # (count,) int

    def __post_init__(self):
        if self.keys.ndim != 2:
            raise ValueError("keys must be a 2-D array")
        if len(self.label_indices) != len(self.keys):
            raise ValueError("one label index per key required")
        if len(self.keys) == 0:
            raise ValueError("datastore must hold at least one entry")
        if len(self.label_indices) and (
            self.label_indices.min() < 0 or self.label_indices.max() >= len(self.labels)
        ):
            raise ValueError("label index out of range")
        if not np.isfinite(self.keys).all():
            raise ValueError("datastore keys must be finite")
        self.keys.setflags(write=False)
        self.label_indices.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return len(self.keys)


def build_datastore(model, params: ParamSet, support: list[LabeledSentence]) -> Datastore:
    """One entry per gold support entity, in sentence-then-span order.

    Keys are eval-mode pooled embeddings, rounded to float32 (the on-disk
    precision) so in-memory and reloaded stores behave identically.
    """
    keys, labels = [], []
    for ls in support:
        if not ls.spans:
            continue
        h = model.encoder.encode(params, list(ls.tokens), ls.sentence.id, train=False)
        for sp in ls.spans:
            keys.append(pool_span(h, sp.start, sp.end).data.astype(np.float32))
            labels.append(sp.label)
    if not keys:
        raise ValueError("support contains no entities")
    table = tuple(sorted(set(labels)))
    index = {t: i for i, t in enumerate(table)}
    return Datastore(
        labels=table,
        keys=np.stack(keys),
        label_indices=np.array([index[t] for t in labels], dtype=np.int64),
    )


@dataclass(frozen=True)
class TypeDistribution:
    labels: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        if len(self.probs) != len(self.labels):
            raise ValueError("one probability per label required")

    def argmax_label(self) -> str:
        return self.labels[int(np.argmax(self.probs))]


def knn_distribution(e: np.ndarray, store: Datastore, config: DecoderConfig) -> TypeDistribution:
    """Distance-weighted vote of the k nearest keys.

    k clamps to the store size. Ties in distance resolve by insertion order
    (stable sort). Weights exp(-dist/tau) are computed relative to the
    nearest retrieved distance, which leaves the normalized result unchanged
    but cannot underflow to an all-zero vote.
    """
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if e.shape[0] != store.dim:
        raise ValueError(f"query dim {e.shape[0]} != datastore dim {store.dim}")
    d = ((store.keys.astype(np.float64) - e) ** 2).sum(axis=1)
    k = min(config.k, len(store))
    picked = np.argsort(d, kind="stable")[:k]
    w = np.exp(-(d[picked] - d[picked].min()) / config.tau)
    probs = np.zeros(len(store.labels))
    np.add.at(probs, store.label_indices[picked], w)
    return TypeDistribution(store.labels, probs / probs.sum())


def interpolate(p_knn: TypeDistribution, p_soft: TypeDistribution, lam: float) -> TypeDistribution:
    """Convex combination lam * p_knn + (1 - lam) * p_soft.

    The endpoints return the corresponding source exactly (no arithmetic).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if p_knn.labels != p_soft.labels:
        raise ValueError("distributions cover different label sets")
    if lam == 0.0:
        return TypeDistribution(p_soft.labels, p_soft.probs.copy())
    if lam == 1.0:
        return TypeDistribution(p_knn.labels, p_knn.probs.copy())
    return TypeDistribution(p_knn.labels, lam * p_knn.probs + (1.0 - lam) * p_soft.probs)


def store_prototypes(store: Datastore) -> Prototypes:
    """Per-label means of the datastore keys."""
    rows = [
        store.keys[store.label_indices == i].astype(np.float64).mean(axis=0)
        for i in range(len(store.labels))
    ]
    return Prototypes(tuple(store.labels), Tensor(np.stack(rows)))


def infer(esd_model, esd_params: ParamSet, ec_model, ec_params: ParamSet,
          sentences: list[Sentence], store: Datastore, config: DecoderConfig,
          proto_distance: str = "sq-euclid") -> list[dict]:
    """Decode spans, type each with the interpolated distribution.

    Returns one record per sentence: {"id", "spans": [{"start", "end",
    "type", "p"}]}; "p" is aligned with the datastore label table. Sentences
    with no detected spans yield empty span lists.
    """
    if ec_model.encoder.output_dim != store.dim:
        raise ValueError(
            f"encoder output dim {ec_model.encoder.output_dim} != datastore dim {store.dim}"
        )
    protos = store_prototypes(store)
    records = []
    for sent in sentences:
        spans = esd_model.decode(esd_params, list(sent.tokens), sent.id)
        row = {"id": sent.id, "spans": []}
        if spans:
            h = ec_model.encoder.encode(ec_params, list(sent.tokens), sent.id, train=False)
            for sp in spans:
                e = pool_span(h, sp.start, sp.end).data
                p_soft = TypeDistribution(
                    store.labels, proto_distribution(Tensor(e), protos, proto_distance).data
                )
                p_knn = knn_distribution(e, store, config)
                p = interpolate(p_knn, p_soft, config.lam)
                row["spans"].append(
                    {
                        "start": sp.start,
                        "end": sp.end,
                        "type": p.argmax_label(),
                        "p": [float(x) for x in p.probs],
                    }
                )
        records.append(row)
    return records


def write_datastore(store: Datastore, path: str) -> None:
    """Write the MSFD binary atomically."""
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(DATASTORE_MAGIC)
            f.write(struct.pack("<I", DATASTORE_VERSION))
            f.write(struct.pack("<I", len(store)))
            f.write(struct.pack("<I", store.dim))
            f.write(struct.pack("<I", len(store.labels)))
            for label in store.labels:
                b = label.encode("utf-8")
                f.write(struct.pack("<I", len(b)))
                f.write(b)
            for idx, key in zip(store.label_indices, store.keys):
                f.write(struct.pack("<I", int(idx)))
                f.write(np.ascontiguousarray(key, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DatastoreFormatError(f"unexpected end of datastore while reading {what}")
    return data


def load_datastore(path: str) -> Datastore:
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != DATASTORE_MAGIC:
            raise DatastoreFormatError(f"'{path}' is not an MSFD datastore")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != DATASTORE_VERSION:
            raise DatastoreFormatError(f"unsupported datastore version {version}")
        (count,) = struct.unpack("<I", _read(f, 4, "entry count"))
        (dim,) = struct.unpack("<I", _read(f, 4, "dim"))
        (n_labels,) = struct.unpack("<I", _read(f, 4, "label count"))
        labels = []
        for _ in range(n_labels):
            (ln,) = struct.unpack("<I", _read(f, 4, "label length"))
            labels.append(_read(f, ln, "label").decode("utf-8"))
        keys = np.empty((count, dim), dtype=np.float32)
        indices = np.empty(count, dtype=np.int64)
        for i in range(count):
            (indices[i],) = struct.unpack("<I", _read(f, 4, "label index"))
            keys[i] = np.frombuffer(_read(f, 4 * dim, f"entry {i}"), dtype="<f4")
        if f.read(1):
            raise DatastoreFormatError("trailing bytes in datastore")
    if not np.isfinite(keys).all():
        raise DatastoreFormatError("datastore holds non-finite keys")
    try:
        return Datastore(tuple(labels), keys, indices)
    except ValueError as err:
        raise DatastoreFormatError(str(err)) from err


def write_predictions(records: list[dict], path: str) -> None:
    """One JSON object per line, in input order."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_predictions(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
