"""Entity typing: span pooling, the contrastive projection head, prototypes.

A detected span is summarized by an element-wise max over its token
encodings. During training those summaries feed two objectives: a prototype
classifier (softmax over negative distances to per-type support means) and a
supervised contrastive loss computed in a projected Gaussian space. The
projection network exists only for the contrastive term and is discarded at
classification time; prototypes and distances live in the raw pooled space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tensor

SIMILARITY_MODES = ("gaussian-kl", "neg-sq-euclid")
PROTO_DISTANCES = ("sq-euclid", "euclid")


@dataclass(frozen=True)
class ContrastiveConfig:
    """Knobs for the contrastive term and the prototype distance."""

    tau: float = 0.1
    similarity: str = "auto"  # auto | gaussian-kl | neg-sq-euclid
    proto_distance: str = "sq-euclid"
    projection_dim: int = 32

    def resolve_similarity(self, k_shot: int) -> str:
        if self.similarity != "auto":
            if self.similarity not in SIMILARITY_MODES:
                raise ValueError(f"unknown similarity mode '{self.similarity}'")
            return self.similarity
        return "gaussian-kl" if k_shot > 1 else "neg-sq-euclid"


def pool_span(h: Tensor, start: int, end: int) -> Tensor:
    """Element-wise max over token encodings start..end (inclusive)."""
    n = h.data.shape[0]
    if not (0 <= start <= end < n):
        raise ValueError(f"span ({start}, {end}) out of range for {n} tokens")
    return ag.max_over_rows(ag.gather_rows(h, np.arange(start, end + 1)))


def init_projection_params(hidden_dim: int, projection_dim: int, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    """Two-layer MLP with separate mean and log-variance output heads."""
    s1 = 1.0 / np.sqrt(hidden_dim)
    return ParamSet.from_arrays(
        {
            "proj_w1": (rng.normal(size=(hidden_dim, hidden_dim)) * s1).astype(dtype),
            "proj_b1": np.zeros(hidden_dim, dtype=dtype),
            "proj_w_mean": (rng.normal(size=(hidden_dim, projection_dim)) * s1).astype(dtype),
            "proj_b_mean": np.zeros(projection_dim, dtype=dtype),
            "proj_w_logvar": (rng.normal(size=(hidden_dim, projection_dim)) * s1).astype(dtype),
            "proj_b_logvar": np.zeros(projection_dim, dtype=dtype),
        }
    )


@dataclass
class GaussianEmbedding:
    """Projected entity representation: a diagonal Gaussian."""

    mean: Tensor
    logvar: Tensor


def project(e: Tensor, params: ParamSet) -> GaussianEmbedding:
    row = ag.reshape(e, (1, -1))
    hidden = ag.relu(ag.add(ag.matmul(row, params["proj_w1"]), params["proj_b1"]))
    mean = ag.reshape(ag.add(ag.matmul(hidden, params["proj_w_mean"]), params["proj_b_mean"]), (-1,))
    logvar = ag.reshape(ag.add(ag.matmul(hidden, params["proj_w_logvar"]), params["proj_b_logvar"]), (-1,))
    return GaussianEmbedding(mean=mean, logvar=logvar)


def similarity(a: GaussianEmbedding, b: GaussianEmbedding, mode: str) -> Tensor:
    """Similarity between projected entities; larger means more alike.

    gaussian-kl: negative symmetrized KL between the diagonal Gaussians,
        -1/2 [KL(a||b) + KL(b||a)]. The log-variance terms of the two
        directions cancel, leaving -1/4 sum_j [(va+d^2)/vb + (vb+d^2)/va - 2].
    neg-sq-euclid: -||mean_a - mean_b||^2, ignoring variances.
    """
    if mode == "neg-sq-euclid":
        return ag.scale(ag.sq_dist(a.mean, b.mean), -1.0)
    if mode != "gaussian-kl":
        raise ValueError(f"unknown similarity mode '{mode}'")
    va = ag.exp(a.logvar)
    vb = ag.exp(b.logvar)
    inv_va = ag.exp(ag.scale(a.logvar, -1.0))
    inv_vb = ag.exp(ag.scale(b.logvar, -1.0))
    d = ag.sub(a.mean, b.mean)
    d2 = ag.mul(d, d)
    term = ag.add(ag.mul(ag.add(va, d2), inv_vb), ag.mul(ag.add(vb, d2), inv_va))
    total = ag.reduce_sum(ag.sub(term, 2.0))
    return ag.scale(total, -0.25)


def contrastive_loss(embeddings: list[GaussianEmbedding], labels: list[str], tau: float, mode: str) -> Tensor:
    """Supervised contrastive loss over a batch of projected entities.

    Each anchor j pulls toward its positives P(j) (same label, excluding
    itself) against all other entities A(j):

        sum_j -1/|P(j)| sum_{p in P(j)} log( exp(sim(j,p)/tau)
                                             / sum_{a in A(j)} exp(sim(j,a)/tau) )

    Anchors with no positive are skipped. Fewer than two entities is an error.
    """
    n = len(embeddings)
    if n != len(labels):
        raise ValueError("embeddings and labels must align")
    if n < 2:
        raise ValueError(f"contrastive loss needs at least 2 entities, got {n}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    sims: dict[tuple[int, int], Tensor] = {}
    for j in range(n):
        for a in range(j + 1, n):
            sims[(j, a)] = sims[(a, j)] = ag.scale(similarity(embeddings[j], embeddings[a], mode), 1.0 / tau)
    total = None
    for j in range(n):
        positives = [p for p in range(n) if p != j and labels[p] == labels[j]]
        if not positives:
            continue
        others = ag.stack_rows([ag.reshape(sims[(j, a)], (1,)) for a in range(n) if a != j])
        denom = ag.logsumexp(others)
        inner = None
        for p in positives:
            piece = ag.sub(denom, sims[(j, p)])  # -log softmax term
            inner = piece if inner is None else ag.add(inner, piece)
        contrib = ag.scale(inner, 1.0 / len(positives))
        total = contrib if total is None else ag.add(total, contrib)
    if total is None:
        return Tensor(np.zeros((), dtype=embeddings[0].mean.dtype))
    return total


@dataclass
class Prototypes:
    """Per-type mean entity embeddings, row-aligned with `labels`."""

    labels: tuple[str, ...]
    matrix: Tensor

    def index_of(self, label: str) -> int:
        return self.labels.index(label)


def build_prototypes(embeddings: list[Tensor], labels: list[str], label_set: list[str]) -> Prototypes:
    """Mean of the entity embeddings of each type in `label_set`.

    Errors if some type has no entity to average (the episode sampler
    guarantees K~2K per type, so this only trips on malformed inputs).
    """
    if len(embeddings) != len(labels):
        raise ValueError("embeddings and labels must align")
    rows = []
    for t in label_set:
        members = [e for e, lab in zip(embeddings, labels) if lab == t]
        if not members:
            raise ValueError(f"no entities of type '{t}' to build a prototype from")
        rows.append(ag.reduce_mean(ag.stack_rows(members), axis=0))
    return Prototypes(labels=tuple(label_set), matrix=ag.stack_rows(rows))


def proto_distances(e: Tensor, protos: Prototypes, distance: str = "sq-euclid") -> Tensor:
    d = ag.row_sq_dist(protos.matrix, e)
    if distance == "euclid":
        return ag.sqrt(d)
    if distance != "sq-euclid":
        raise ValueError(f"unknown prototype distance '{distance}'")
    return d


def distances_to_distribution(dists: Tensor) -> Tensor:
    """softmax over negative distances; invariant to a constant shift."""
    return ag.softmax(ag.scale(dists, -1.0), axis=-1)


def proto_distribution(e: Tensor, protos: Prototypes, distance: str = "sq-euclid") -> Tensor:
    """Type distribution for one entity from its prototype distances."""
    return distances_to_distribution(proto_distances(e, protos, distance))


def ec_loss(distances: list[Tensor], gold_indices: list[int]) -> Tensor:
    """Cross-entropy of softmax(-distances) at the gold types.

    Computed in log space (d_gold + logsumexp(-d)), never materializing the
    probabilities: far-away prototypes would underflow them to exact zero
    and poison the log.
    """
    if len(distances) != len(gold_indices):
        raise ValueError("distances and gold indices must align")
    if not distances:
        raise ValueError("ec_loss needs at least one entity")
    total = None
    for dists, gold in zip(distances, gold_indices):
        if not (0 <= gold < dists.data.shape[0]):
            raise ValueError(f"gold index {gold} out of range")
        d_gold = ag.reshape(ag.take_pairs(ag.reshape(dists, (1, -1)), [0], [gold]), ())
        term = ag.add(d_gold, ag.logsumexp(ag.scale(dists, -1.0)))
        total = term if total is None else ag.add(total, term)
    return total
