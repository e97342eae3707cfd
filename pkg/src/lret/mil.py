"""Attention-based multiple-instance learning.

A bag is a random sample of one case's patches; a gated-tanh attention
head scores each encoded patch, the softmax-normalized weights pool the
bag into one embedding, and a classifier predicts the case subtype from
that embedding.  Training the classifier this way teaches the attention
head to upweight the patches that carry subtype signal, which is what the
retrieval stages use as the estimated tumor region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Case, FeatureCache
from .errors import AlignmentError, DivergenceError, InputShapeError, ValidationError
from .numcore import (
    DenseNet,
    GradientBundle,
    OptimizerState,
    Tape,
    backward,
    cross_entropy,
    forward,
    init_dense,
    sgd_momentum_step,
    softmax_stable,
)
from .seeding import substream

DEFAULT_ATTENTION_DIM = 512
DEFAULT_HIDDEN_DIM = 64
DEFAULT_HA_FRACTION = 0.10


@dataclass
class AttentionHead:
    """Gated-tanh attention parameters: score(h) = w . tanh(V h)."""

    V: np.ndarray  # (att_dim, h_dim)
    w: np.ndarray  # (att_dim,)
    version: int = 0

    def __post_init__(self) -> None:
        self.V = np.asarray(self.V, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.V.ndim != 2 or self.w.shape != (self.V.shape[0],):
            raise InputShapeError("attention head expects V (att, h) and w (att,)")

    def params(self) -> list[np.ndarray]:
        return [self.V, self.w]

    def bump_version(self) -> None:
        self.version += 1

    def copy(self) -> "AttentionHead":
        return AttentionHead(self.V.copy(), self.w.copy())


def init_attention_head(h_dim: int, att_dim: int, rng: np.random.Generator) -> AttentionHead:
    bound_v = np.sqrt(6.0 / (att_dim + h_dim))
    bound_w = np.sqrt(6.0 / (att_dim + 1))
    return AttentionHead(
        rng.uniform(-bound_v, bound_v, size=(att_dim, h_dim)),
        rng.uniform(-bound_w, bound_w, size=att_dim),
    )


@dataclass
class Bag:
    case_id: str
    patch_ids: np.ndarray

    def __post_init__(self) -> None:
        self.patch_ids = np.asarray(self.patch_ids, dtype=np.int64)
        if self.patch_ids.size == 0:
            raise ValidationError("bag must contain at least one patch")

    def __len__(self) -> int:
        return int(self.patch_ids.size)


@dataclass
class MilModel:
    """Encoder + attention head + subtype classifier (logit outputs)."""

    encoder: DenseNet
    attention: AttentionHead
    classifier: DenseNet

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.attention.params() + self.classifier.params()

    def bump_versions(self) -> None:
        self.encoder.bump_version()
        self.attention.bump_version()
        self.classifier.bump_version()


def init_mil_model(
    feature_dim: int,
    n_classes: int,
    h_dim: int = DEFAULT_HIDDEN_DIM,
    att_dim: int = DEFAULT_ATTENTION_DIM,
    clf_hidden: int = 512,
    enc_hidden: int = 64,
    seed: int = 0,
) -> MilModel:
    enc = init_dense([feature_dim, enc_hidden, h_dim], ["relu", "identity"],
                     substream(seed, "init/enc"))
    att = init_attention_head(h_dim, att_dim, substream(seed, "init/att"))
    clf = init_dense([h_dim, clf_hidden, n_classes], ["relu", "identity"],
                     substream(seed, "init/clf"))
    return MilModel(enc, att, clf)


# --- bag construction --------------------------------------------------------


def build_bags(case: Case, q: int, bag_size: int, max_bags: int, seed: int) -> list[Bag]:
    """Sample min(q, available) patches without replacement and partition
    them into bags of bag_size (final short bag allowed when patches are
    scarce), capped at max_bags."""
    if not case.patches:
        raise ValidationError(f"case {case.case_id} has no patches")
    if min(q, bag_size, max_bags) <= 0:
        raise ValidationError("q, bag_size, and max_bags must be positive")
    ids = np.array(sorted(p.patch_id for p in case.patches), dtype=np.int64)
    n_take = min(q, ids.size)
    rng = substream(seed, f"bags/{case.case_id}")
    chosen = rng.permutation(ids)[:n_take]
    bags = []
    for start in range(0, n_take, bag_size):
        if len(bags) == max_bags:
            break
        bags.append(Bag(case.case_id, chosen[start : start + bag_size]))
    return bags


# --- attention / pooling -------------------------------------------------------


def attention_weights(model: MilModel, encoded: np.ndarray) -> np.ndarray:
    """Softmax-normalized attention over one bag's encoded patches."""
    scores = np.tanh(encoded @ model.attention.V.T) @ model.attention.w
    return softmax_stable(scores)


def bag_embedding(weights: np.ndarray, encoded: np.ndarray) -> np.ndarray:
    """Attention-weighted mean of encoded patch features."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or encoded.shape[0] != w.size:
        raise InputShapeError("weights must align with encoded rows")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValidationError("attention weights must be normalized")
    return w @ encoded


def classify_bag(model: MilModel, embedding: np.ndarray) -> np.ndarray:
    logits, _ = forward(model.classifier, embedding)
    return softmax_stable(logits)


@dataclass
class BagForward:
    """All intermediates of one bag's forward pass."""

    features: np.ndarray
    enc_tape: Tape
    encoded: np.ndarray
    gate: np.ndarray  # tanh(V h) rows
    scores: np.ndarray
    weights: np.ndarray
    embedding: np.ndarray
    clf_tape: Tape
    logits: np.ndarray
    probs: np.ndarray


def bag_forward(model: MilModel, features: np.ndarray) -> BagForward:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InputShapeError("bag features must be a (patches, dim) matrix")
    encoded, enc_tape = forward(model.encoder, x)
    gate = np.tanh(encoded @ model.attention.V.T)
    scores = gate @ model.attention.w
    weights = softmax_stable(scores)
    embedding = weights @ encoded
    logits, clf_tape = forward(model.classifier, embedding)
    probs = softmax_stable(logits)
    return BagForward(x, enc_tape, encoded, gate, scores, weights, embedding,
                      clf_tape, logits, probs)


def bag_backward(
    model: MilModel, bf: BagForward, dlogits: np.ndarray
) -> tuple[GradientBundle, np.ndarray, np.ndarray, GradientBundle]:
    """Gradients of a scalar loss through classifier, attention, encoder.

    Returns (encoder bundle, dV, dw, classifier bundle).
    """
    clf_gb = backward(model.classifier, bf.clf_tape, dlogits)
    d_embed = clf_gb.dx
    d_weights = bf.encoded @ d_embed
    d_encoded = np.outer(bf.weights, d_embed)
    # softmax backward: ds_i = a_i (da_i - sum_j a_j da_j)
    d_scores = bf.weights * (d_weights - float(bf.weights @ d_weights))
    dw = bf.gate.T @ d_scores
    d_gate = np.outer(d_scores, model.attention.w)
    d_pre = d_gate * (1.0 - bf.gate * bf.gate)
    dV = d_pre.T @ bf.encoded
    d_encoded += d_pre @ model.attention.V
    enc_gb = backward(model.encoder, bf.enc_tape, d_encoded)
    return enc_gb, dV, dw, clf_gb


def mil_loss_and_grads(
    model: MilModel, features: np.ndarray, onehot: np.ndarray
) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Cross-entropy loss of one bag and gradients aligned with model.params()."""
    bf = bag_forward(model, features)
    loss, dlogits = cross_entropy(bf.probs, onehot)
    enc_gb, dV, dw, clf_gb = bag_backward(model, bf, dlogits)
    grads = enc_gb.as_list() + [dV, dw] + clf_gb.as_list()
    return loss, grads, bf.probs


@dataclass
class MilEpochMetrics:
    mean_loss: float
    accuracy: float
    n_bags: int


def train_mil_epoch(
    model: MilModel,
    cache: FeatureCache,
    bags: list[Bag],
    scale: str,
    optimizer: OptimizerState,
    seed: int,
) -> MilEpochMetrics:
    """One seeded-shuffled pass over all bags with per-bag updates.

    Gradients flow jointly through classifier, attention, and encoder.
    """
    if not bags:
        raise ValidationError("no bags to train on")
    order = substream(seed, "mil-shuffle").permutation(len(bags))
    total_loss = 0.0
    correct = 0
    for idx in order:
        bag = bags[idx]
        case = cache.case(bag.case_id)
        x = cache.rows(bag.case_id, scale, bag.patch_ids)
        loss, grads, probs = mil_loss_and_grads(model, x, case.subtype.as_array())
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite MIL loss on case {bag.case_id} "
                f"(bag of {len(bag)}, scale {scale})"
            )
        sgd_momentum_step(model.params(), grads, optimizer)
        model.bump_versions()
        total_loss += loss
        correct += int(int(np.argmax(probs)) == case.subtype.index)
    return MilEpochMetrics(total_loss / len(bags), correct / len(bags), len(bags))


# --- high-attention selection ---------------------------------------------------


@dataclass
class HaSelection:
    """Per case, the high-attention patch ids with their bag attention weights."""

    fraction: float
    by_case: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def patch_ids(self, case_id: str) -> list[int]:
        return [pid for pid, _ in self.by_case.get(case_id, [])]

    def pools(self) -> dict[str, list[int]]:
        return {cid: [pid for pid, _ in rows] for cid, rows in self.by_case.items()}


def top_fraction_indices(weights: np.ndarray, patch_ids: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of the top ceil(fraction * n) weights; ties broken by
    ascending patch id.  Depends only on the weight ordering."""
    n = weights.size
    count = math.ceil(fraction * n)
    order = np.lexsort((patch_ids, -weights))
    return order[:count]


def select_ha_patches(
    model: MilModel,
    cache: FeatureCache,
    bags: list[Bag],
    scale: str,
    fraction: float = DEFAULT_HA_FRACTION,
) -> HaSelection:
    """Top-fraction patches per bag; a case's set is the union over its bags."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("selection fraction must be in (0, 1]")
    selection = HaSelection(fraction=fraction)
    for bag in bags:
        x = cache.rows(bag.case_id, scale, bag.patch_ids)
        encoded, _ = forward(model.encoder, x)
        weights = attention_weights(model, encoded)
        keep = top_fraction_indices(weights, bag.patch_ids, fraction)
        rows = selection.by_case.setdefault(bag.case_id, [])
        rows.extend((int(bag.patch_ids[i]), float(weights[i])) for i in keep)
    for rows in selection.by_case.values():
        rows.sort(key=lambda t: t[0])
    return selection


def ha_tumor_purity(selection: HaSelection, cache: FeatureCache) -> float | None:
    """Fraction of selected patches with the synthetic tumor flag set;
    None when any flag is missing."""
    flags = []
    for cid, rows in selection.by_case.items():
        case = cache.case(cid)
        by_id = {p.patch_id: p for p in case.patches}
        for pid, _ in rows:
            flag = by_id[pid].tumor_flag
            if flag is None:
                return None
            flags.append(flag)
    return float(np.mean(flags)) if flags else None


def multiscale_attention(
    a_high: np.ndarray,
    a_low: np.ndarray,
    ids_high: np.ndarray | None = None,
    ids_low: np.ndarray | None = None,
) -> np.ndarray:
    """Elementwise mean of per-scale attention weights for aligned patches."""
    ah = np.asarray(a_high, dtype=np.float64)
    al = np.asarray(a_low, dtype=np.float64)
    if ah.shape != al.shape:
        raise AlignmentError(f"attention shapes differ: {ah.shape} vs {al.shape}")
    if ids_high is not None and ids_low is not None and not np.array_equal(ids_high, ids_low):
        raise AlignmentError("patch index sets differ between scales")
    return (ah + al) / 2.0
