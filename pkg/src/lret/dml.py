"""Contrastive distance-metric learning over high-attention patches.

A metric head on top of the shared encoder maps patches to an embedding
where pair distances track a continuous relevance index (staining-pattern
overlap, or the binary subtype indicator for the baseline).  Training
alternates with the MIL phase: each round runs one MIL epoch, refreshes
the high-attention selections, samples disjoint patch pairs, and runs a
block of contrastive epochs.  The encoder is one parameter store shared
by both phases; the attention head is frozen during contrastive epochs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Case, FeatureCache, jaccard_relevance, subtype_relevance
from .errors import AlignmentError, DivergenceError, ValidationError
from .mil import (
    Bag,
    HaSelection,
    MilModel,
    build_bags,
    ha_tumor_purity,
    init_mil_model,
    select_ha_patches,
    train_mil_epoch,
)
from .numcore import (
    DenseNet,
    OptimizerState,
    backward,
    forward,
    init_dense,
    sgd_momentum_step,
)
from .seeding import derive_seed, substream

RELEVANCE_KINDS = ("staining", "subtype")


@dataclass
class MetricModel:
    """Metric head over the shared encoder; embeddings are head(encoder(x)).

    The encoder attribute must be the same object the MIL model updates:
    one parameter store, two views.
    """

    encoder: DenseNet
    metric_head: DenseNet

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.metric_head.params()

    def bump_versions(self) -> None:
        self.encoder.bump_version()
        self.metric_head.bump_version()


def init_metric_head(h_dim: int, embed_dim: int = 64, hidden: int = 512,
                     seed: int = 0) -> DenseNet:
    return init_dense([h_dim, hidden, embed_dim], ["relu", "identity"],
                      substream(seed, "init/met"))


@dataclass(frozen=True)
class PatchPair:
    case_a: str
    patch_a: int
    case_b: str
    patch_b: int
    relevance: float


@dataclass
class TrainSchedule:
    """Alternating-training knobs with desk-scale defaults."""

    outer_rounds: int = 10
    mil_epochs_per_round: int = 1
    dml_epochs_per_round: int = 10
    margin: float = 1.0
    pairs_per_case: int = 100
    relevance_kind: str = "staining"
    learning_rate: float = 1.25e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    bag_size: int = 50
    max_bags: int = 10
    q_train: int | None = None
    ha_fraction: float = 0.10
    exclude_self_pairs: bool = False
    h_dim: int = 64
    att_dim: int = 512
    clf_hidden: int = 512
    enc_hidden: int = 64
    met_hidden: int = 512
    embed_dim: int = 64

    def validate(self) -> None:
        if min(self.outer_rounds, self.mil_epochs_per_round, self.dml_epochs_per_round) < 0:
            raise ValidationError("epoch counts must be nonnegative")
        if self.pairs_per_case <= 0 or self.bag_size <= 0 or self.max_bags <= 0:
            raise ValidationError("counts must be positive")
        if self.margin <= 0:
            raise ValidationError("margin must be positive")
        if self.relevance_kind not in RELEVANCE_KINDS:
            raise ValidationError(f"relevance_kind must be one of {RELEVANCE_KINDS}")

    def q_patches(self) -> int:
        return self.q_train if self.q_train is not None else self.bag_size * self.max_bags

    def to_jsonable(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_jsonable(cls, doc: dict) -> "TrainSchedule":
        return cls(**doc)


# --- embedding and loss --------------------------------------------------------


def embed_features(model: MetricModel, features: np.ndarray) -> np.ndarray:
    encoded, _ = forward(model.encoder, features)
    embedded, _ = forward(model.metric_head, encoded)
    return embedded


def embed_patch(model: MetricModel, patch, scale: str) -> np.ndarray:
    """Embedding of one patch at one scale."""
    if scale not in patch.features:
        raise AlignmentError(f"patch {patch.patch_id} has no features at scale {scale!r}")
    return embed_features(model, patch.features[scale])


def contrastive_loss(
    z_i: np.ndarray, z_j: np.ndarray, relevance: float, margin: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """relevance * d^2 + (1 - relevance) * max(margin - d, 0)^2 with
    d = ||z_i - z_j||_2.

    Returns (loss, grad wrt z_i, grad wrt z_j).  The hinge subgradient is
    0 at d >= margin and at the d = 0 singularity.
    """
    if not 0.0 <= relevance <= 1.0:
        raise ValidationError("relevance must be in [0, 1]")
    if margin <= 0:
        raise ValidationError("margin must be positive")
    zi = np.asarray(z_i, dtype=np.float64)
    zj = np.asarray(z_j, dtype=np.float64)
    diff = zi - zj
    d = float(np.sqrt((diff * diff).sum()))
    gap = margin - d
    loss = relevance * d * d + (1.0 - relevance) * (gap * gap if gap > 0.0 else 0.0)
    grad = 2.0 * relevance * diff
    if 0.0 < d < margin:
        grad -= 2.0 * (1.0 - relevance) * (gap / d) * diff
    return loss, grad, -grad


# --- pair sampling ---------------------------------------------------------------


def _pair_relevance(a: Case, b: Case, kind: str) -> float:
    if kind == "staining":
        return jaccard_relevance(a.ihc, b.ihc)
    if kind == "subtype":
        return subtype_relevance(a.subtype, b.subtype)
    raise ValidationError(f"unknown relevance kind {kind!r}")


def sample_pairs(
    pools: dict[str, list[int]] | HaSelection,
    cache: FeatureCache,
    pairs_per_case: int = 100,
    relevance_kind: str = "staining",
    seed: int = 0,
    exclude_self_pairs: bool = False,
) -> list[PatchPair]:
    """Disjoint patch pairs from per-case pools.

    Up to pairs_per_case ids are drawn without replacement from each
    case's pool; the global selection is shuffled and paired off, so each
    selected patch appears in exactly one pair (one element dropped when
    the pool is odd).  Relevance is computed once per case pair and
    cached.  Self-pairs (both patches from one case) are kept by default
    and get relevance 1 under either kind; the flag drops them instead.
    """
    if isinstance(pools, HaSelection):
        pools = pools.pools()
    if pairs_per_case <= 0:
        raise ValidationError("pairs_per_case must be positive")
    selected: list[tuple[str, int]] = []
    for cid in sorted(pools):
        ids = pools[cid]
        if not ids:
            raise ValidationError(f"case {cid} has an empty patch pool")
        take = min(pairs_per_case, len(ids))
        rng = substream(seed, f"pair-pool/{cid}")
        picked = rng.permutation(np.asarray(sorted(ids), dtype=np.int64))[:take]
        selected.extend((cid, int(pid)) for pid in picked)

    order = substream(seed, "pair-shuffle").permutation(len(selected))
    shuffled = [selected[i] for i in order]
    if len(shuffled) % 2 == 1:
        shuffled.pop()

    rel_cache: dict[tuple[str, str], float] = {}
    pairs: list[PatchPair] = []
    for (ca, pa), (cb, pb) in zip(shuffled[0::2], shuffled[1::2]):
        if exclude_self_pairs and ca == cb:
            continue
        key = (ca, cb) if ca <= cb else (cb, ca)
        if key not in rel_cache:
            rel_cache[key] = _pair_relevance(cache.case(key[0]), cache.case(key[1]),
                                             relevance_kind)
        pairs.append(PatchPair(ca, pa, cb, pb, rel_cache[key]))
    return pairs


# --- contrastive training ----------------------------------------------------------


def _pair_step(
    model: MetricModel,
    x_pair: np.ndarray,
    relevance: float,
    margin: float,
    optimizer: OptimizerState,
) -> float:
    encoded, enc_tape = forward(model.encoder, x_pair)
    embedded, met_tape = forward(model.metric_head, encoded)
    loss, g_i, g_j = contrastive_loss(embedded[0], embedded[1], relevance, margin)
    met_gb = backward(model.metric_head, met_tape, np.vstack([g_i, g_j]))
    enc_gb = backward(model.encoder, enc_tape, met_gb.dx)
    grads = enc_gb.as_list() + met_gb.as_list()
    sgd_momentum_step(model.params(), grads, optimizer)
    model.bump_versions()
    return loss


def train_dml_epoch(
    model: MetricModel,
    cache: FeatureCache,
    pairs: list[PatchPair],
    scale: str,
    optimizer: OptimizerState,
    margin: float,
    seed: int,
) -> float:
    """One seeded-shuffled pass of per-pair updates; returns the mean loss.

    Both the metric head and the shared encoder receive gradients; the
    attention head is untouched.
    """
    if not pairs:
        raise ValidationError("no pairs to train on")
    feats_a = np.vstack([cache.rows(p.case_a, scale, [p.patch_a]) for p in pairs])
    feats_b = np.vstack([cache.rows(p.case_b, scale, [p.patch_b]) for p in pairs])
    order = substream(seed, "dml-shuffle").permutation(len(pairs))
    total = 0.0
    x_pair = np.empty((2, feats_a.shape[1]))
    for idx in order:
        pair = pairs[idx]
        x_pair[0] = feats_a[idx]
        x_pair[1] = feats_b[idx]
        loss = _pair_step(model, x_pair, pair.relevance, margin, optimizer)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite contrastive loss on pair ({pair.case_a}:{pair.patch_a}, "
                f"{pair.case_b}:{pair.patch_b}); last good state is the previous step"
            )
        total += loss
    return total / len(pairs)


# --- training log -------------------------------------------------------------------


@dataclass
class LogRecord:
    round: int
    phase: str  # "mil" or "dml"
    epoch: int
    mean_loss: float
    extra: float | None  # bag accuracy (mil) or HA tumor purity (dml), if known
    wall_time: float

    def canonical(self) -> str:
        extra = "na" if self.extra is None else f"{self.extra:.12g}"
        return (f"round={self.round} phase={self.phase} epoch={self.epoch} "
                f"loss={self.mean_loss:.12g} extra={extra}")

    def line(self) -> str:
        # wall time is the only nondeterministic field; byte-compare via canonical()
        return f"{self.canonical()} wall={self.wall_time:.3f}"


@dataclass
class TrainingLog:
    records: list[LogRecord] = field(default_factory=list)

    def canonical_lines(self) -> list[str]:
        return [r.canonical() for r in self.records]

    def file_lines(self) -> list[str]:
        return [r.line() for r in self.records]

    def count(self, phase: str) -> int:
        return sum(1 for r in self.records if r.phase == phase)


# --- alternating orchestration ---------------------------------------------------------


@dataclass
class ScaleState:
    """Everything one scale's training owns: models, optimizers, bags."""

    mil_model: MilModel
    metric_model: MetricModel
    mil_optimizer: OptimizerState
    dml_optimizer: OptimizerState
    bags: list[Bag]


@dataclass
class TrainResult:
    scales: tuple[str, ...]
    states: dict[str, ScaleState]
    log: TrainingLog
    next_round: int

    def mil_models(self) -> dict[str, MilModel]:
        return {s: st.mil_model for s, st in self.states.items()}

    def metric_models(self) -> dict[str, MetricModel]:
        return {s: st.metric_model for s, st in self.states.items()}


def _init_scale_state(
    cases: list[Case], schedule: TrainSchedule, seed: int, scale: str, feature_dim: int,
    n_classes: int,
) -> ScaleState:
    mil_model = init_mil_model(
        feature_dim, n_classes,
        h_dim=schedule.h_dim, att_dim=schedule.att_dim,
        clf_hidden=schedule.clf_hidden, enc_hidden=schedule.enc_hidden,
        seed=derive_seed(seed, f"init/{scale}"),
    )
    head = init_metric_head(schedule.h_dim, schedule.embed_dim, schedule.met_hidden,
                            seed=derive_seed(seed, f"init/{scale}"))
    metric_model = MetricModel(mil_model.encoder, head)
    opt = dict(learning_rate=schedule.learning_rate, momentum=schedule.momentum,
               weight_decay=schedule.weight_decay)
    bags = []
    for case in cases:
        bags.extend(build_bags(case, schedule.q_patches(), schedule.bag_size,
                               schedule.max_bags, derive_seed(seed, f"bags/{scale}")))
    return ScaleState(mil_model, metric_model, OptimizerState(**opt),
                      OptimizerState(**opt), bags)


def _infer_dims(cases: list[Case], scales: tuple[str, ...]) -> tuple[int, int]:
    if not cases:
        raise ValidationError("training requires at least one case")
    first = cases[0].patches[0]
    for scale in scales:
        if scale not in first.features:
            raise AlignmentError(f"cases lack features at scale {scale!r}")
    return first.features[scales[0]].shape[0], len(cases[0].subtype.onehot)


def alternate_training(
    train_cases: list[Case],
    schedule: TrainSchedule,
    seed: int,
    scales: tuple[str, ...] = ("H",),
    resume: TrainResult | None = None,
) -> TrainResult:
    """Alternate MIL and contrastive phases per scale.

    Each round: MIL epoch(s) over all bags, refresh the high-attention
    selections, sample pairs, then a block of contrastive epochs.  Models
    for different scales are trained independently; fusion happens only
    at retrieval time.  All randomness is derived from (seed, label), so
    resuming from a round boundary reproduces the uninterrupted run.
    """
    schedule.validate()
    feature_dim, n_classes = _infer_dims(train_cases, scales)
    cache = FeatureCache(train_cases)

    if resume is not None:
        states = resume.states
        log = resume.log
        start_round = resume.next_round
        if tuple(resume.scales) != tuple(scales):
            raise ValidationError("resume state was trained with different scales")
    else:
        states = {
            scale: _init_scale_state(train_cases, schedule, seed, scale, feature_dim, n_classes)
            for scale in scales
        }
        log = TrainingLog()
        start_round = 0

    for rnd in range(start_round, schedule.outer_rounds):
        for scale in scales:
            st = states[scale]
            for ep in range(schedule.mil_epochs_per_round):
                t0 = time.perf_counter()
                metrics = train_mil_epoch(
                    st.mil_model, cache, st.bags, scale, st.mil_optimizer,
                    derive_seed(seed, f"mil/{scale}/round{rnd}/epoch{ep}"),
                )
                log.records.append(LogRecord(rnd, "mil", ep, metrics.mean_loss,
                                             metrics.accuracy, time.perf_counter() - t0))
            ha = select_ha_patches(st.mil_model, cache, st.bags, scale, schedule.ha_fraction)
            purity = ha_tumor_purity(ha, cache)
            pairs = sample_pairs(
                ha, cache, schedule.pairs_per_case, schedule.relevance_kind,
                derive_seed(seed, f"pairs/{scale}/round{rnd}"),
                schedule.exclude_self_pairs,
            )
            for ep in range(schedule.dml_epochs_per_round):
                t0 = time.perf_counter()
                mean_loss = train_dml_epoch(
                    st.metric_model, cache, pairs, scale, st.dml_optimizer, schedule.margin,
                    derive_seed(seed, f"dml/{scale}/round{rnd}/epoch{ep}"),
                )
                log.records.append(LogRecord(rnd, "dml", ep, mean_loss, purity,
                                             time.perf_counter() - t0))
    return TrainResult(tuple(scales), states, log, schedule.outer_rounds)


def train_contrastive_only(
    train_cases: list[Case],
    schedule: TrainSchedule,
    seed: int,
    scales: tuple[str, ...] = ("H",),
    pool_size: int | None = None,
) -> TrainResult:
    """Contrastive training on uniformly sampled patches (no attention).

    Used by the all-patches baselines: per epoch, a fresh random selection
    of pairs_per_case patches per case is paired globally.  The pool is
    pool_size random patches per case when given, otherwise all patches.
    """
    schedule.validate()
    feature_dim, n_classes = _infer_dims(train_cases, scales)
    cache = FeatureCache(train_cases)
    states = {
        scale: _init_scale_state(train_cases, schedule, seed, scale, feature_dim, n_classes)
        for scale in scales
    }
    log = TrainingLog()
    total_epochs = schedule.outer_rounds * schedule.dml_epochs_per_round
    pools: dict[str, list[int]] = {}
    for case in train_cases:
        ids = sorted(p.patch_id for p in case.patches)
        if pool_size is not None and pool_size < len(ids):
            rng = substream(seed, f"allpatch-pool/{case.case_id}")
            ids = sorted(int(i) for i in rng.permutation(np.asarray(ids))[:pool_size])
        pools[case.case_id] = ids
    for scale in scales:
        st = states[scale]
        for ep in range(total_epochs):
            pairs = sample_pairs(
                pools, cache, schedule.pairs_per_case, schedule.relevance_kind,
                derive_seed(seed, f"allpairs/{scale}/epoch{ep}"),
                schedule.exclude_self_pairs,
            )
            t0 = time.perf_counter()
            mean_loss = train_dml_epoch(
                st.metric_model, cache, pairs, scale, st.dml_optimizer, schedule.margin,
                derive_seed(seed, f"dml-all/{scale}/epoch{ep}"),
            )
            log.records.append(LogRecord(ep // max(schedule.dml_epochs_per_round, 1),
                                         "dml", ep, mean_loss, None,
                                         time.perf_counter() - t0))
    return TrainResult(tuple(scales), states, log, schedule.outer_rounds)
