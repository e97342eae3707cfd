"""Quantitative evaluation: retrieval accuracies, cross-validated method
comparison, attention-validity checks, and Monte Carlo significance tests.

Staining accuracy of a retrieval is the mean staining-pattern overlap
between the query and its top-k results; the upper bound is what an ideal
retrieval would achieve against the same database, so every method's
accuracy is dominated by it query by query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import (
    Case,
    IhcPattern,
    Subtype,
    jaccard_relevance,
    stratified_kfold,
    subtype_relevance,
)
from .dml import TrainSchedule, alternate_training, train_contrastive_only
from .errors import ValidationError
from .mil import MilModel, attention_weights, init_mil_model
from .numcore import forward
from .retrieval import (
    EMBED_ENCODER,
    EMBED_METRIC,
    SELECT_ALL,
    SELECT_ATTENTION,
    RetrievalModels,
    build_database,
    retrieve,
)
from .seeding import derive_seed, substream

METHODS = {
    "random_features": "random features + all patches",
    "subtype_all": "subtype metric + all patches",
    "staining_all": "staining metric + all patches",
    "subtype_ha": "subtype metric + HA patches",
    "staining_ha": "staining metric + HA patches (proposed)",
}
DEFAULT_METHODS = ("random_features", "subtype_ha", "staining_ha")
MAGNIFICATIONS = {"H": ("H",), "L": ("L",), "HL": ("H", "L")}


# --- per-query accuracies ---------------------------------------------------


def ihc_staining_accuracy(query_ihc: IhcPattern, retrieved: list[IhcPattern],
                          k: int = 5) -> float:
    """Mean staining-pattern overlap between the query and its top-k."""
    if k <= 0 or k > len(retrieved):
        raise ValidationError(f"k={k} out of range for {len(retrieved)} results")
    return float(np.mean([jaccard_relevance(query_ihc, r) for r in retrieved[:k]]))


def subtype_accuracy(query_subtype: Subtype, retrieved: list[Subtype],
                     k: int = 5) -> float:
    if k <= 0 or k > len(retrieved):
        raise ValidationError(f"k={k} out of range for {len(retrieved)} results")
    return float(np.mean([subtype_relevance(query_subtype, r) for r in retrieved[:k]]))


def upper_bound_accuracy(query_ihc: IhcPattern, database: list[IhcPattern],
                         k: int = 5) -> float:
    """Best achievable mean top-k overlap: the ideal-retrieval ceiling."""
    if not database:
        raise ValidationError("database is empty")
    scores = sorted((jaccard_relevance(query_ihc, r) for r in database), reverse=True)
    return float(np.mean(scores[: min(k, len(scores))]))


# --- Monte Carlo significance ---------------------------------------------------


def monte_carlo_permutation_test(outcomes, n_draws: int = 10_000, seed: int = 0) -> float:
    """Fair-coin randomization test for binary outcomes.

    Each draw resamples the outcome vector as independent fair coins; the
    p-value is the fraction of draws whose mean reaches the observed mean,
    with an add-one correction so p is never 0 (resolution floor about
    1/n_draws).
    """
    x = np.asarray(outcomes)
    if x.size == 0:
        raise ValidationError("outcomes must be nonempty")
    if not np.isin(x, (0, 1)).all():
        raise ValidationError("outcomes must be binary")
    if n_draws <= 0:
        raise ValidationError("n_draws must be positive")
    observed = int(x.sum())
    rng = substream(seed, "mc-test")
    draws = rng.binomial(x.size, 0.5, size=n_draws)
    count = int((draws >= observed).sum())
    return (count + 1) / (n_draws + 1)


def paired_permutation_test(a, b, n_draws: int = 10_000, seed: int = 0) -> float:
    """Sign-flip randomization test that mean(a - b) > 0 for paired scores."""
    da = np.asarray(a, dtype=np.float64)
    db = np.asarray(b, dtype=np.float64)
    if da.shape != db.shape or da.size == 0:
        raise ValidationError("paired scores must be nonempty and aligned")
    diffs = da - db
    observed = diffs.mean()
    rng = substream(seed, "paired-test")
    count = 0
    chunk = max(1, min(n_draws, 2_000_000 // max(diffs.size, 1)))
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        signs = rng.integers(0, 2, size=(m, diffs.size)) * 2 - 1
        count += int(((signs * diffs).mean(axis=1) >= observed).sum())
        done += m
    return (count + 1) / (n_draws + 1)


# --- attention validity ------------------------------------------------------------


def attention_validity_check(
    mil_models: dict[str, MilModel],
    cases: list[Case],
    n_cases: int = 100,
    seed: int = 0,
) -> tuple[float, float]:
    """Tumor fraction among each sampled case's highest- vs lowest-attention
    patch, under scale-averaged attention weights.

    Requires synthetic ground-truth tumor flags.
    """
    flagged = [c for c in cases if all(p.tumor_flag is not None for p in c.patches)]
    if not flagged:
        raise ValidationError("attention validity check needs tumor-flagged cases")
    rng = substream(seed, "validity-sample")
    take = min(n_cases, len(flagged))
    picked = [flagged[i] for i in rng.permutation(len(flagged))[:take]]

    scales = tuple(sorted(mil_models))
    high_flags = []
    low_flags = []
    for case in picked:
        ordered = sorted(case.patches, key=lambda p: p.patch_id)
        per_scale = []
        for scale in scales:
            x = np.vstack([p.features[scale] for p in ordered])
            model = mil_models[scale]
            encoded, _ = forward(model.encoder, x)
            per_scale.append(attention_weights(model, encoded))
        fused = np.mean(np.vstack(per_scale), axis=0)
        high_flags.append(ordered[int(np.argmax(fused))].tumor_flag)
        low_flags.append(ordered[int(np.argmin(fused))].tumor_flag)
    return float(np.mean(high_flags)), float(np.mean(low_flags))


# --- cross-validated benchmark --------------------------------------------------------


@dataclass
class QueryRecord:
    fold: int
    case_id: str
    staining: float
    subtype: float
    upper_bound: float


@dataclass
class MethodResult:
    method: str
    magnification: str
    queries: list[QueryRecord] = field(default_factory=list)

    def _stats(self, values: np.ndarray) -> tuple[float, float]:
        mean = float(values.mean())
        se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
        return mean, se

    def staining_stats(self) -> tuple[float, float]:
        return self._stats(np.array([q.staining for q in self.queries]))

    def subtype_stats(self) -> tuple[float, float]:
        return self._stats(np.array([q.subtype for q in self.queries]))

    def mean_upper_bound(self) -> float:
        return float(np.mean([q.upper_bound for q in self.queries]))

    def staining_by_case(self) -> dict[str, float]:
        return {q.case_id: q.staining for q in self.queries}


@dataclass
class BenchmarkReport:
    methods: list[str]
    magnifications: list[str]
    k: int
    n_folds: int
    seed: int
    results: dict[tuple[str, str], MethodResult]
    config: dict = field(default_factory=dict)

    def result(self, method: str, magnification: str) -> MethodResult:
        return self.results[(method, magnification)]

    def paired_staining(self, method_a: str, method_b: str,
                        magnification: str) -> tuple[np.ndarray, np.ndarray]:
        """Per-query staining accuracies of two methods aligned by case id."""
        a = self.result(method_a, magnification).staining_by_case()
        b = self.result(method_b, magnification).staining_by_case()
        ids = sorted(set(a) & set(b))
        if len(ids) != len(a) or len(ids) != len(b):
            raise ValidationError("methods were evaluated on different query sets")
        return (np.array([a[c] for c in ids]), np.array([b[c] for c in ids]))

    def to_jsonable(self) -> dict:
        rows = []
        for (method, mag), res in sorted(self.results.items()):
            st_mean, st_se = res.staining_stats()
            sub_mean, sub_se = res.subtype_stats()
            rows.append({
                "method": method,
                "magnification": mag,
                "staining_mean": st_mean,
                "staining_se": st_se,
                "subtype_mean": sub_mean,
                "subtype_se": sub_se,
                "upper_bound_mean": res.mean_upper_bound(),
                "queries": [
                    {"fold": q.fold, "case_id": q.case_id, "staining": q.staining,
                     "subtype": q.subtype, "upper_bound": q.upper_bound}
                    for q in res.queries
                ],
            })
        return {
            "methods": self.methods,
            "magnifications": self.magnifications,
            "k": self.k,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "config": self.config,
            "results": rows,
        }

    @classmethod
    def from_jsonable(cls, doc: dict) -> "BenchmarkReport":
        results = {}
        for row in doc["results"]:
            res = MethodResult(row["method"], row["magnification"])
            res.queries = [QueryRecord(q["fold"], q["case_id"], q["staining"],
                                       q["subtype"], q["upper_bound"])
                           for q in row["queries"]]
            results[(row["method"], row["magnification"])] = res
        return cls(doc["methods"], doc["magnifications"], doc["k"], doc["n_folds"],
                   doc["seed"], results, doc.get("config", {}))


def _train_method(
    method: str,
    train_cases: list[Case],
    scales: tuple[str, ...],
    schedule: TrainSchedule,
    seed: int,
) -> RetrievalModels:
    if method == "random_features":
        # untrained-for-task generic features: a frozen seeded encoder
        feature_dim = train_cases[0].patches[0].features[scales[0]].shape[0]
        n_classes = len(train_cases[0].subtype.onehot)
        mil_models = {
            s: init_mil_model(feature_dim, n_classes, h_dim=schedule.h_dim,
                              att_dim=schedule.att_dim, clf_hidden=schedule.clf_hidden,
                              enc_hidden=schedule.enc_hidden,
                              seed=derive_seed(seed, f"frozen/{s}"))
            for s in scales
        }
        return RetrievalModels(scales, mil_models, {}, EMBED_ENCODER, SELECT_ALL)

    relevance = "staining" if method.startswith("staining") else "subtype"
    sched = TrainSchedule(**{**schedule.to_jsonable(), "relevance_kind": relevance})
    if method.endswith("_ha"):
        result = alternate_training(train_cases, sched, seed, scales)
        return RetrievalModels(scales, result.mil_models(), result.metric_models(),
                               EMBED_METRIC, SELECT_ATTENTION)
    if method.endswith("_all"):
        result = train_contrastive_only(train_cases, sched, seed, scales)
        return RetrievalModels(scales, result.mil_models(), result.metric_models(),
                               EMBED_METRIC, SELECT_ALL)
    raise ValidationError(f"unknown method {method!r}")


def cross_validated_benchmark(
    cases: list[Case],
    methods=DEFAULT_METHODS,
    magnifications=("H", "L", "HL"),
    k: int = 5,
    seed: int = 0,
    schedule: TrainSchedule | None = None,
    q_test: int = 1000,
    m_fraction: float = 0.10,
    n_folds: int = 5,
) -> BenchmarkReport:
    """Stratified k-fold comparison of retrieval methods.

    Per fold, models train on the train+val cases, the database is built
    from those same cases, and the held-out test cases query it.  Per-scale
    models are trained once per method and reused across magnifications.
    """
    schedule = schedule or TrainSchedule()
    for method in methods:
        if method not in METHODS:
            raise ValidationError(f"unknown method {method!r}")
    for mag in magnifications:
        if mag not in MAGNIFICATIONS:
            raise ValidationError(f"unknown magnification {mag!r}")

    needed_scales = tuple(sorted({s for mag in magnifications for s in MAGNIFICATIONS[mag]}))
    splits = stratified_kfold(cases, n_folds, seed=derive_seed(seed, "folds"))
    results = {(m, g): MethodResult(m, g) for m in methods for g in magnifications}

    for fold, (train, val, test) in enumerate(splits):
        pool = train + val
        pool_ids = {c.case_id for c in pool}
        for case in test:
            if case.case_id in pool_ids:
                raise ValidationError("fold hygiene violation: test case in train pool")
        db_patterns = [c.ihc for c in pool]
        for method in methods:
            trained = _train_method(method, pool, needed_scales, schedule,
                                    derive_seed(seed, f"fold{fold}/{method}"))
            for mag in magnifications:
                scales = MAGNIFICATIONS[mag]
                models = RetrievalModels(
                    scales,
                    {s: trained.mil_models[s] for s in scales},
                    {s: trained.metric_models[s] for s in scales}
                    if trained.embed_mode == EMBED_METRIC else {},
                    trained.embed_mode,
                    trained.selection,
                )
                db = build_database(models, pool, q_test, m_fraction,
                                    derive_seed(seed, f"fold{fold}/{method}/{mag}/db"))
                entries_by_id = {e.case_id: e for e in db.entries}
                for query in test:
                    res = retrieve(db, query, k, models,
                                   derive_seed(seed, f"fold{fold}/{method}/{mag}/query"))
                    top = [entries_by_id[rc.case_id] for rc in res.ranking]
                    results[(method, mag)].queries.append(QueryRecord(
                        fold, query.case_id,
                        ihc_staining_accuracy(query.ihc, [e.ihc for e in top], k),
                        subtype_accuracy(query.subtype, [e.subtype for e in top], k),
                        upper_bound_accuracy(query.ihc, db_patterns, k),
                    ))

    return BenchmarkReport(
        list(methods), list(magnifications), k, n_folds, seed, results,
        config={"schedule": schedule.to_jsonable(), "q_test": q_test,
                "m_fraction": m_fraction},
    )
