"""Search database construction, case distances, ranking, and explanations.

The database stores, per past case, the embeddings of its high-attention
patches.  A query case is processed the same way, and the case distance
sums, over the query's patches, the distance to the nearest database
patch of the candidate case; ranking is ascending in that distance.  The
functional is deliberately asymmetric (query side summed, database side
minimized).  Distances are computed brute force: desk scale is small and
oracle-exact equality is worth more than speed here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import BlobBuilder, read_container, write_container
from .data import Case, FeatureCache, IhcPattern, Subtype
from .dml import MetricModel, embed_features
from .errors import (
    AlignmentError,
    IncompatibilityError,
    InputShapeError,
    ValidationError,
)
from .mil import MilModel, attention_weights, top_fraction_indices
from .numcore import forward, params_fingerprint
from .seeding import substream

DATABASE_FORMAT = "lret-database"
DATABASE_VERSION = 1

EMBED_METRIC = "metric"
EMBED_ENCODER = "encoder"
SELECT_ATTENTION = "attention"
SELECT_ALL = "all"


@dataclass
class RetrievalModels:
    """Per-scale trained models plus the two retrieval-mode switches.

    embed_mode "metric" uses the metric head over the encoder; "encoder"
    uses raw encoder features (the untrained-feature baseline).  selection
    "attention" keeps the top case-wide fraction by (fused) attention
    weight; "all" keeps every sampled patch with uniform weights.
    """

    scales: tuple[str, ...]
    mil_models: dict[str, MilModel]
    metric_models: dict[str, MetricModel] = field(default_factory=dict)
    embed_mode: str = EMBED_METRIC
    selection: str = SELECT_ATTENTION

    def __post_init__(self) -> None:
        if self.embed_mode not in (EMBED_METRIC, EMBED_ENCODER):
            raise ValidationError(f"unknown embed mode {self.embed_mode!r}")
        if self.selection not in (SELECT_ATTENTION, SELECT_ALL):
            raise ValidationError(f"unknown selection mode {self.selection!r}")
        for scale in self.scales:
            if scale not in self.mil_models:
                raise AlignmentError(f"no model for scale {scale!r}")
            if self.embed_mode == EMBED_METRIC and scale not in self.metric_models:
                raise AlignmentError(f"no metric model for scale {scale!r}")

    def weights_for(self, scale: str, features: np.ndarray) -> np.ndarray:
        model = self.mil_models[scale]
        encoded, _ = forward(model.encoder, features)
        return attention_weights(model, encoded)

    def embed(self, scale: str, features: np.ndarray) -> np.ndarray:
        if self.embed_mode == EMBED_ENCODER:
            encoded, _ = forward(self.mil_models[scale].encoder, features)
            return encoded
        return embed_features(self.metric_models[scale], features)

    def fingerprint(self) -> str:
        lists = []
        for scale in self.scales:
            lists.append(self.mil_models[scale].params())
            if self.embed_mode == EMBED_METRIC:
                lists.append(self.metric_models[scale].metric_head.params())
        return params_fingerprint(lists)


@dataclass
class ScaleData:
    patch_ids: np.ndarray
    embeddings: np.ndarray  # (n, embed_dim)
    weights: np.ndarray
    positions: np.ndarray


@dataclass
class DatabaseEntry:
    case_id: str
    subtype: Subtype
    ihc: IhcPattern
    per_scale: dict[str, ScaleData]
    n_patches: int  # total patches in the source case (heatmap grid extent)

    def embeddings(self) -> dict[str, np.ndarray]:
        return {s: d.embeddings for s, d in self.per_scale.items()}


@dataclass
class SearchDatabase:
    entries: list[DatabaseEntry]
    fingerprint: str
    scales: tuple[str, ...]
    n_subtypes: int
    n_stains: int
    m_fraction: float
    q_test: int
    selection: str
    embed_mode: str
    seed: int

    def entry(self, case_id: str) -> DatabaseEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise ValidationError(f"case {case_id} not in database")


# --- per-case processing -----------------------------------------------------


@dataclass
class CaseView:
    """One case after sampling, attention, selection, and embedding."""

    case_id: str
    patch_ids: np.ndarray
    fused_weights: np.ndarray
    per_scale_weights: dict[str, np.ndarray]
    embeddings: dict[str, np.ndarray]
    positions: np.ndarray


def process_case(
    models: RetrievalModels,
    case: Case,
    q_test: int,
    m_fraction: float,
    rng: np.random.Generator,
) -> CaseView:
    """Sample up to q_test patches, compute per-scale attention (softmax
    over the whole sample), fuse by scale mean, keep the top case-wide
    fraction (or everything in all-patches mode), and embed survivors."""
    cache = FeatureCache([case])
    all_ids, _ = cache.matrix(case.case_id, models.scales[0])
    n_take = min(q_test, all_ids.size)
    sampled = np.sort(rng.permutation(all_ids)[:n_take])

    per_scale_w = {}
    for scale in models.scales:
        x = cache.rows(case.case_id, scale, sampled)
        if models.selection == SELECT_ALL:
            per_scale_w[scale] = np.full(sampled.size, 1.0 / sampled.size)
        else:
            per_scale_w[scale] = models.weights_for(scale, x)
    fused = np.mean(np.vstack([per_scale_w[s] for s in models.scales]), axis=0)

    if models.selection == SELECT_ATTENTION:
        keep = np.sort(top_fraction_indices(fused, sampled, m_fraction))
    else:
        keep = np.arange(sampled.size)
    kept_ids = sampled[keep]

    embeddings = {}
    for scale in models.scales:
        x = cache.rows(case.case_id, scale, kept_ids)
        embeddings[scale] = models.embed(scale, x)

    by_id = {p.patch_id: p.position for p in case.patches}
    positions = np.array([by_id[int(pid)] for pid in kept_ids], dtype=np.int64)
    return CaseView(
        case.case_id, kept_ids, fused[keep],
        {s: per_scale_w[s][keep] for s in models.scales},
        embeddings, positions,
    )


def build_database(
    models: RetrievalModels,
    cases: list[Case],
    q_test: int = 1000,
    m_fraction: float = 0.10,
    seed: int = 0,
) -> SearchDatabase:
    """Process every case and store its selected-patch embeddings."""
    if not cases:
        raise ValidationError("cannot build a database from zero cases")
    if not 0.0 < m_fraction <= 1.0:
        raise ValidationError("m_fraction must be in (0, 1]")
    entries = []
    for case in cases:
        view = process_case(models, case, q_test, m_fraction,
                            substream(seed, f"db-sample/{case.case_id}"))
        per_scale = {
            s: ScaleData(view.patch_ids.copy(), view.embeddings[s],
                         view.per_scale_weights[s], view.positions.copy())
            for s in models.scales
        }
        entries.append(DatabaseEntry(case.case_id, case.subtype, case.ihc,
                                     per_scale, len(case.patches)))
    first = cases[0]
    return SearchDatabase(
        entries=entries,
        fingerprint=models.fingerprint(),
        scales=models.scales,
        n_subtypes=len(first.subtype.onehot),
        n_stains=len(first.ihc),
        m_fraction=m_fraction,
        q_test=q_test,
        selection=models.selection,
        embed_mode=models.embed_mode,
        seed=seed,
    )


# --- distances ------------------------------------------------------------------


def patch_distance(z_i: np.ndarray, z_j: np.ndarray) -> float:
    """Euclidean distance between two embeddings."""
    a = np.asarray(z_i, dtype=np.float64)
    b = np.asarray(z_j, dtype=np.float64)
    if a.shape != b.shape:
        raise InputShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sqrt((diff * diff).sum()))


def multiscale_patch_distance(
    z_high_i: np.ndarray, z_high_j: np.ndarray,
    z_low_i: np.ndarray, z_low_j: np.ndarray,
) -> float:
    """Additive fusion: per-scale distances summed, not averaged."""
    return patch_distance(z_high_i, z_high_j) + patch_distance(z_low_i, z_low_j)


def _pairwise_l2(db_z: np.ndarray, q_z: np.ndarray, chunk: int = 64) -> np.ndarray:
    """(n_db, n_q) distances, float-identical to per-pair patch_distance."""
    if db_z.shape[1] != q_z.shape[1]:
        raise InputShapeError(
            f"embedding dims differ: {db_z.shape[1]} vs {q_z.shape[1]}"
        )
    out = np.empty((db_z.shape[0], q_z.shape[0]))
    for start in range(0, q_z.shape[0], chunk):
        block = q_z[start : start + chunk]
        diff = db_z[:, None, :] - block[None, :, :]
        out[:, start : start + chunk] = np.sqrt((diff * diff).sum(axis=2))
    return out


def fused_distance_matrix(
    db_embeddings: dict[str, np.ndarray],
    query_embeddings: dict[str, np.ndarray],
    scales: tuple[str, ...],
) -> np.ndarray:
    """(n_db, n_q) per-scale distances summed over scales."""
    total = None
    for scale in scales:
        if scale not in db_embeddings or scale not in query_embeddings:
            raise AlignmentError(f"missing embeddings at scale {scale!r}")
        d = _pairwise_l2(db_embeddings[scale], query_embeddings[scale])
        total = d if total is None else total + d
    if total is None:
        raise ValidationError("no scales to fuse")
    return total


def case_distance(
    db_embeddings: dict[str, np.ndarray] | DatabaseEntry,
    query_embeddings: dict[str, np.ndarray],
    scales: tuple[str, ...] | None = None,
) -> float:
    """Sum over query patches of the minimum fused distance to any
    database patch of the candidate case.  Asymmetric by construction."""
    if isinstance(db_embeddings, DatabaseEntry):
        db_embeddings = db_embeddings.embeddings()
    if scales is None:
        scales = tuple(sorted(query_embeddings))
    for side in (db_embeddings, query_embeddings):
        for scale in scales:
            if scale not in side or side[scale].shape[0] == 0:
                raise ValidationError(f"empty patch set at scale {scale!r}")
    fused = fused_distance_matrix(db_embeddings, query_embeddings, scales)
    return float(fused.min(axis=0).sum())


# --- retrieval --------------------------------------------------------------------


@dataclass
class MatchedPatch:
    query_patch_id: int
    db_patch_id: int
    distance: float


@dataclass
class RankedCase:
    case_id: str
    distance: float
    matches: list[MatchedPatch]


@dataclass
class RetrievalResult:
    query_case_id: str
    ranking: list[RankedCase]  # top-k
    distances: list[tuple[str, float]]  # full ascending ranking
    heatmaps: dict[str, np.ndarray]
    scales: tuple[str, ...]


def _top_query_patches(view: CaseView, count: int = 5) -> np.ndarray:
    """Indices of the query's top attention patches (ties by ascending id)."""
    order = np.lexsort((view.patch_ids, -view.fused_weights))
    return order[: min(count, view.patch_ids.size)]


def retrieve(
    db: SearchDatabase,
    query_case: Case,
    k: int,
    models: RetrievalModels,
    seed: int = 0,
    cases_by_id: dict[str, Case] | None = None,
    explain_top: int = 5,
) -> RetrievalResult:
    """Rank all database cases by ascending case distance to the query.

    The query's own case id is excluded.  The top-k entries carry, for
    each of the query's top-5 attention patches, the closest database
    patch of that case.  Heatmaps cover the query plus the retrieved
    cases when their raw patches are supplied.
    """
    if models.fingerprint() != db.fingerprint:
        raise IncompatibilityError(
            "model fingerprint does not match the database; refusing to mix embeddings"
        )
    if k <= 0:
        raise ValidationError("k must be positive")
    view = process_case(models, query_case, db.q_test, db.m_fraction,
                        substream(seed, f"query-sample/{query_case.case_id}"))
    if view.patch_ids.size == 0:
        raise ValidationError("query case produced no patches")

    scored: list[tuple[float, str, DatabaseEntry]] = []
    for entry in db.entries:
        if entry.case_id == query_case.case_id:
            continue
        d = case_distance(entry.embeddings(), view.embeddings, db.scales)
        scored.append((d, entry.case_id, entry))
    if not scored:
        raise ValidationError("database holds no case other than the query")
    scored.sort(key=lambda t: (t[0], t[1]))

    top_idx = _top_query_patches(view, explain_top)
    ranking = []
    for d, cid, entry in scored[:k]:
        fused = fused_distance_matrix(entry.embeddings(), view.embeddings, db.scales)
        matches = []
        for qi in top_idx:
            col = fused[:, qi]
            best = int(np.lexsort((entry.per_scale[db.scales[0]].patch_ids, col))[0])
            matches.append(MatchedPatch(
                int(view.patch_ids[qi]),
                int(entry.per_scale[db.scales[0]].patch_ids[best]),
                float(col[best]),
            ))
        ranking.append(RankedCase(cid, float(d), matches))

    heatmaps = {query_case.case_id: attention_heatmap(models, query_case)}
    if cases_by_id:
        for rc in ranking:
            if rc.case_id in cases_by_id:
                heatmaps[rc.case_id] = attention_heatmap(models, cases_by_id[rc.case_id])

    return RetrievalResult(
        query_case.case_id, ranking,
        [(cid, float(d)) for d, cid, _ in scored],
        heatmaps, db.scales,
    )


# --- heatmaps ---------------------------------------------------------------------


def grid_shape(n_positions: int) -> tuple[int, int]:
    width = int(math.ceil(math.sqrt(n_positions)))
    rows = int(math.ceil(n_positions / width))
    return rows, width


def normalize_heatmap(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a zero range yields all zeros."""
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo == 0.0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def attention_heatmap(models: RetrievalModels, case: Case) -> np.ndarray:
    """Per-position fused attention over all patches, normalized per case."""
    cache = FeatureCache([case])
    ids, _ = cache.matrix(case.case_id, models.scales[0])
    per_scale = []
    for scale in models.scales:
        x = cache.rows(case.case_id, scale, ids)
        if models.selection == SELECT_ALL:
            per_scale.append(np.full(ids.size, 1.0 / ids.size))
        else:
            per_scale.append(models.weights_for(scale, x))
    fused = normalize_heatmap(np.mean(np.vstack(per_scale), axis=0))

    positions = {p.patch_id: p.position for p in case.patches}
    max_pos = max(positions.values())
    rows, width = grid_shape(max_pos + 1)
    grid = np.zeros((rows, width))
    for pid, w in zip(ids, fused):
        pos = positions[int(pid)]
        grid[pos // width, pos % width] = w
    return grid


def format_heatmap_text(grid: np.ndarray) -> str:
    """Row-major plain-text matrix, 6-decimal fixed point."""
    return "\n".join(" ".join(f"{v:.6f}" for v in row) for row in np.atleast_2d(grid)) + "\n"


def parse_heatmap_text(text: str) -> np.ndarray:
    rows = [[float(tok) for tok in line.split()] for line in text.strip().splitlines()]
    return np.asarray(rows, dtype=np.float64)


# --- explanation export --------------------------------------------------------------


def result_to_jsonable(result: RetrievalResult, heatmap_files: dict[str, str]) -> dict:
    return {
        "query_case": result.query_case_id,
        "scales": list(result.scales),
        "ranking": [
            {
                "case_id": rc.case_id,
                "distance": rc.distance,
                "matches": [
                    {
                        "query_patch": m.query_patch_id,
                        "db_patch": m.db_patch_id,
                        "distance": m.distance,
                    }
                    for m in rc.matches
                ],
            }
            for rc in result.ranking
        ],
        "all_distances": [[cid, d] for cid, d in result.distances],
        "heatmaps": heatmap_files,
    }


def export_explanation(result: RetrievalResult, out_dir) -> dict[str, Path]:
    """Write the query report: JSON payload, matched-pair table, heatmaps."""
    out = Path(out_dir)
    try:
        (out / "heatmaps").mkdir(parents=True, exist_ok=True)
        heatmap_files = {}
        for cid, grid in sorted(result.heatmaps.items()):
            rel = f"heatmaps/{cid}.txt"
            (out / rel).write_text(format_heatmap_text(grid))
            heatmap_files[cid] = rel

        lines = ["rank\tdb_case_id\tcase_distance\tquery_patch_id\tdb_patch_id\tpatch_distance"]
        for rank, rc in enumerate(result.ranking, start=1):
            for m in rc.matches:
                lines.append(
                    f"{rank}\t{rc.case_id}\t{rc.distance:.9g}\t"
                    f"{m.query_patch_id}\t{m.db_patch_id}\t{m.distance:.9g}"
                )
        (out / "matched_pairs.tsv").write_text("\n".join(lines) + "\n")

        doc = result_to_jsonable(result, heatmap_files)
        (out / "report.json").write_text(
            json.dumps(doc, sort_keys=True, indent=2) + "\n"
        )
    except OSError as exc:
        from .errors import DataIOError

        raise DataIOError(f"failed to write explanation under {out}: {exc}") from exc
    return {
        "report": out / "report.json",
        "matched_pairs": out / "matched_pairs.tsv",
        "heatmap_dir": out / "heatmaps",
    }


# --- database file I/O -----------------------------------------------------------------


def save_database(db: SearchDatabase, path) -> None:
    builder = BlobBuilder()
    entry_docs = []
    for entry in db.entries:
        per_scale = {}
        for scale in db.scales:
            sd = entry.per_scale[scale]
            z_off, z_cnt = builder.add(sd.embeddings)
            w_off, w_cnt = builder.add(sd.weights)
            per_scale[scale] = {
                "ids": sd.patch_ids.tolist(),
                "pos": sd.positions.tolist(),
                "z": [z_off, z_cnt, list(sd.embeddings.shape)],
                "w": [w_off, w_cnt],
            }
        entry_docs.append({
            "case_id": entry.case_id,
            "subtype": entry.subtype.index,
            "ihc": "".join(str(b) for b in entry.ihc.bits),
            "n_patches": entry.n_patches,
            "scales": per_scale,
        })
    manifest = {
        "format": DATABASE_FORMAT,
        "version": DATABASE_VERSION,
        "fingerprint": db.fingerprint,
        "scales": list(db.scales),
        "n_subtypes": db.n_subtypes,
        "n_stains": db.n_stains,
        "m_fraction": db.m_fraction,
        "q_test": db.q_test,
        "selection": db.selection,
        "embed_mode": db.embed_mode,
        "seed": db.seed,
        "entries": entry_docs,
    }
    write_container(path, manifest, builder.tobytes())


def load_database(path) -> SearchDatabase:
    doc, blob = read_container(path, DATABASE_FORMAT, DATABASE_VERSION)
    n_subtypes = int(doc["n_subtypes"])
    entries = []
    for ed in doc["entries"]:
        per_scale = {}
        for scale, sd in ed["scales"].items():
            z_off, z_cnt, z_shape = sd["z"]
            w_off, w_cnt = sd["w"]
            per_scale[scale] = ScaleData(
                np.asarray(sd["ids"], dtype=np.int64),
                blob.fetch(int(z_off), int(z_cnt)).reshape([int(s) for s in z_shape]),
                blob.fetch(int(w_off), int(w_cnt)),
                np.asarray(sd["pos"], dtype=np.int64),
            )
        entries.append(DatabaseEntry(
            ed["case_id"],
            Subtype.from_index(int(ed["subtype"]), n_subtypes),
            IhcPattern.from_bits([int(ch) for ch in ed["ihc"]]),
            per_scale,
            int(ed["n_patches"]),
        ))
    return SearchDatabase(
        entries=entries,
        fingerprint=doc["fingerprint"],
        scales=tuple(doc["scales"]),
        n_subtypes=n_subtypes,
        n_stains=int(doc["n_stains"]),
        m_fraction=float(doc["m_fraction"]),
        q_test=int(doc["q_test"]),
        selection=doc["selection"],
        embed_mode=doc["embed_mode"],
        seed=int(doc["seed"]),
    )
