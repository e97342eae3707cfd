"""Domain data model, relevance indices, synthetic data, splits, and file I/O.

A case is one patient: a subtype label, a binary staining-pattern vector,
and a set of patch feature vectors at two magnification scales.  Patches
here are feature vectors, not pixel arrays; a synthetic generator stands
in for the clinical corpus so every downstream stage has ground truth
(hidden tumor flags) to verify against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import BlobBuilder, read_container, write_container
from .errors import (
    InputShapeError,
    StratificationError,
    UndefinedRelevanceError,
    ValidationError,
)
from .seeding import substream

SCALE_HIGH = "H"
SCALE_LOW = "L"
DEFAULT_SCALES = (SCALE_HIGH, SCALE_LOW)

DATASET_FORMAT = "lret-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class IhcPattern:
    """Binary vector recording which stains were ordered for a case."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.bits:
            raise ValidationError("staining pattern must have positive length")
        if any(b not in (0, 1) for b in self.bits):
            raise ValidationError("staining pattern entries must be 0 or 1")

    @classmethod
    def from_bits(cls, bits) -> "IhcPattern":
        return cls(tuple(int(b) for b in bits))

    def __len__(self) -> int:
        return len(self.bits)

    def count(self) -> int:
        return sum(self.bits)


@dataclass(frozen=True)
class Subtype:
    onehot: tuple[int, ...]

    def __post_init__(self) -> None:
        if sum(self.onehot) != 1 or any(b not in (0, 1) for b in self.onehot):
            raise ValidationError("subtype must be one-hot")

    @classmethod
    def from_index(cls, index: int, n_classes: int) -> "Subtype":
        if not 0 <= index < n_classes:
            raise ValidationError(f"subtype index {index} out of range [0, {n_classes})")
        return cls(tuple(1 if i == index else 0 for i in range(n_classes)))

    @property
    def index(self) -> int:
        return self.onehot.index(1)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.onehot, dtype=np.float64)


class Patch:
    """One image-patch surrogate: per-scale feature vectors plus metadata."""

    __slots__ = ("patch_id", "position", "features", "tumor_flag")

    def __init__(self, patch_id: int, position: int, features: dict[str, np.ndarray],
                 tumor_flag: bool | None = None):
        self.patch_id = int(patch_id)
        self.position = int(position)
        self.features = {s: np.asarray(v, dtype=np.float64) for s, v in features.items()}
        self.tumor_flag = tumor_flag

    def __eq__(self, other) -> bool:
        if not isinstance(other, Patch):
            return NotImplemented
        return (
            self.patch_id == other.patch_id
            and self.position == other.position
            and self.tumor_flag == other.tumor_flag
            and set(self.features) == set(other.features)
            and all(np.array_equal(self.features[s], other.features[s]) for s in self.features)
        )

    def __repr__(self) -> str:
        return f"Patch(id={self.patch_id}, pos={self.position}, scales={sorted(self.features)})"


class Case:
    """One patient: subtype, staining pattern, and patch collection."""

    __slots__ = ("case_id", "subtype", "ihc", "patches", "split_tag")

    def __init__(self, case_id: str, subtype: Subtype, ihc: IhcPattern,
                 patches: list[Patch], split_tag: str | None = None):
        self.case_id = str(case_id)
        self.subtype = subtype
        self.ihc = ihc
        self.patches = patches
        self.split_tag = split_tag

    def __eq__(self, other) -> bool:
        if not isinstance(other, Case):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.subtype == other.subtype
            and self.ihc == other.ihc
            and self.split_tag == other.split_tag
            and self.patches == other.patches
        )

    def __repr__(self) -> str:
        return f"Case({self.case_id}, subtype={self.subtype.index}, {len(self.patches)} patches)"


def validate_case(case: Case, n_stains: int | None = None,
                  feature_dim: int | None = None, scales=None) -> None:
    """Enforce case invariants (nonempty patches, unique ids, dims)."""
    if not case.patches:
        raise ValidationError(f"case {case.case_id}: empty patch list")
    ids = [p.patch_id for p in case.patches]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"case {case.case_id}: duplicate patch ids")
    if n_stains is not None and len(case.ihc) != n_stains:
        raise ValidationError(
            f"case {case.case_id}: staining pattern length {len(case.ihc)} != {n_stains}"
        )
    for p in case.patches:
        for scale in scales or p.features:
            if scale not in p.features:
                raise ValidationError(
                    f"case {case.case_id} patch {p.patch_id}: missing scale {scale!r}"
                )
            if feature_dim is not None and p.features[scale].shape != (feature_dim,):
                raise ValidationError(
                    f"case {case.case_id} patch {p.patch_id}: feature dim "
                    f"{p.features[scale].shape} != ({feature_dim},)"
                )


@dataclass
class Dataset:
    """A case collection plus the header data the file format carries."""

    cases: list[Case]
    n_subtypes: int
    n_stains: int
    feature_dim: int
    scales: tuple[str, ...] = DEFAULT_SCALES
    provenance: dict = field(default_factory=dict)

    def cases_by_id(self) -> dict[str, Case]:
        return {c.case_id: c for c in self.cases}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.cases == other.cases
            and self.n_subtypes == other.n_subtypes
            and self.n_stains == other.n_stains
            and self.feature_dim == other.feature_dim
            and tuple(self.scales) == tuple(other.scales)
            and self.provenance == other.provenance
        )


# --- relevance indices -----------------------------------------------------


def jaccard_relevance(a: IhcPattern, b: IhcPattern) -> float:
    """Intersection-over-union of two staining patterns, in [0, 1].

    Undefined (and rejected) when both patterns are all-zero; valid
    clinical cases always carry at least one stain.
    """
    if len(a) != len(b):
        raise InputShapeError(f"staining pattern lengths differ: {len(a)} vs {len(b)}")
    inter = sum(x & y for x, y in zip(a.bits, b.bits))
    union = sum(x | y for x, y in zip(a.bits, b.bits))
    if union == 0:
        raise UndefinedRelevanceError("relevance of two all-zero staining patterns is undefined")
    return inter / union


def subtype_relevance(a: Subtype, b: Subtype) -> float:
    """1.0 when the two subtypes coincide, else 0.0."""
    return 1.0 if a.onehot == b.onehot else 0.0


# --- synthetic dataset ------------------------------------------------------


def default_staining_templates(n_subtypes: int, n_stains: int) -> np.ndarray:
    """Per-subtype staining templates: a shared 3-stain core panel plus a
    4-stain subtype-specific block (7 stains on average, overlapping
    across subtypes through the core)."""
    if n_stains < 3 + 4 * n_subtypes:
        raise ValidationError(
            f"need at least {3 + 4 * n_subtypes} stains for {n_subtypes} subtype templates"
        )
    templates = np.zeros((n_subtypes, n_stains), dtype=np.int64)
    templates[:, :3] = 1
    for k in range(n_subtypes):
        templates[k, 3 + 4 * k : 3 + 4 * (k + 1)] = 1
    return templates


def _default_tumor_centers(n_subtypes: int, feature_dim: int, scale: float) -> np.ndarray:
    rng = substream(0, f"synth-defaults/tumor-centers/{n_subtypes}/{feature_dim}")
    centers = rng.standard_normal((n_subtypes, feature_dim))
    centers *= scale / np.linalg.norm(centers, axis=1, keepdims=True)
    return centers


def _staining_projection(feature_dim: int, n_stains: int) -> np.ndarray:
    rng = substream(0, f"synth-defaults/staining-proj/{feature_dim}/{n_stains}")
    return rng.standard_normal((feature_dim, n_stains)) / np.sqrt(n_stains)


@dataclass
class SynthConfig:
    """Synthetic data generator settings.

    Only tumor patches carry subtype- and staining-discriminative signal;
    normal patches are drawn around a shared center, so attention-based
    patch selection has something real to find.
    """

    n_cases: int = 60
    n_subtypes: int = 3
    n_stains: int = 26
    patches_per_case: int = 500
    feature_dim: int = 32
    tumor_fraction: float = 0.3
    flip_prob: float = 0.05
    staining_signal: float = 1.0
    noise_scale: float = 0.5
    center_scale: float = 3.0
    seed: int = 0
    staining_templates: np.ndarray | None = None
    tumor_centers: np.ndarray | None = None
    normal_center: np.ndarray | None = None

    def validate(self) -> None:
        if min(self.n_cases, self.n_subtypes, self.n_stains,
               self.patches_per_case, self.feature_dim) <= 0:
            raise ValidationError("synthetic config dimensions must be positive")
        if not 0.0 < self.tumor_fraction < 1.0:
            raise ValidationError(
                "tumor_fraction must lie strictly inside (0, 1); degenerate values "
                "make patch selection untestable"
            )
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError("flip_prob must be a probability")
        if self.noise_scale < 0 or self.staining_signal < 0:
            raise ValidationError("scales must be nonnegative")

    def resolved_templates(self) -> np.ndarray:
        if self.staining_templates is not None:
            t = np.asarray(self.staining_templates, dtype=np.int64)
            if t.shape != (self.n_subtypes, self.n_stains):
                raise ValidationError("staining_templates shape mismatch")
            return t
        return default_staining_templates(self.n_subtypes, self.n_stains)

    def resolved_centers(self) -> tuple[np.ndarray, np.ndarray]:
        tumor = (
            np.asarray(self.tumor_centers, dtype=np.float64)
            if self.tumor_centers is not None
            else _default_tumor_centers(self.n_subtypes, self.feature_dim, self.center_scale)
        )
        normal = (
            np.asarray(self.normal_center, dtype=np.float64)
            if self.normal_center is not None
            else np.zeros(self.feature_dim)
        )
        if tumor.shape != (self.n_subtypes, self.feature_dim) or normal.shape != (self.feature_dim,):
            raise ValidationError("feature center shape mismatch")
        return tumor, normal

    def to_jsonable(self) -> dict:
        out = {
            "n_cases": self.n_cases, "n_subtypes": self.n_subtypes,
            "n_stains": self.n_stains, "patches_per_case": self.patches_per_case,
            "feature_dim": self.feature_dim, "tumor_fraction": self.tumor_fraction,
            "flip_prob": self.flip_prob, "staining_signal": self.staining_signal,
            "noise_scale": self.noise_scale, "center_scale": self.center_scale,
            "seed": self.seed,
        }
        for name in ("staining_templates", "tumor_centers", "normal_center"):
            val = getattr(self, name)
            if val is not None:
                out[name] = np.asarray(val).tolist()
        return out

    @classmethod
    def from_jsonable(cls, doc: dict) -> "SynthConfig":
        kwargs = dict(doc)
        for name in ("staining_templates", "tumor_centers", "normal_center"):
            if name in kwargs and kwargs[name] is not None:
                kwargs[name] = np.asarray(kwargs[name], dtype=np.float64)
        return cls(**kwargs)


def _smooth(latent: np.ndarray) -> np.ndarray:
    """Window-3 moving average along the feature axis (edge-padded)."""
    padded = np.concatenate([latent[:1], latent, latent[-1:]])
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def generate_synthetic_dataset(cfg: SynthConfig) -> Dataset:
    """Draw a synthetic case collection.

    Subtypes are balanced to within one case and shuffled; each case's
    staining pattern is its subtype template with independent bit flips
    (redrawn while all-zero).  Tumor patches sit near a center determined
    by subtype and staining pattern; normal patches near a shared center.
    The low-magnification vector is a smoothed copy of the same latent
    with lower-variance independent noise, so both scales carry signal.
    """
    cfg.validate()
    templates = cfg.resolved_templates()
    tumor_centers, normal_center = cfg.resolved_centers()
    proj = _staining_projection(cfg.feature_dim, cfg.n_stains)
    rng = substream(cfg.seed, "synth/cases")

    subtype_seq = np.array([i % cfg.n_subtypes for i in range(cfg.n_cases)])
    rng.shuffle(subtype_seq)

    cases: list[Case] = []
    for idx in range(cfg.n_cases):
        k = int(subtype_seq[idx])
        while True:
            flips = rng.random(cfg.n_stains) < cfg.flip_prob
            bits = templates[k] ^ flips.astype(np.int64)
            if bits.any():
                break
        ihc = IhcPattern.from_bits(bits)

        tumor_latent = tumor_centers[k] + cfg.staining_signal * (proj @ bits)
        latents = np.vstack([normal_center, tumor_latent])
        smoothed = np.vstack([_smooth(normal_center), _smooth(tumor_latent)])

        n = cfg.patches_per_case
        flags = rng.random(n) < cfg.tumor_fraction
        rows = flags.astype(np.int64)
        feats_h = latents[rows] + cfg.noise_scale * rng.standard_normal((n, cfg.feature_dim))
        feats_l = smoothed[rows] + 0.5 * cfg.noise_scale * rng.standard_normal((n, cfg.feature_dim))

        patches = [
            Patch(i, i, {SCALE_HIGH: feats_h[i], SCALE_LOW: feats_l[i]}, bool(flags[i]))
            for i in range(n)
        ]
        cases.append(Case(f"C{idx:04d}", Subtype.from_index(k, cfg.n_subtypes), ihc, patches))

    return Dataset(
        cases=cases,
        n_subtypes=cfg.n_subtypes,
        n_stains=cfg.n_stains,
        feature_dim=cfg.feature_dim,
        scales=DEFAULT_SCALES,
        provenance={"generator": "synthetic", "config": cfg.to_jsonable()},
    )


# --- stratified splitting ---------------------------------------------------


def stratified_kfold(cases: list[Case], k: int = 5, val_fraction: float = 0.25,
                     seed: int = 0) -> list[tuple[list[Case], list[Case], list[Case]]]:
    """k splits of (train, val, test) preserving subtype ratios.

    Each subtype's cases are shuffled and dealt round-robin into k test
    groups; the per-subtype starting fold rotates so the leftover cases
    spread across folds.  Validation takes val_fraction of the remaining
    cases, stratified the same way.
    """
    if k < 2:
        raise ValidationError("k must be at least 2")
    by_subtype: dict[int, list[Case]] = {}
    for c in cases:
        by_subtype.setdefault(c.subtype.index, []).append(c)
    for s, group in sorted(by_subtype.items()):
        if len(group) < k:
            raise StratificationError(
                f"subtype {s} has {len(group)} cases, needs at least {k}"
            )

    test_folds: list[list[Case]] = [[] for _ in range(k)]
    rest_by_fold_subtype: dict[tuple[int, int], list[Case]] = {}
    offset = 0
    for s, group in sorted(by_subtype.items()):
        order = substream(seed, f"kfold/subtype{s}").permutation(len(group))
        shuffled = [group[i] for i in order]
        assignment = [(offset + i) % k for i in range(len(shuffled))]
        for case, fold in zip(shuffled, assignment):
            test_folds[fold].append(case)
        for fold in range(k):
            rest = [c for c, f in zip(shuffled, assignment) if f != fold]
            rest_by_fold_subtype[(fold, s)] = rest
        offset = (offset + len(shuffled) % k) % k

    splits = []
    for fold in range(k):
        train: list[Case] = []
        val: list[Case] = []
        for s in sorted(by_subtype):
            rest = rest_by_fold_subtype[(fold, s)]
            n_val = int(math.floor(val_fraction * len(rest) + 0.5))
            val.extend(rest[:n_val])
            train.extend(rest[n_val:])
        splits.append((train, val, test_folds[fold]))
    return splits


# --- feature lookup ----------------------------------------------------------


class FeatureCache:
    """Per-case feature matrices in patch-id order, built lazily."""

    def __init__(self, cases: list[Case]):
        self.cases_by_id = {c.case_id: c for c in cases}
        self._cache: dict[tuple[str, str], tuple[np.ndarray, np.ndarray, dict[int, int]]] = {}

    def case(self, case_id: str) -> Case:
        return self.cases_by_id[case_id]

    def matrix(self, case_id: str, scale: str) -> tuple[np.ndarray, np.ndarray]:
        """(patch ids ascending, feature matrix with matching rows)."""
        ids, feats, _ = self._entry(case_id, scale)
        return ids, feats

    def rows(self, case_id: str, scale: str, patch_ids) -> np.ndarray:
        _, feats, index = self._entry(case_id, scale)
        return feats[[index[int(p)] for p in patch_ids]]

    def _entry(self, case_id: str, scale: str):
        key = (case_id, scale)
        if key not in self._cache:
            case = self.cases_by_id[case_id]
            ordered = sorted(case.patches, key=lambda p: p.patch_id)
            for p in ordered:
                if scale not in p.features:
                    raise ValidationError(
                        f"case {case_id} patch {p.patch_id}: missing scale {scale!r}"
                    )
            ids = np.array([p.patch_id for p in ordered], dtype=np.int64)
            feats = np.vstack([p.features[scale] for p in ordered])
            index = {int(pid): row for row, pid in enumerate(ids)}
            self._cache[key] = (ids, feats, index)
        return self._cache[key]


# --- dataset file I/O ---------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset container; validates every case first."""
    for case in dataset.cases:
        validate_case(case, dataset.n_stains, dataset.feature_dim, dataset.scales)
    ids = [c.case_id for c in dataset.cases]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate case ids")

    builder = BlobBuilder()
    case_docs = []
    for case in dataset.cases:
        patch_docs = []
        for p in sorted(case.patches, key=lambda q: q.patch_id):
            refs = {}
            for scale in dataset.scales:
                off, cnt = builder.add(p.features[scale])
                refs[scale] = [off, cnt]
            patch_docs.append({
                "id": p.patch_id,
                "pos": p.position,
                "tumor": p.tumor_flag,
                "f": refs,
            })
        case_docs.append({
            "case_id": case.case_id,
            "subtype": case.subtype.index,
            "ihc": "".join(str(b) for b in case.ihc.bits),
            "split_tag": case.split_tag,
            "patches": patch_docs,
        })

    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "n_subtypes": dataset.n_subtypes,
        "n_stains": dataset.n_stains,
        "feature_dim": dataset.feature_dim,
        "scales": list(dataset.scales),
        "provenance": dataset.provenance,
        "cases": case_docs,
    }
    write_container(path, manifest, builder.tobytes())


def load_dataset(path) -> Dataset:
    doc, blob = read_container(path, DATASET_FORMAT, DATASET_VERSION)
    try:
        n_subtypes = int(doc["n_subtypes"])
        n_stains = int(doc["n_stains"])
        feature_dim = int(doc["feature_dim"])
        scales = tuple(doc["scales"])
        cases = []
        for cd in doc["cases"]:
            patches = []
            for pd in cd["patches"]:
                feats = {}
                for scale in scales:
                    off, cnt = pd["f"][scale]
                    if cnt != feature_dim:
                        raise ValidationError(
                            f"{path}: patch {pd['id']} scale {scale} has {cnt} values, "
                            f"header says {feature_dim}"
                        )
                    feats[scale] = blob.fetch(int(off), int(cnt))
                tumor = pd["tumor"]
                patches.append(Patch(pd["id"], pd["pos"], feats,
                                     None if tumor is None else bool(tumor)))
            bits = [int(ch) for ch in cd["ihc"]]
            if len(bits) != n_stains:
                raise ValidationError(f"{path}: staining pattern length mismatch")
            cases.append(Case(
                cd["case_id"],
                Subtype.from_index(int(cd["subtype"]), n_subtypes),
                IhcPattern.from_bits(bits),
                patches,
                cd.get("split_tag"),
            ))
    except (KeyError, TypeError, IndexError) as exc:
        from .errors import FormatError

        raise FormatError(f"{path}: malformed dataset manifest ({exc!r})") from exc
    return Dataset(cases, n_subtypes, n_stains, feature_dim, scales, doc.get("provenance", {}))
