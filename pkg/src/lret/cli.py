"""Command-line pipeline: gen-data, train, build-db, query, evaluate, report.

Every command takes a single JSON config (schema_version 1) whose values
individual flags override, derives all randomness from one seed through
named substreams, and writes its artifacts under a run directory with a
manifest.  Exit codes: 0 success, 2 validation, 3 numeric divergence,
4 incompatibility, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .container import BlobBuilder, read_container, write_container
from .data import (
    Dataset,
    SynthConfig,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
)
from .dml import (
    LogRecord,
    MetricModel,
    ScaleState,
    TrainingLog,
    TrainResult,
    TrainSchedule,
    alternate_training,
)
from .errors import (
    EXIT_IO,
    EXIT_OK,
    IncompatibilityError,
    LretError,
    ValidationError,
)
from .evaluation import (
    DEFAULT_METHODS,
    BenchmarkReport,
    cross_validated_benchmark,
)
from .mil import AttentionHead, MilModel, build_bags
from .numcore import (
    OptimizerState,
    dense_net_arrays,
    dense_net_from_arrays,
    load_checkpoint,
    save_checkpoint,
)
from .report import render_query_figures, write_benchmark_report
from .retrieval import (
    RetrievalModels,
    build_database,
    export_explanation,
    load_database,
    retrieve,
    save_database,
)
from .seeding import derive_seed

SCALE_FLAG = {"h": ("H",), "l": ("L",), "hl": ("H", "L")}
SCHEMA_VERSION = 1
STATE_FORMAT = "lret-trainstate"
STATE_VERSION = 1


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file is not valid JSON: {path}") from exc
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise IncompatibilityError(
            f"config schema_version {version!r}, this build reads {SCHEMA_VERSION}"
        )
    return doc


def write_manifest(out_dir: Path, command: str, seed: int, config: dict,
                   outputs: list[str]) -> None:
    doc = {
        "command": command,
        "package_version": __version__,
        "seed": seed,
        "config": config,
        "outputs": sorted(outputs),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n"
    )


def _resolve_seed(args, config: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in config:
        return int(config["seed"])
    raise ValidationError("a seed is mandatory: pass --seed or set it in the config")


def _resolve_scales(args, config: dict) -> tuple[str, ...]:
    flag = args.scale or config.get("scale") or "hl"
    if flag not in SCALE_FLAG:
        raise ValidationError(f"--scale must be one of {sorted(SCALE_FLAG)}")
    return SCALE_FLAG[flag]


def _schedule_from(config: dict, args) -> TrainSchedule:
    doc = dict(config.get("schedule", {}))
    if getattr(args, "relevance", None):
        doc["relevance_kind"] = args.relevance
    elif "relevance" in config:
        doc["relevance_kind"] = config["relevance"]
    if getattr(args, "rounds", None) is not None:
        doc["outer_rounds"] = args.rounds
    try:
        schedule = TrainSchedule.from_jsonable(doc)
    except TypeError as exc:
        raise ValidationError(f"bad schedule config: {exc}") from exc
    schedule.validate()
    return schedule


# --- model checkpoint bundles -------------------------------------------------


def save_model_bundle(out_dir: Path, scales: tuple[str, ...],
                      mil_models: dict, metric_models: dict) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for scale in scales:
        mil = mil_models[scale]
        enc_arrays, enc_meta = dense_net_arrays(mil.encoder)
        clf_arrays, clf_meta = dense_net_arrays(mil.classifier)
        pieces = [
            ("enc", enc_arrays, enc_meta),
            ("att", [("V", mil.attention.V), ("w", mil.attention.w)], {}),
            ("clf", clf_arrays, clf_meta),
        ]
        if scale in metric_models:
            met_arrays, met_meta = dense_net_arrays(metric_models[scale].metric_head)
            pieces.append(("met", met_arrays, met_meta))
        for component, arrays, meta in pieces:
            name = f"{component}_{scale}.lret"
            save_checkpoint(out_dir / name, scale, component, arrays, meta)
            written.append(name)
    return written


def load_model_bundle(ckpt_dir: Path, scales: tuple[str, ...]) -> tuple[dict, dict]:
    mil_models: dict[str, MilModel] = {}
    metric_models: dict[str, MetricModel] = {}
    for scale in scales:
        nets = {}
        metas = {}
        for component in ("enc", "att", "clf", "met"):
            path = ckpt_dir / f"{component}_{scale}.lret"
            if component == "met" and not path.exists():
                continue
            if not path.exists():
                raise ValidationError(f"missing checkpoint {path}")
            file_scale, file_component, arrays, meta = load_checkpoint(path)
            if file_component != component or file_scale != scale:
                raise IncompatibilityError(
                    f"{path}: header says {file_component}/{file_scale}, "
                    f"expected {component}/{scale}"
                )
            nets[component] = arrays
            metas[component] = meta
        encoder = dense_net_from_arrays(nets["enc"], metas["enc"])
        att = dict(nets["att"])
        mil_models[scale] = MilModel(
            encoder,
            AttentionHead(att["V"].copy(), att["w"].copy()),
            dense_net_from_arrays(nets["clf"], metas["clf"]),
        )
        if "met" in nets:
            metric_models[scale] = MetricModel(
                encoder, dense_net_from_arrays(nets["met"], metas["met"])
            )
    return mil_models, metric_models


# --- training state (resume) ----------------------------------------------------


def save_train_state(path: Path, result: TrainResult, schedule: TrainSchedule,
                     seed: int) -> None:
    builder = BlobBuilder()

    def net_doc(net):
        arrays, meta = dense_net_arrays(net)
        return {"refs": [[*builder.add(a), list(a.shape)] for _, a in arrays],
                "meta": meta}

    def vel_doc(state: OptimizerState):
        return [[*builder.add(v), list(v.shape)] for v in state.velocity]

    per_scale = {}
    for scale, st in result.states.items():
        per_scale[scale] = {
            "enc": net_doc(st.mil_model.encoder),
            "att": [[*builder.add(st.mil_model.attention.V),
                     list(st.mil_model.attention.V.shape)],
                    [*builder.add(st.mil_model.attention.w),
                     list(st.mil_model.attention.w.shape)]],
            "clf": net_doc(st.mil_model.classifier),
            "met": net_doc(st.metric_model.metric_head),
            "mil_velocity": vel_doc(st.mil_optimizer),
            "dml_velocity": vel_doc(st.dml_optimizer),
        }
    manifest = {
        "format": STATE_FORMAT,
        "version": STATE_VERSION,
        "seed": seed,
        "scales": list(result.scales),
        "next_round": result.next_round,
        "schedule": schedule.to_jsonable(),
        "log": [[r.round, r.phase, r.epoch, r.mean_loss, r.extra] for r in result.log.records],
        "per_scale": per_scale,
    }
    write_container(path, manifest, builder.tobytes())


def load_train_state(path: Path, train_cases) -> tuple[TrainResult, TrainSchedule, int]:
    doc, blob = read_container(path, STATE_FORMAT, STATE_VERSION)
    schedule = TrainSchedule.from_jsonable(doc["schedule"])
    seed = int(doc["seed"])
    scales = tuple(doc["scales"])

    def fetch(ref):
        off, cnt, shape = ref
        return blob.fetch(int(off), int(cnt)).reshape([int(s) for s in shape]).copy()

    def net_from(docnet):
        arrays = []
        for i, ref in enumerate(docnet["refs"]):
            kind = "weight" if i % 2 == 0 else "bias"
            arrays.append((f"layer{i // 2}/{kind}", fetch(ref)))
        return dense_net_from_arrays(arrays, docnet["meta"])

    states = {}
    for scale in scales:
        sd = doc["per_scale"][scale]
        encoder = net_from(sd["enc"])
        mil = MilModel(encoder, AttentionHead(fetch(sd["att"][0]), fetch(sd["att"][1])),
                       net_from(sd["clf"]))
        metric = MetricModel(encoder, net_from(sd["met"]))
        opt_kwargs = dict(learning_rate=schedule.learning_rate,
                          momentum=schedule.momentum,
                          weight_decay=schedule.weight_decay)
        mil_opt = OptimizerState(**opt_kwargs)
        mil_opt.velocity = [fetch(r) for r in sd["mil_velocity"]]
        dml_opt = OptimizerState(**opt_kwargs)
        dml_opt.velocity = [fetch(r) for r in sd["dml_velocity"]]
        bags = []
        for case in train_cases:
            bags.extend(build_bags(case, schedule.q_patches(), schedule.bag_size,
                                   schedule.max_bags, derive_seed(seed, f"bags/{scale}")))
        states[scale] = ScaleState(mil, metric, mil_opt, dml_opt, bags)

    log = TrainingLog([LogRecord(int(r), str(p), int(e), float(l),
                                 None if x is None else float(x), 0.0)
                       for r, p, e, l, x in doc["log"]])
    return TrainResult(scales, states, log, int(doc["next_round"])), schedule, seed


# --- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    seed = _resolve_seed(args, config)
    synth_doc = dict(config.get("synth", {}))
    synth_doc["seed"] = derive_seed(seed, "gen-data")
    try:
        cfg = SynthConfig.from_jsonable(synth_doc)
    except TypeError as exc:
        raise ValidationError(f"bad synth config: {exc}") from exc
    cfg.validate()
    dataset = generate_synthetic_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out / "dataset.json")
    write_manifest(out, "gen-data", seed, config, ["dataset.json", "dataset.bin"])
    print(f"wrote {len(dataset.cases)} cases to {out / 'dataset.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    seed = _resolve_seed(args, config)
    scales = _resolve_scales(args, config)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        resume, schedule, seed = load_train_state(Path(args.resume), dataset.cases)
    else:
        resume = None
        schedule = _schedule_from(config, args)

    stop_after = args.stop_after if args.stop_after is not None else schedule.outer_rounds
    run_schedule = TrainSchedule.from_jsonable(
        {**schedule.to_jsonable(), "outer_rounds": min(stop_after, schedule.outer_rounds)}
    )
    result = alternate_training(dataset.cases, run_schedule,
                                derive_seed(seed, "train"), scales, resume=resume)
    # carry the full target round count so a resumed run knows where to stop
    result_for_state = TrainResult(result.scales, result.states, result.log,
                                   result.next_round)

    ckpt_names = save_model_bundle(out / "checkpoints", scales,
                                   result.mil_models(), result.metric_models())
    save_train_state(out / "train_state.json", result_for_state, schedule, seed)
    (out / "training.log").write_text("\n".join(result.log.file_lines()) + "\n")
    (out / "training_canonical.log").write_text(
        "\n".join(result.log.canonical_lines()) + "\n"
    )
    write_manifest(out, "train", seed, config,
                   [f"checkpoints/{n}" for n in ckpt_names]
                   + ["train_state.json", "train_state.bin", "training.log",
                      "training_canonical.log"])
    done = result.next_round
    print(f"trained {done}/{schedule.outer_rounds} rounds on scales {','.join(scales)}; "
          f"checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_build_db(args) -> int:
    config = load_config(args.config)
    seed = _resolve_seed(args, config)
    scales = _resolve_scales(args, config)
    dataset = load_dataset(args.data)
    mil_models, metric_models = load_model_bundle(Path(args.models) / "checkpoints", scales)
    retrieval_cfg = config.get("retrieval", {})
    q_test = args.q_test if args.q_test is not None else int(retrieval_cfg.get("q_test", 1000))
    m_fraction = args.m if args.m is not None else float(retrieval_cfg.get("m_fraction", 0.10))
    models = RetrievalModels(scales, mil_models, metric_models)
    db = build_database(models, dataset.cases, q_test, m_fraction,
                        derive_seed(seed, "build-db"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_database(db, out / "database.json")
    write_manifest(out, "build-db", seed, config, ["database.json", "database.bin"])
    print(f"database of {len(db.entries)} cases written to {out / 'database.json'}")
    return EXIT_OK


def cmd_query(args) -> int:
    config = load_config(args.config)
    seed = _resolve_seed(args, config)
    dataset = load_dataset(args.data)
    db = load_database(args.db)
    mil_models, metric_models = load_model_bundle(Path(args.models) / "checkpoints",
                                                  db.scales)
    models = RetrievalModels(db.scales, mil_models, metric_models,
                             db.embed_mode, db.selection)
    cases_by_id = dataset.cases_by_id()
    if args.case not in cases_by_id:
        raise ValidationError(f"case {args.case!r} not in dataset")
    k = args.k if args.k is not None else int(config.get("evaluate", {}).get("k", 5))
    result = retrieve(db, cases_by_id[args.case], k, models,
                      derive_seed(seed, "query"), cases_by_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_explanation(result, out)
    write_manifest(out, "query", seed, config,
                   ["report.json", "matched_pairs.tsv", "heatmaps"])
    top = ", ".join(f"{rc.case_id} (D={rc.distance:.4g})" for rc in result.ranking)
    print(f"top-{k} for {args.case}: {top}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    seed = _resolve_seed(args, config)
    dataset = load_dataset(args.data)
    eval_cfg = config.get("evaluate", {})
    methods = (args.methods.split(",") if args.methods
               else eval_cfg.get("methods", list(DEFAULT_METHODS)))
    mags_flag = (args.magnifications.split(",") if args.magnifications
                 else eval_cfg.get("magnifications", ["h", "l", "hl"]))
    mags = []
    for m in mags_flag:
        key = m.lower()
        if key not in SCALE_FLAG:
            raise ValidationError(f"unknown magnification {m!r}")
        mags.append("HL" if key == "hl" else key.upper())
    k = args.k if args.k is not None else int(eval_cfg.get("k", 5))
    schedule = _schedule_from(config, args)
    retrieval_cfg = config.get("retrieval", {})
    report = cross_validated_benchmark(
        dataset.cases, methods, mags, k, derive_seed(seed, "evaluate"), schedule,
        q_test=int(retrieval_cfg.get("q_test", 1000)),
        m_fraction=float(retrieval_cfg.get("m_fraction", 0.10)),
    )
    out = Path(args.out)
    paths = write_benchmark_report(report, out)
    write_manifest(out, "evaluate", seed, config,
                   [p.name for p in paths.values()])
    sys.stdout.write(open(paths["table"]).read())
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(getattr(args, "from"))
    out = Path(args.out) if args.out else src
    written: list[Path] = []
    if (src / "benchmark.json").exists():
        report = BenchmarkReport.from_jsonable(
            json.loads((src / "benchmark.json").read_text())
        )
        paths = write_benchmark_report(report, out)
        written.extend(paths.values())
    if (src / "report.json").exists():
        written.extend(render_query_figures(src, out))
    if not written:
        raise ValidationError(f"{src}: nothing to render (no benchmark.json or report.json)")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lret",
        description="case-based similar-slide retrieval pipeline",
    )
    parser.add_argument("--version", action="version", version=f"lret {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, seed=True):
        p.add_argument("--config", help="JSON config file (schema_version 1)")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap (current build runs serially)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="alternating MIL/contrastive training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", choices=sorted(SCALE_FLAG))
    p.add_argument("--relevance", choices=("staining", "subtype"))
    p.add_argument("--rounds", type=int, help="override outer round count")
    p.add_argument("--stop-after", type=int, help="pause after this round (resumable)")
    p.add_argument("--resume", help="train_state.json from a paused run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-db", help="build the search database")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="training run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", choices=sorted(SCALE_FLAG))
    p.add_argument("--q-test", type=int, dest="q_test")
    p.add_argument("--m", type=float, help="high-attention fraction")
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("query", help="retrieve similar cases for a query")
    common(p)
    p.add_argument("--db", required=True, help="database.json path")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="cross-validated method comparison")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--methods", help="comma list, e.g. staining_ha,random_features")
    p.add_argument("--magnifications", help="comma list from {h,l,hl}")
    p.add_argument("--relevance", choices=("staining", "subtype"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--draws", type=int, default=10_000,
                   help="Monte Carlo draws for significance reporting")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render figures + tables from saved reports")
    common(p, seed=False)
    p.add_argument("--from", required=True, dest="from")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except LretError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
