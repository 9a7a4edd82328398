"""Operator command line for the tomforge pipeline.

Commands cover the full life cycle: rewrite events into situation
candidates, expand curated situations into the remaining node kinds,
serve the review API, finalize the graph, derive and export training
splits, run chain inference, score predictions, augment dialogues, and
print graph statistics.

Settings come from an optional config file (``[section]`` headers with
``key = value`` lines) overlaid by ``TOMFORGE_<SECTION>_<KEY>``
environment variables. Unknown sections or keys are rejected.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 backend
error, 5 IO error. Failures print one JSON object to stderr:
``{"error": {"type": ..., "message": ...}}``.
"""

import argparse
import json
import os
import sys

from . import (
    construction_pipeline,
    curation,
    curation_http,
    esc_augment,
    evaluation,
    graph_store,
    inference_pipeline,
    llm_backend,
    task_builder,
)
from .chain_model import NodeKind, Polarity
from .errors import (
    BackendError,
    ConfigError,
    FormatError,
    StageFailure,
    TomforgeError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_BACKEND = 4
EXIT_IO = 5

_DEFAULTS = {
    "paths": {
        "pool": "pool.jsonl",
        "graph_dir": "graph",
        "decision_log": "decisions.jsonl",
        "out_dir": "out",
    },
    "backend": {
        "kind": "mock",
        "seed": "0",
        "endpoint_url": "",
    },
    "pipeline": {
        "situations_per_event": "5",
        "thought_rounds_per_polarity": "6",
        "candidates_per_expansion": "3",
        "jaccard_dup_threshold": "0.9",
    },
    "inference": {
        "similarity_threshold": "0.35",
        "emotion_mode": "ConstrainedChoice",
        "token_index": "1",
        "chains_per_polarity": "1",
    },
}

_TASKS = {
    "clue": task_builder.TaskKind.CLUE_GEN,
    "thought": task_builder.TaskKind.THOUGHT_GEN,
    "action": task_builder.TaskKind.ACTION_GEN,
    "emotion": task_builder.TaskKind.EMOTION_CLS,
}

_POLARITIES = {
    "pos": Polarity.POSITIVE,
    "positive": Polarity.POSITIVE,
    "neg": Polarity.NEGATIVE,
    "negative": Polarity.NEGATIVE,
}


# -- configuration -------------------------------------------------------

def load_config(path=None) -> dict:
    """Read the layered configuration: defaults, file, environment."""
    config = {section: dict(keys) for section, keys in _DEFAULTS.items()}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            section = None
            for line_no, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#") or line.startswith(";"):
                    continue
                if line.startswith("[") and line.endswith("]"):
                    section = line[1:-1].strip()
                    if section not in config:
                        raise ConfigError(
                            f"{path}:{line_no}: unknown section [{section}]")
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key = value")
                if section is None:
                    raise ConfigError(
                        f"{path}:{line_no}: key outside any [section]")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in config[section]:
                    raise ConfigError(
                        f"{path}:{line_no}: unknown key {section}.{key}")
                config[section][key] = value.strip().strip('"')
    for section, keys in config.items():
        for key in keys:
            env_name = f"TOMFORGE_{section.upper()}_{key.upper()}"
            if env_name in os.environ:
                config[section][key] = os.environ[env_name]
    return config


def _int_setting(config, section, key) -> int:
    value = config[section][key]
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}") from None


def _float_setting(config, section, key) -> float:
    value = config[section][key]
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{section}.{key} must be a number, got {value!r}") from None


def pipeline_config(config) -> construction_pipeline.PipelineConfig:
    return construction_pipeline.PipelineConfig(
        situations_per_event=_int_setting(config, "pipeline", "situations_per_event"),
        thought_rounds_per_polarity=_int_setting(
            config, "pipeline", "thought_rounds_per_polarity"),
        candidates_per_expansion=_int_setting(
            config, "pipeline", "candidates_per_expansion"),
        jaccard_dup_threshold=_float_setting(
            config, "pipeline", "jaccard_dup_threshold"))


def inference_config(config) -> inference_pipeline.InferenceConfig:
    return inference_pipeline.InferenceConfig(
        similarity_threshold=_float_setting(config, "inference", "similarity_threshold"),
        emotion_mode=config["inference"]["emotion_mode"],
        token_index=_int_setting(config, "inference", "token_index"),
        chains_per_polarity=_int_setting(config, "inference", "chains_per_polarity"))


def make_backend(config, kind=None):
    kind = kind or config["backend"]["kind"]
    if kind == "mock":
        return llm_backend.MockBackend(seed=_int_setting(config, "backend", "seed"))
    if kind == "http":
        url = config["backend"]["endpoint_url"]
        if not url:
            raise ConfigError("backend.endpoint_url is required for the http backend")
        return llm_backend.HttpBackend(endpoint_url=url)
    raise ConfigError(f"unknown backend kind {kind!r}")


# -- shared helpers ------------------------------------------------------

def _pool_path(config) -> str:
    return config["paths"]["pool"]


def _load_pool(config) -> construction_pipeline.CandidatePool:
    return construction_pipeline.CandidatePool.load(_pool_path(config))


def _load_graph(config) -> graph_store.Graph:
    return graph_store.load(config["paths"]["graph_dir"])


def _load_text_sets(path) -> dict:
    """Read {"input_id", "texts"} JSONL into an id -> texts mapping."""
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{line_no}: not valid JSON") from exc
            if (not isinstance(record, dict) or "input_id" not in record
                    or not isinstance(record.get("texts"), list)):
                raise FormatError(
                    f'{path}:{line_no}: expected {{"input_id", "texts"}}')
            input_id = str(record["input_id"])
            if input_id in mapping:
                raise FormatError(
                    f"{path}:{line_no}: duplicate input_id {input_id!r}")
            mapping[input_id] = [str(text) for text in record["texts"]]
    return mapping


def _derived_split(config, ratio, seed) -> task_builder.DatasetSplit:
    graph = _load_graph(config)
    per_task = task_builder.derive_all(graph)
    samples = [sample for task in task_builder.TaskKind for sample in per_task[task]]
    return task_builder.split_by_situation(samples, ratio=ratio, seed=seed)


def format_stats_table(stats) -> str:
    """Fixed-width per-kind table with thousands separators and
    retention as a two-decimal percentage."""
    lines = [f"{'Kind':<10} {'Raw':>12} {'Final':>12} {'Retention':>10}"]
    for kind in NodeKind:
        name = kind.value
        raw = stats.raw_counts.get(name, 0)
        final = stats.final_counts.get(name, 0)
        ratio = stats.retention.get(name)
        retention = f"{ratio * 100:.2f}%" if ratio is not None else "-"
        lines.append(f"{name:<10} {raw:>12,} {final:>12,} {retention:>10}")
    lines.append(f"Chains: {stats.chains_total:,} "
                 f"(positive {stats.chains_positive:,}, "
                 f"negative {stats.chains_negative:,})")
    return "\n".join(lines)


# -- subcommands ---------------------------------------------------------

def cmd_build_situations(args, config) -> int:
    events = construction_pipeline.load_events(args.events)
    path = _pool_path(config)
    if os.path.exists(path):
        pool = construction_pipeline.CandidatePool.load(path)
    else:
        pool = construction_pipeline.CandidatePool()
    backend = make_backend(config)
    created = construction_pipeline.rewrite_events(events, backend, pool,
                                                   pipeline_config(config))
    pool.save(path)
    print(f"situations: {len(created):,} new ({len(events):,} events), pool: {path}")
    return EXIT_OK


def cmd_build_expand(args, config) -> int:
    pool = _load_pool(config)
    backend = make_backend(config)
    counts = construction_pipeline.run_expansions(pool, backend,
                                                  pipeline_config(config))
    pool.save(_pool_path(config))
    for name in ("Thought", "Clue", "Action", "Emotion"):
        print(f"{name.lower()}s: {counts.get(name, 0):,} new")
    return EXIT_OK


def cmd_curate_serve(args, config) -> int:
    roster, tokens = curation_http.load_roster(args.roster)
    pool_path = _pool_path(config)
    pool = construction_pipeline.CandidatePool.load(pool_path)
    service = curation.CurationService(pool, roster=roster,
                                       log_path=config["paths"]["decision_log"])
    server = curation_http.make_server(service, tokens, host=args.host,
                                       port=args.port,
                                       out_dir=config["paths"]["graph_dir"])
    host, port = server.server_address[:2]
    # flush so scripts that launch the server see the address immediately
    print(f"curation API listening on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        # persist review outcomes so later build and finalize steps see them
        server.server_close()
        pool.save(pool_path)
    print(f"pool saved to {pool_path}")
    return EXIT_OK


def cmd_finalize(args, config) -> int:
    pool = _load_pool(config)
    log_path = config["paths"]["decision_log"]
    if os.path.exists(log_path):
        records = curation.CurationService.read_log(log_path)
        service = curation.CurationService.replay(pool, records)
    else:
        service = curation.CurationService(pool, open_mode=True)
    graph, stats = service.finalize(force=args.force)
    graph_dir = config["paths"]["graph_dir"]
    graph_store.save(graph, graph_dir)
    print(format_stats_table(stats))
    print(f"graph written to {graph_dir}")
    return EXIT_OK


def cmd_split(args, config) -> int:
    split = _derived_split(config, args.ratio, args.seed)
    out_dir = config["paths"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    task_builder.export_manifest(split, os.path.join(out_dir, "manifest.json"))
    print(f"train_situations: {len(split.train_situations)}, "
          f"val_situations: {len(split.validation_situations)}")
    return EXIT_OK


def cmd_export_training(args, config) -> int:
    split = _derived_split(config, args.ratio, args.seed)
    count = task_builder.export_training_file(split, args.out, part=args.part)
    print(f"{count:,} {args.part} samples -> {args.out}")
    return EXIT_OK


def cmd_infer(args, config) -> int:
    polarity = _POLARITIES[args.polarity.lower()]
    backend = make_backend(config, kind=args.backend)
    graph_dir = config["paths"]["graph_dir"]
    graph = None
    if os.path.exists(os.path.join(graph_dir, "nodes.jsonl")):
        graph = graph_store.load(graph_dir)
    results = inference_pipeline.lookup_or_infer(graph, args.situation, polarity,
                                                 backend, inference_config(config))
    print(json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True,
                     ensure_ascii=False))
    return EXIT_OK


def cmd_eval(args, config) -> int:
    predictions = _load_text_sets(args.preds)
    references = _load_text_sets(args.refs)
    report = evaluation.evaluate_task(_TASKS[args.task], predictions, references)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(evaluation.render_report_table([report]))
    return EXIT_OK


def cmd_esc_augment(args, config) -> int:
    backend = make_backend(config)
    source = (esc_augment.KeywordSource.THOUGHTS if args.source == "thoughts"
              else esc_augment.KeywordSource.ACTIONS)
    count = esc_augment.augment_file(args.dialogues, args.out, backend,
                                     esc_augment.AugmentConfig(keyword_source=source))
    print(f"augmented {count:,} dialogues -> {args.out}")
    return EXIT_OK


def cmd_stats(args, config) -> int:
    graph = _load_graph(config)
    print(json.dumps(graph.stats().to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as JSON on stderr."""

    def error(self, message):
        _print_error("UsageError", message)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tomforge",
        description="Build, curate, query, and extend a cognitive knowledge "
                    "graph of situation, clue, thought, action, and emotion "
                    "chains.")
    parser.add_argument("--config", metavar="FILE",
                        help="config file with [paths], [backend], [pipeline], "
                             "and [inference] sections")
    commands = parser.add_subparsers(dest="command", required=True,
                                     metavar="COMMAND")

    build = commands.add_parser("build", help="generate candidate pool stages")
    stages = build.add_subparsers(dest="stage", required=True, metavar="STAGE")
    situations = stages.add_parser(
        "situations", help="rewrite events into situation candidates")
    situations.add_argument("--events", required=True, metavar="FILE",
                            help="text file with one event per line")
    situations.set_defaults(func=cmd_build_situations)
    expand = stages.add_parser(
        "expand",
        help="expand curated situations into thoughts, clues, actions, "
             "and emotion labels")
    expand.set_defaults(func=cmd_build_expand)

    curate = commands.add_parser("curate", help="run the review service")
    curate_sub = curate.add_subparsers(dest="action", required=True,
                                       metavar="ACTION")
    serve = curate_sub.add_parser("serve", help="serve the curation HTTP API")
    serve.add_argument("--host", default="127.0.0.1", help="bind address")
    serve.add_argument("--port", type=int, default=8765, help="bind port")
    serve.add_argument("--roster", required=True, metavar="FILE",
                       help="JSON annotator roster with tokens and roles")
    serve.set_defaults(func=cmd_curate_serve)

    finalize = commands.add_parser(
        "finalize",
        help="replay the decision log over the pool and write the graph")
    finalize.add_argument("--force", action="store_true",
                          help="finalize even if undecided items remain")
    finalize.set_defaults(func=cmd_finalize)

    split = commands.add_parser(
        "split", help="derive task samples and write the split manifest")
    split.add_argument("--ratio", type=float, default=0.9,
                       help="train share of situations (default 0.9)")
    split.add_argument("--seed", type=int, default=0,
                       help="shuffle seed (default 0)")
    split.set_defaults(func=cmd_split)

    export = commands.add_parser(
        "export-training", help="write one split part as training JSONL")
    export.add_argument("--out", required=True, metavar="FILE",
                        help="output JSONL path")
    export.add_argument("--part", choices=["train", "validation"],
                        default="train", help="which side to export")
    export.add_argument("--ratio", type=float, default=0.9,
                        help="train share of situations (default 0.9)")
    export.add_argument("--seed", type=int, default=0,
                        help="shuffle seed (default 0)")
    export.set_defaults(func=cmd_export_training)

    infer = commands.add_parser(
        "infer", help="produce chains for a situation, stored or generated")
    infer.add_argument("--situation", required=True, help="situation text")
    infer.add_argument("--polarity", required=True,
                       choices=sorted(_POLARITIES),
                       help="which polarity branch to produce")
    infer.add_argument("--backend", choices=["mock", "http"],
                       help="override the configured backend")
    infer.set_defaults(func=cmd_infer)

    evaluate = commands.add_parser(
        "eval", help="score predictions against references for one task")
    evaluate.add_argument("--task", required=True, choices=sorted(_TASKS),
                          help="which task the files belong to")
    evaluate.add_argument("--preds", required=True, metavar="FILE",
                          help='predictions JSONL {"input_id", "texts"}')
    evaluate.add_argument("--refs", required=True, metavar="FILE",
                          help='references JSONL {"input_id", "texts"}')
    evaluate.add_argument("--json", action="store_true",
                          help="print the report as JSON instead of a table")
    evaluate.set_defaults(func=cmd_eval)

    esc = commands.add_parser("esc", help="dialogue augmentation")
    esc_sub = esc.add_subparsers(dest="action", required=True, metavar="ACTION")
    augment = esc_sub.add_parser(
        "augment", help="append generated keywords to dialogue histories")
    augment.add_argument("--dialogues", required=True, metavar="FILE",
                         help="dialogue JSONL input")
    augment.add_argument("--out", required=True, metavar="FILE",
                         help="augmented JSONL output")
    augment.add_argument("--source", choices=["thoughts", "actions"],
                         default="thoughts",
                         help="which generated texts feed keyword extraction")
    augment.set_defaults(func=cmd_esc_augment)

    stats = commands.add_parser("stats", help="print stored graph statistics")
    stats.set_defaults(func=cmd_stats)

    return parser


def _print_error(type_name: str, message: str) -> None:
    print(json.dumps({"error": {"type": type_name, "message": message}}),
          file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except (BackendError, StageFailure) as exc:
        _print_error(type(exc).__name__, str(exc))
        return EXIT_BACKEND
    except FormatError as exc:
        _print_error(type(exc).__name__, str(exc))
        return EXIT_IO
    except TomforgeError as exc:
        _print_error(type(exc).__name__, str(exc))
        return EXIT_VALIDATION
    except OSError as exc:
        _print_error(type(exc).__name__, str(exc))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
