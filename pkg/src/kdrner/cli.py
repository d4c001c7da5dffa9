"""Command-line driver: run, eval, build-demos, snapshot.

Exit codes: 0 success (including partial document failures), 2 usage or
configuration errors, 3 total failure. Run directories are resumable:
documents with an existing trace file are skipped, and the manifest pins
the config, template, snapshot, and dataset hashes.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .agents import Pipeline, PipelineOptions, read_trace, write_trace
from .backend import HttpBackend, ScriptedBackend, load_scripted_rules, record_replay
from .corpus import Dataset, EntityType, TypeDefinition, load_conll, load_jsonl
from .demobuild import (
    build_support_set,
    default_support_size,
    load_demonstrations,
    save_demonstrations,
    strip_negatives,
)
from .errors import ConfigError, DatasetError, KdrError, TransportError
from .evalkit import emit_report, format_report_table
from .prompting import fingerprint_text, load_templates
from .wiki import CachedRetriever, SnapshotCache, WikipediaClient

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3


@dataclass
class RunConfig:
    dataset: str = ""
    dataset_format: str = "jsonl"
    type_definitions: str = ""
    support_set: str = ""
    template: str = ""
    base_url: str = ""
    model: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 1024
    in_flight_cap: int = 4
    backend_mode: str = "http"
    session: str = ""
    rules: str = ""
    snapshot: str = ""
    offline: bool = True
    reflection: bool = True
    retrieval: bool = True
    disambiguation: bool = True
    negatives: bool = True
    max_queries: int = 5
    max_ambiguous: int = 5
    demos: int = 5
    seed: int = 0
    run_dir: str = ""


def canonical_config(config: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(canonical_config(config).encode("utf-8")).hexdigest()


def load_config_file(path: str | Path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in dataclasses.fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    try:
        config = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    validate_config(config)
    return config


def validate_config(config: RunConfig) -> None:
    def need_file(value: str, label: str):
        if not value:
            raise ConfigError(f"{label} is required")
        if not Path(value).is_file():
            raise ConfigError(f"{label} not found: {value}")

    need_file(config.dataset, "dataset")
    if config.dataset_format not in ("jsonl", "conll"):
        raise ConfigError(f"unknown dataset format: {config.dataset_format}")
    need_file(config.type_definitions, "type_definitions")
    need_file(config.support_set, "support_set")
    if config.template:
        need_file(config.template, "template")
    if min(config.max_queries, config.max_ambiguous, config.demos, config.in_flight_cap) <= 0:
        raise ConfigError("caps must be positive")
    if config.max_output_tokens <= 0 or config.temperature < 0:
        raise ConfigError("invalid decoding parameters")
    if config.backend_mode not in ("http", "record", "replay", "scripted"):
        raise ConfigError(f"unknown backend mode: {config.backend_mode}")
    if config.backend_mode in ("http", "record") and not config.base_url:
        raise ConfigError("base_url is required for http/record backends")
    if config.backend_mode in ("record", "replay") and not config.session:
        raise ConfigError("session path is required for record/replay backends")
    if config.backend_mode == "scripted":
        need_file(config.rules, "rules")
    if config.retrieval:
        if not config.snapshot:
            raise ConfigError("snapshot path is required when retrieval is enabled")
        if config.offline and not Path(config.snapshot).is_file():
            raise ConfigError(f"offline mode needs an existing snapshot: {config.snapshot}")
    if not config.run_dir:
        raise ConfigError("run_dir is required")


def load_type_definitions(path: str | Path) -> list[TypeDefinition]:
    """YAML or JSON mapping of TYPE -> description, in file order."""
    raw = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(raw)
    if not isinstance(data, dict) or not data:
        raise ConfigError(f"type definitions file {path} must map types to descriptions")
    try:
        return [TypeDefinition(EntityType(str(k)), str(v)) for k, v in data.items()]
    except DatasetError as exc:
        raise ConfigError(f"bad type definition in {path}: {exc}") from exc


def load_dataset(path: str, fmt: str) -> Dataset:
    return load_jsonl(path) if fmt == "jsonl" else load_conll(path)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def trace_filename(doc_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", doc_id)
    if safe != doc_id:
        safe = f"{safe}-{hashlib.sha256(doc_id.encode()).hexdigest()[:8]}"
    return f"{safe}.json"


def _build_backend(config: RunConfig):
    if config.backend_mode == "scripted":
        return ScriptedBackend(load_scripted_rules(config.rules))
    if config.backend_mode == "replay":
        return record_replay(config.session, mode="replay")
    http = HttpBackend(config.base_url, in_flight_cap=config.in_flight_cap)
    if config.backend_mode == "record":
        return record_replay(config.session, mode="record", inner=http)
    return http


def _build_retriever(config: RunConfig) -> tuple[CachedRetriever | None, SnapshotCache | None]:
    if not config.retrieval:
        return None, None
    cache_path = Path(config.snapshot)
    cache = SnapshotCache.load(cache_path) if cache_path.is_file() else SnapshotCache()
    client = None if config.offline else WikipediaClient()
    return CachedRetriever(cache, client=client, offline=config.offline), cache


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    dataset = load_dataset(config.dataset, config.dataset_format)
    type_defs = load_type_definitions(config.type_definitions)
    templates = load_templates(config.template or None)
    demos = load_demonstrations(config.support_set)
    if len(demos) > config.demos:
        demos = demos[: config.demos]
    elif len(demos) < config.demos:
        logger.warning(
            "support set has %d demonstrations, config asked for %d", len(demos), config.demos
        )
    if not config.negatives:
        demos = strip_negatives(demos)

    retriever, cache = _build_retriever(config)
    pipeline = Pipeline(
        backend=_build_backend(config),
        type_definitions=type_defs,
        demonstrations=demos,
        retriever=retriever,
        templates=templates,
        options=PipelineOptions(
            reflection=config.reflection,
            retrieval=config.retrieval,
            disambiguation=config.disambiguation,
            max_queries=config.max_queries,
            max_ambiguous=config.max_ambiguous,
        ),
        model_name=config.model or "scripted",
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
    )

    run_dir = Path(config.run_dir)
    traces_dir = run_dir / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.json"
    manifest = {
        "tool_version": __version__,
        "config": dataclasses.asdict(config),
        "config_hash": config_hash(config),
        "template_hash": templates.source_hash,
        "snapshot_hash": file_hash(config.snapshot)
        if config.snapshot and Path(config.snapshot).is_file()
        else "",
        "dataset_hash": file_hash(config.dataset),
    }
    if manifest_path.exists():
        existing = json.loads(manifest_path.read_text(encoding="utf-8"))
        if existing.get("config_hash") != manifest["config_hash"]:
            raise ConfigError(f"run directory {run_dir} was created with a different config")
    else:
        manifest_path.write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    attempted = failed = resumed = 0
    for doc in dataset.documents:
        trace_path = traces_dir / trace_filename(doc.id)
        if trace_path.exists():
            resumed += 1
            continue
        attempted += 1
        trace = pipeline.run(doc)
        if trace.failed:
            failed += 1
        write_trace(trace, trace_path)

    if cache is not None and not config.offline:
        cache.save(config.snapshot)

    labeled = all(doc.gold is not None for doc in dataset.documents)
    if labeled:
        traces = [read_trace(traces_dir / trace_filename(d.id)) for d in dataset.documents]
        scoreable = [t for t in traces if not t.failed]
        if scoreable:
            report = emit_report(traces, dataset, run_dir)
            print(format_report_table(report))
    else:
        print("dataset is unlabeled; skipping the evaluation report")

    print(
        f"run complete: {attempted} run, {resumed} resumed, {failed} failed "
        f"-> {run_dir}"
    )
    return EXIT_FAILURE if attempted > 0 and failed == attempted else EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / "manifest.json"
    traces_dir = run_dir / "traces"
    if not manifest_path.is_file() or not traces_dir.is_dir():
        raise ConfigError(f"{run_dir} is not a run directory (missing manifest or traces)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    config = RunConfig(**manifest["config"])
    if file_hash(config.dataset) != manifest["dataset_hash"]:
        raise ConfigError(f"dataset {config.dataset} changed since the run was recorded")
    dataset = load_dataset(config.dataset, config.dataset_format)
    trace_files = sorted(traces_dir.glob("*.json"))
    if not trace_files:
        raise ConfigError(f"no traces in {traces_dir}")
    traces = [read_trace(p) for p in trace_files]
    report = emit_report(traces, dataset, run_dir)
    print(format_report_table(report))
    return EXIT_OK


def cmd_build_demos(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset, args.dataset_format)
    if args.types:
        type_set = [d.entity_type for d in load_type_definitions(args.types)]
    else:
        type_set = list(dataset.type_set)
    count = args.count if args.count else default_support_size(type_set)
    demos = build_support_set(
        list(dataset.documents),
        type_set,
        seed=args.seed,
        count=count,
        include_negatives=args.negatives,
    )
    save_demonstrations(demos, args.out)
    print(f"wrote {len(demos)} demonstrations -> {args.out}")
    return EXIT_OK


def cmd_snapshot(args: argparse.Namespace) -> int:
    if args.offline:
        raise ConfigError("snapshot pre-fetch needs online mode")
    queries = [
        line.strip()
        for line in Path(args.queries).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]
    cache_path = Path(args.cache)
    cache = SnapshotCache.load(cache_path) if cache_path.is_file() else SnapshotCache()
    if args.cutoff:
        cache.cutoff = args.cutoff
    client = WikipediaClient(api_url=args.api_url)
    retriever = CachedRetriever(cache, client=client, offline=False)
    unresolved = []
    for query in queries:
        try:
            snippet = retriever.get(query)
        except TransportError as exc:
            unresolved.append(query)
            print(f"ERROR {query!r}: {exc}")
            continue
        print(f"{'HIT ' if snippet else 'MISS'} {query!r}")
    cache.save(cache_path)
    print(f"cached {len(cache.entries)} queries -> {cache_path}")
    return EXIT_FAILURE if unresolved else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kdrner",
        description="Knowledge-enriched, self-correcting in-context NER pipeline",
    )
    parser.add_argument("--version", action="version", version=f"kdrner {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline over a dataset")
    run.add_argument("--config", help="YAML config file; flags override its keys")
    run.add_argument("--dataset")
    run.add_argument("--dataset-format", dest="dataset_format", choices=["jsonl", "conll"])
    run.add_argument("--type-definitions", dest="type_definitions")
    run.add_argument("--support-set", dest="support_set")
    run.add_argument("--template")
    run.add_argument("--base-url", dest="base_url")
    run.add_argument("--model")
    run.add_argument("--temperature", type=float)
    run.add_argument("--max-output-tokens", dest="max_output_tokens", type=int)
    run.add_argument("--in-flight-cap", dest="in_flight_cap", type=int)
    run.add_argument(
        "--backend-mode", dest="backend_mode", choices=["http", "record", "replay", "scripted"]
    )
    run.add_argument("--session")
    run.add_argument("--rules")
    run.add_argument("--snapshot")
    run.add_argument("--offline", action=argparse.BooleanOptionalAction)
    run.add_argument("--reflection", action=argparse.BooleanOptionalAction)
    run.add_argument("--retrieval", action=argparse.BooleanOptionalAction)
    run.add_argument("--disambiguation", action=argparse.BooleanOptionalAction)
    run.add_argument("--negatives", action=argparse.BooleanOptionalAction)
    run.add_argument("--max-queries", dest="max_queries", type=int)
    run.add_argument("--max-ambiguous", dest="max_ambiguous", type=int)
    run.add_argument("--demos", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--run-dir", dest="run_dir")
    run.set_defaults(handler=cmd_run)

    ev = sub.add_parser("eval", help="re-score an existing run directory")
    ev.add_argument("--run-dir", dest="run_dir", required=True)
    ev.set_defaults(handler=cmd_eval)

    demos = sub.add_parser("build-demos", help="build a contrastive support set")
    demos.add_argument("--dataset", required=True)
    demos.add_argument(
        "--dataset-format", dest="dataset_format", choices=["jsonl", "conll"], default="jsonl"
    )
    demos.add_argument("--types", help="type definitions file; defaults to types seen in gold")
    demos.add_argument("--out", required=True)
    demos.add_argument("--seed", type=int, default=0)
    demos.add_argument("--count", type=int, help="defaults to 5, or 10 for >10 types")
    demos.add_argument(
        "--negatives", action=argparse.BooleanOptionalAction, default=True
    )
    demos.set_defaults(handler=cmd_build_demos)

    snap = sub.add_parser("snapshot", help="pre-fetch a retrieval snapshot cache")
    snap.add_argument("--queries", required=True, help="text file, one query per line")
    snap.add_argument("--cache", required=True)
    snap.add_argument("--cutoff", help="content cutoff date recorded in the cache metadata")
    snap.add_argument("--api-url", dest="api_url", default="https://en.wikipedia.org/w/api.php")
    snap.add_argument("--offline", action=argparse.BooleanOptionalAction, default=False)
    snap.set_defaults(handler=cmd_snapshot)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KdrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
