"""End-to-end orchestration: reports in, detection artifacts out.

Work parallelizes per paragraph (extraction, pair mining), per record
(regex synthesis), and per edge (verification); every merge point
collects results in input order, so artifact bytes never depend on the
concurrency width. Exit status reflects infrastructure health only,
never model content quality.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import graph as graphmod
from . import regexgen, relations, render
from .errors import ConfigError, FixtureMiss, ProviderError
from .extraction import (
    DEFAULT_RUNS,
    DEFAULT_VOTE_THRESHOLD,
    IocRecord,
    extract_candidates,
    kb_filter,
    majority_vote,
)
from .gateway import MODES, GatewaySettings, ModelGateway
from .ingest import Paragraph, load_report, segment_paragraphs
from .knowledge import DEFAULT_SIMILARITY_THRESHOLD, VectorStore

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FIXTURE_MISS = 3
EXIT_PROVIDER = 4

ARTIFACT_NAMES = (
    "iocs.json",
    "patterns.json",
    "edges.json",
    "graph.json",
    "graph.dot",
    "rules.json",
    "run_manifest.json",
    "graph.png",
    "summary.png",
)


@dataclass
class PipelineConfig:
    store_path: str | Path = "store.bin"
    out_dir: str | Path = "out"
    mode: str = "replay"
    fixtures_dir: str | Path | None = None
    runs: int = DEFAULT_RUNS
    vote_threshold: int = DEFAULT_VOTE_THRESHOLD
    similarity_threshold: float = DEFAULT_SIMILARITY_THRESHOLD
    max_attempts: int = regexgen.DEFAULT_MAX_ATTEMPTS
    max_reidentify: int = relations.DEFAULT_MAX_REIDENTIFY
    target_sentences: int = 4
    concurrency: int = 4
    rate_per_sec: float = 10.0
    max_inflight: int = 4
    model: str = "gpt-4"
    embed_model: str = "text-embedding-3-small"
    api_base: str | None = None
    embed_api_base: str | None = None
    api_key: str | None = None
    verb_map_path: str | Path | None = None
    alias_verbs_path: str | Path | None = None
    compat_matrix_path: str | Path | None = None
    rule_templates_path: str | Path | None = None
    render_figures: bool = True
    extra: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)} - {"extra"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not 1 <= self.vote_threshold <= self.runs:
            raise ConfigError(
                f"vote_threshold must be in [1, runs={self.runs}], got {self.vote_threshold}"
            )
        if not 0.0 < self.similarity_threshold <= 1.0:
            raise ConfigError("similarity_threshold must be in (0, 1]")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.max_reidentify < 0:
            raise ConfigError("max_reidentify must be >= 0")
        if self.target_sentences not in (3, 4):
            raise ConfigError("target_sentences must be 3 or 4")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.rate_per_sec <= 0:
            raise ConfigError("rate_per_sec must be > 0")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")
        if self.mode in ("replay", "record") and not self.fixtures_dir:
            raise ConfigError(f"{self.mode} mode requires fixtures_dir")
        if not Path(self.store_path).is_file():
            raise ConfigError(f"knowledge store not found: {self.store_path}")

    def snapshot(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("extra", None)
        data.pop("api_key", None)
        # Infrastructure knobs that cannot change artifact content stay
        # out of the manifest so equal inputs give equal output bytes.
        data.pop("concurrency", None)
        data.pop("rate_per_sec", None)
        data.pop("max_inflight", None)
        data.pop("out_dir", None)
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in data.items()}


def make_gateway(config: PipelineConfig) -> ModelGateway:
    return ModelGateway(
        GatewaySettings(
            mode=config.mode,
            fixtures_dir=Path(config.fixtures_dir) if config.fixtures_dir else None,
            model=config.model,
            embed_model=config.embed_model,
            api_base=config.api_base,
            embed_api_base=config.embed_api_base,
            api_key=config.api_key,
            rate_per_sec=config.rate_per_sec,
            max_inflight=config.max_inflight,
        )
    )


@dataclass
class _ParagraphResult:
    paragraph: Paragraph
    candidate_count: int
    records: list[IocRecord]
    pairs: list[relations.NounPair]
    diagnostics: list[str]


def _process_paragraph(
    paragraph: Paragraph, config: PipelineConfig, store: VectorStore, gateway: ModelGateway
) -> _ParagraphResult:
    diagnostics: list[str] = []
    candidates = extract_candidates(paragraph, config.runs, gateway, diagnostics)
    tallies = majority_vote(candidates, config.runs, config.vote_threshold)
    records = [
        kb_filter(tally, store, gateway, config.similarity_threshold) for tally in tallies
    ]
    pairs = relations.extract_pairs(paragraph, gateway, diagnostics)
    return _ParagraphResult(
        paragraph=paragraph,
        candidate_count=len(candidates),
        records=records,
        pairs=pairs,
        diagnostics=diagnostics,
    )


def _synthesize(
    record: IocRecord, config: PipelineConfig, store: VectorStore, gateway: ModelGateway
) -> regexgen.RegexPattern:
    if record.ioc_type in regexgen.LITERAL_TYPES:
        return regexgen.synthesize_literal(record)
    spans = regexgen.classify_spans(
        regexgen.split_ioc(record), store, gateway, config.similarity_threshold
    )
    return regexgen.synthesize_regex(record, spans, gateway, config.max_attempts)


def run_pipeline(config: PipelineConfig, report_paths: list) -> int:
    """Execute all stages and write artifacts; returns the exit code."""
    config.validate()
    if not report_paths:
        raise ConfigError("no report paths given")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        manifest = _run(config, report_paths, out_dir)
    except FixtureMiss as exc:
        _write_failure_manifest(config, out_dir, "FixtureMiss", str(exc))
        return EXIT_FIXTURE_MISS
    except ProviderError as exc:
        _write_failure_manifest(config, out_dir, "ProviderError", str(exc))
        return EXIT_PROVIDER
    _write_json(out_dir / "run_manifest.json", manifest)
    return EXIT_OK


def _run(config: PipelineConfig, report_paths: list, out_dir: Path) -> dict:
    store = VectorStore.load(config.store_path)
    gateway = make_gateway(config)
    verb_table = relations.load_verb_map(config.verb_map_path)
    alias_verbs = relations.load_alias_verbs(config.alias_verbs_path)
    matrix = relations.CompatibilityMatrix.from_file(config.compat_matrix_path)
    templates = graphmod.load_rule_templates(config.rule_templates_path)

    reports = [load_report(path) for path in report_paths]
    paragraphs: list[Paragraph] = []
    for report in reports:
        paragraphs.extend(segment_paragraphs(report, config.target_sentences))
    paragraph_text = {(p.report_id, p.index): p.text for p in paragraphs}

    diagnostics: list[str] = []
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        results = list(
            pool.map(lambda p: _process_paragraph(p, config, store, gateway), paragraphs)
        )

        records: list[IocRecord] = []
        candidate_count = 0
        for result in results:
            records.extend(result.records)
            candidate_count += result.candidate_count
            diagnostics.extend(result.diagnostics)
        kept_records = [r for r in records if r.status in ("retained", "adjusted")]

        patterns = list(
            pool.map(lambda r: _synthesize(r, config, store, gateway), kept_records)
        )

        by_report: dict[str, list[IocRecord]] = {}
        for record in kept_records:
            by_report.setdefault(record.paragraph_ref[0], []).append(record)
        edges: list[relations.RelationEdge] = []
        for result in results:
            report_records = by_report.get(result.paragraph.report_id, [])
            resolved = relations.resolve_pronouns(result.pairs, report_records, alias_verbs)
            kept_pairs = relations.filter_pairs(resolved, report_records, diagnostics)
            edges.extend(relations.build_edges(kept_pairs, verb_table, diagnostics))
        edges.sort(
            key=lambda e: (e.paragraph_ref, e.src.canonical, e.dst.canonical, e.category)
        )

        verified_edges = list(
            pool.map(
                lambda e: relations.verify_edge(
                    e,
                    matrix,
                    gateway,
                    paragraph_text[e.paragraph_ref],
                    verb_table,
                    config.max_reidentify,
                ),
                edges,
            )
        )
    demoted = sum(1 for e in verified_edges if not e.verified)
    for edge in verified_edges:
        if not edge.verified:
            diagnostics.append(
                f"edge {edge.src.canonical!r} -> {edge.dst.canonical!r} demoted to reference"
            )

    deduped = regexgen.dedup_patterns(patterns)
    relationship_graph = graphmod.build_graph(deduped, verified_edges)
    rules = graphmod.emit_rules(relationship_graph, templates)

    _write_json(out_dir / "iocs.json", [r.to_dict() for r in records])
    _write_json(out_dir / "patterns.json", [p.to_dict() for p in deduped])
    _write_json(out_dir / "edges.json", [e.to_dict() for e in verified_edges])
    (out_dir / "graph.json").write_bytes(graphmod.export_graph(relationship_graph, "json"))
    (out_dir / "graph.dot").write_bytes(graphmod.export_graph(relationship_graph, "dot"))
    _write_json(out_dir / "rules.json", [r.to_dict() for r in rules])

    counts = {
        "reports": len(reports),
        "paragraphs": len(paragraphs),
        "candidates": candidate_count,
        "voted": len(records),
        "retained": sum(1 for r in records if r.status == "retained"),
        "adjusted": sum(1 for r in records if r.status == "adjusted"),
        "rejected": sum(1 for r in records if r.status == "rejected"),
        "patterns_before_dedup": len(patterns),
        "patterns": len(deduped),
        "edges": len(verified_edges),
        "edges_demoted": demoted,
        "rules": len(rules),
    }
    if config.render_figures:
        render.render_graph_figure(relationship_graph, out_dir / "graph.png")
        render.render_summary_figure(counts, out_dir / "summary.png")
    return {
        "config": config.snapshot(),
        "reports": [
            {
                "report_id": report.source_id,
                "paragraphs": sum(1 for p in paragraphs if p.report_id == report.source_id),
            }
            for report in reports
        ],
        "counts": counts,
        "diagnostics": diagnostics,
    }


def _write_json(path: Path, payload) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _write_failure_manifest(config: PipelineConfig, out_dir: Path, kind: str, detail: str) -> None:
    _write_json(
        out_dir / "run_manifest.json",
        {"config": config.snapshot(), "error": {"type": kind, "detail": detail}},
    )
