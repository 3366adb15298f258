"""Command-line entry points.

  ctiforge analyze <reports...> --config config.json --out out/
  ctiforge kb build --seed knowledge.jsonl --out store.bin
  ctiforge segment <report>

Exit codes: 0 success, 2 configuration error, 3 fixture miss in replay
mode, 4 provider failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, EmptyDocument, FixtureMiss, ProviderError
from .gateway import GatewaySettings, ModelGateway
from .ingest import load_report, segment_paragraphs
from .knowledge import build_store, load_seed_entries
from .pipeline import (
    EXIT_CONFIG,
    EXIT_FIXTURE_MISS,
    EXIT_OK,
    EXIT_PROVIDER,
    PipelineConfig,
    run_pipeline,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctiforge",
        description="Convert CTI reports into purified IOCs, validated regexes, "
        "a relationship graph, and SIEM rule drafts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="run the full pipeline over report files")
    analyze.add_argument("reports", nargs="+", help="report files (.txt, .md, .html)")
    analyze.add_argument("--config", help="JSON config file mirroring PipelineConfig")
    analyze.add_argument("--mode", choices=["live", "record", "replay"])
    analyze.add_argument("--out", help="artifact output directory")
    analyze.add_argument("--store", help="knowledge store file (store.bin)")
    analyze.add_argument("--fixtures", help="fixture directory for record/replay")
    analyze.add_argument("--runs", type=int, help="voting runs per paragraph")
    analyze.add_argument("--vote-threshold", type=int, help="votes required to retain")
    analyze.add_argument("--sim-threshold", type=float, help="cosine acceptance threshold")
    analyze.add_argument("--max-attempts", type=int, help="regex synthesis attempts")
    analyze.add_argument("--max-reidentify", type=int, help="edge re-identification rounds")
    analyze.add_argument("--concurrency", type=int, help="parallel worker count")
    analyze.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    kb = sub.add_parser("kb", help="knowledge store maintenance")
    kb_sub = kb.add_subparsers(dest="kb_command", required=True)
    kb_build = kb_sub.add_parser("build", help="embed a seed file into a store")
    kb_build.add_argument("--seed", required=True, help="line-delimited JSON seed file")
    kb_build.add_argument("--out", required=True, help="output store path")
    kb_build.add_argument("--mode", choices=["live", "record", "replay"], default="replay")
    kb_build.add_argument("--fixtures", help="fixture directory for record/replay")
    kb_build.add_argument("--embed-model", default="text-embedding-3-small")

    segment = sub.add_parser("segment", help="print paragraphs as JSON lines")
    segment.add_argument("report", help="report file")
    segment.add_argument("--target-sentences", type=int, default=4, choices=[3, 4])
    return parser


def _analyze_config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {
        "mode": args.mode,
        "out_dir": args.out,
        "store_path": args.store,
        "fixtures_dir": args.fixtures,
        "runs": args.runs,
        "vote_threshold": args.vote_threshold,
        "similarity_threshold": args.sim_threshold,
        "max_attempts": args.max_attempts,
        "max_reidentify": args.max_reidentify,
        "concurrency": args.concurrency,
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    if args.no_figures:
        config.render_figures = False
    return config


def _cmd_analyze(args) -> int:
    config = _analyze_config(args)
    code = run_pipeline(config, args.reports)
    if code == EXIT_OK:
        print(f"artifacts written to {config.out_dir}")
    else:
        print(f"pipeline failed with exit code {code}; see run_manifest.json", file=sys.stderr)
    return code


def _cmd_kb_build(args) -> int:
    entries = load_seed_entries(args.seed)
    gateway = ModelGateway(
        GatewaySettings(
            mode=args.mode,
            fixtures_dir=Path(args.fixtures) if args.fixtures else None,
            embed_model=args.embed_model,
        )
    )
    store = build_store(entries, gateway, out_path=args.out)
    print(f"built store with {len(store)} entries (dim={store.dim}) at {args.out}")
    return EXIT_OK


def _cmd_segment(args) -> int:
    report = load_report(args.report)
    for paragraph in segment_paragraphs(report, args.target_sentences):
        print(
            json.dumps(
                {
                    "report_id": paragraph.report_id,
                    "index": paragraph.index,
                    "text": paragraph.text,
                },
                ensure_ascii=False,
            )
        )
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "analyze":
            return _cmd_analyze(args)
        if args.command == "kb":
            return _cmd_kb_build(args)
        return _cmd_segment(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, EmptyDocument, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FixtureMiss as exc:
        print(f"fixture miss: {exc}", file=sys.stderr)
        return EXIT_FIXTURE_MISS
    except ProviderError as exc:
        print(f"provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER


if __name__ == "__main__":
    sys.exit(main())
