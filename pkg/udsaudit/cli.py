"""Command-line entry point: ``analyze <image_dir>``."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from udsaudit.access import permission_set
from udsaudit.config import DEFAULT_GETENV_APIS, AnalysisSettings, get_settings, load_settings, read_symbol_list
from udsaudit.errors import UdsAuditError
from udsaudit.pipeline import run_pipeline
from udsaudit.report import ReportFormat, emit_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_SKIPPED = 2


def configure_logging(level: int = logging.INFO) -> None:
    # stderr keeps stdout free for report bytes
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="udsaudit",
        description="Find Unix domain sockets an untrusted Android app can connect to",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="Analyze an extracted firmware image")
    analyze.add_argument("image_dir", type=Path, help="Directory holding manifest.tsv and the extracted tree")
    analyze.add_argument("--format", choices=[f.value for f in ReportFormat], default=ReportFormat.JSON.value)
    analyze.add_argument("--strict", action="store_true", help="Fail on malformed policy statements or missing RC files")
    analyze.add_argument("--perm-set", default=None, help="Comma-separated grants, e.g. INTERNET,BLUETOOTH")
    analyze.add_argument("--hops", type=int, default=None, help="Write-query depth (default: 1; deeper chaining is experimental)")
    analyze.add_argument("--jobs", type=int, default=None, help="Worker processes for binary analysis")
    analyze.add_argument("--bind-api-list", type=Path, default=None, help="File with one bind/getenv API symbol per line")
    analyze.add_argument("--canonical", action="store_true", help="Omit timing so output is byte-stable")
    analyze.add_argument("--config", type=Path, default=None, help="JSON settings override file")
    return parser


def settings_from_args(args: argparse.Namespace) -> AnalysisSettings:
    settings = load_settings(args.config) if args.config else get_settings()
    update = {}
    if args.strict:
        update["strict"] = True
    if args.canonical:
        update["canonical"] = True
    if args.perm_set is not None:
        update["perm_set"] = permission_set(p for p in args.perm_set.split(",") if p.strip())
    if args.hops is not None:
        update["hops"] = args.hops
    if args.jobs is not None:
        update["jobs"] = args.jobs
    if args.bind_api_list is not None:
        symbols = read_symbol_list(args.bind_api_list)
        update["getenv_apis"] = tuple(s for s in symbols if s in DEFAULT_GETENV_APIS)
        update["bind_apis"] = tuple(s for s in symbols if s not in DEFAULT_GETENV_APIS)
    return AnalysisSettings.model_validate({**settings.model_dump(), **update})


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO)

    try:
        settings = settings_from_args(args)
        report = run_pipeline(args.image_dir, settings)
        output = emit_report(report, args.format, canonical=settings.canonical)
    except (UdsAuditError, OSError, ValueError) as e:
        logger.error(f"analysis_failed error={e}")
        return EXIT_FATAL

    sys.stdout.buffer.write(output)
    sys.stdout.flush()
    return EXIT_SKIPPED if report.analysis_skipped else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
