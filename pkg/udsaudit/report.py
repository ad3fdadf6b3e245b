"""Report records, JSON/table rendering and schema validation."""

import json
import logging
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Tuple

import jsonschema
from pydantic import BaseModel, ConfigDict, Field, model_validator

from udsaudit.access import AccessVerdict, DosRisk
from udsaudit.binanalysis.analyzer import SkipReason
from udsaudit.endpoint import SocketEndpoint

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
SCHEMA_PATH = Path(__file__).parent / "schema" / "report_v1.json"

TABLE_COLUMNS = ("Address", "Namespace", "Daemon", "Auth Checks", "Accessible", "Required Perms", "DoS Risk")


class ReportFormat(str, Enum):
    JSON = "json"
    TABLE = "table"


class SkippedBinary(BaseModel):
    model_config = ConfigDict(frozen=True)

    binary: str
    reason: SkipReason


class ReportStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    rules_parsed: int = 0
    unknown_statements: int = 0
    skipped_malformed: int = 0
    services: int = 0
    binaries_analyzed: int = 0
    binaries_skipped: int = 0
    endpoints: int = 0
    accessible: int = 0


class EndpointResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    endpoint: SocketEndpoint
    verdict: AccessVerdict


class Report(BaseModel):
    model_config = ConfigDict(frozen=True)

    report_version: int = REPORT_VERSION
    image: str
    endpoints: Tuple[EndpointResult, ...] = ()
    skipped: Tuple[SkippedBinary, ...] = ()
    stats: ReportStats = Field(default_factory=ReportStats)
    timing: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _sorted(self):
        keys = [r.endpoint.sort_key for r in self.endpoints]
        if keys != sorted(keys):
            raise ValueError("endpoints must be sorted by (owner_binary, address)")
        if len(set(keys)) != len(keys):
            raise ValueError("endpoints must be unique per (owner_binary, address)")
        return self

    @property
    def analysis_skipped(self) -> bool:
        """Whether a binary could not be analyzed; finding no socket in one does not count."""
        return any(s.reason != SkipReason.NO_SOCKETS_FOUND for s in self.skipped)


# ----------------------------------------------------------------------------
# JSON
# ----------------------------------------------------------------------------


def _check_rows(endpoint: SocketEndpoint) -> List[Dict[str, Any]]:
    rows = []
    for classified in endpoint.checks:
        for usage in classified.check.usages:
            rows.append(
                {
                    "creds": [usage.cred.value],
                    "usage": usage.kind.value,
                    "comparand": usage.comparand,
                    "callee": usage.callee,
                    "strength": classified.strength.value,
                }
            )
    return rows


def _verdict_payload(verdict: AccessVerdict) -> Dict[str, Any]:
    return {
        "mac_ipc": verdict.mac_ipc_allowed,
        "mac_file": verdict.mac_file_allowed,
        "dac": verdict.dac_allowed,
        "required_permissions": list(verdict.required_permissions),
        "auth_summary": verdict.auth_summary.value,
        "accessible": verdict.accessible,
        "dos_risk": verdict.dos_risk.value,
        "indeterminate_dac": verdict.indeterminate_dac,
    }


def report_payload(report: Report, canonical: bool = False) -> Dict[str, Any]:
    return {
        "report_version": report.report_version,
        "image": report.image,
        "stats": report.stats.model_dump(),
        "endpoints": [
            {
                "address": r.endpoint.address,
                "namespace": r.endpoint.namespace.value,
                "daemon_binary": r.endpoint.owner_binary,
                "daemon_domain": r.endpoint.owner_domain,
                "provenance": r.endpoint.provenance.value,
                "checks": _check_rows(r.endpoint),
                "verdict": _verdict_payload(r.verdict),
            }
            for r in report.endpoints
        ],
        "skipped": [{"binary": s.binary, "reason": s.reason.value} for s in report.skipped],
        "timing": {} if canonical else {k: round(v, 6) for k, v in report.timing.items()},
    }


@lru_cache()
def load_schema() -> Dict[str, Any]:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def validate_report(payload: Dict[str, Any]) -> None:
    """Raise ``jsonschema.ValidationError`` when ``payload`` breaks the report contract."""
    jsonschema.validate(instance=payload, schema=load_schema())


# ----------------------------------------------------------------------------
# Table
# ----------------------------------------------------------------------------


def _dos_cell(risk: DosRisk) -> str:
    if risk in (DosRisk.CLOSE_REBIND, DosRisk.BOTH):
        return f"{risk.value} (heuristic)"
    return risk.value


def _table_rows(report: Report) -> List[Tuple[str, ...]]:
    rows = []
    for r in report.endpoints:
        verdict = r.verdict
        rows.append(
            (
                r.endpoint.address,
                r.endpoint.namespace.value,
                r.endpoint.owner_binary,
                verdict.auth_summary.value,
                "yes" if verdict.accessible else ("indeterminate" if verdict.indeterminate_dac else "no"),
                ",".join(verdict.required_permissions) or "-",
                _dos_cell(verdict.dos_risk),
            )
        )
    return rows


def render_table(report: Report) -> str:
    rows = _table_rows(report)
    widths = [max([len(TABLE_COLUMNS[i])] + [len(row[i]) for row in rows]) for i in range(len(TABLE_COLUMNS))]

    def line(cells) -> str:
        return " | ".join(cell.ljust(width) for cell, width in zip(cells, widths)).rstrip()

    out = [line(TABLE_COLUMNS), "-+-".join("-" * w for w in widths)]
    out.extend(line(row) for row in rows)
    if report.skipped:
        out.append("")
        out.extend(f"skipped: {s.binary} ({s.reason.value})" for s in report.skipped)
    return "\n".join(out) + "\n"


def emit_report(report: Report, fmt: str = ReportFormat.JSON, canonical: bool = False, validate: bool = True) -> bytes:
    fmt = ReportFormat(fmt)
    if fmt == ReportFormat.TABLE:
        return render_table(report).encode("utf-8")
    payload = report_payload(report, canonical=canonical)
    if validate:
        validate_report(payload)
    logger.debug(f"report_emitted format=json endpoints={len(payload['endpoints'])} canonical={canonical}")
    return (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8")
