import json

import jsonschema
import pytest

from udsaudit.access import AccessVerdict, DosRisk
from udsaudit.binanalysis.analyzer import SkipReason
from udsaudit.binanalysis.records import CheckStrength, ClassifiedCheck, Cred, PeerCredCheck, Usage, UsageKind
from udsaudit.endpoint import Namespace, Provenance, SocketEndpoint
from udsaudit.report import (
    TABLE_COLUMNS,
    EndpointResult,
    Report,
    ReportStats,
    SkippedBinary,
    emit_report,
    render_table,
    report_payload,
    validate_report,
)


def _result(address, owner="/system/bin/cand", accessible=True, dos=DosRisk.NONE, checks=()):
    endpoint = SocketEndpoint(
        address=address,
        namespace=Namespace.ABSTRACT,
        owner_binary=owner,
        owner_domain="cand",
        provenance=Provenance.BINARY_BIND,
        checks=checks,
        close_rebind=dos in (DosRisk.CLOSE_REBIND, DosRisk.BOTH),
    )
    verdict = AccessVerdict(mac_ipc_allowed=accessible, accessible=accessible, dos_risk=dos,
                            auth_summary=CheckStrength.SECURE if checks else CheckStrength.NONE)
    return EndpointResult(endpoint=endpoint, verdict=verdict)


def _uid_check():
    usage = Usage(kind=UsageKind.COMPARISON, cred=Cred.UID, address=0x2040, comparand=1000)
    check = PeerCredCheck(callsite=0x2030, creds_used=frozenset({Cred.UID}), usages=(usage,))
    return ClassifiedCheck(check=check, strength=CheckStrength.SECURE)


def _report(**kw):
    results = (_result("@cand", dos=DosRisk.CLOSE_REBIND), _result("@cand.ctrl", checks=(_uid_check(),)))
    defaults = dict(
        image="mini",
        endpoints=results,
        stats=ReportStats(endpoints=2, accessible=2, binaries_analyzed=1),
        timing={"load": 0.0123456789},
    )
    defaults.update(kw)
    return Report(**defaults)


def test_payload_validates():
    payload = report_payload(_report())

    validate_report(payload)
    assert payload["report_version"] == 1
    assert [e["address"] for e in payload["endpoints"]] == ["@cand", "@cand.ctrl"]
    assert payload["timing"] == {"load": 0.012346}


def test_check_rows():
    payload = report_payload(_report())
    assert payload["endpoints"][1]["checks"] == [
        {"creds": ["UID"], "usage": "comparison", "comparand": 1000, "callee": None, "strength": "secure"}
    ]
    assert payload["endpoints"][1]["verdict"]["auth_summary"] == "secure"


def test_canonical_output_drops_timing():
    out = emit_report(_report(), canonical=True)

    payload = json.loads(out)
    assert payload["timing"] == {}
    assert out == (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode()


def test_schema_rejects_bad_namespace():
    payload = report_payload(_report())
    payload["endpoints"][0]["namespace"] = "NETWORK"
    with pytest.raises(jsonschema.ValidationError):
        validate_report(payload)


def test_schema_rejects_missing_verdict_field():
    payload = report_payload(_report())
    del payload["endpoints"][0]["verdict"]["accessible"]
    with pytest.raises(jsonschema.ValidationError):
        validate_report(payload)


def test_endpoints_must_be_sorted_and_unique():
    first, second = _result("@a"), _result("@b")
    with pytest.raises(ValueError):
        Report(image="x", endpoints=(second, first))
    with pytest.raises(ValueError):
        Report(image="x", endpoints=(first, first))
    # same address from two daemons is two endpoints
    Report(image="x", endpoints=(first, _result("@a", owner="/system/bin/other")))


def test_table_rows():
    report = _report(skipped=(SkippedBinary(binary="/sbin/adbd", reason=SkipReason.SKIPPED_STATIC),))
    lines = render_table(report).splitlines()

    assert lines[0].split(" | ")[0].strip() == TABLE_COLUMNS[0]
    assert [c.strip() for c in lines[2].split(" | ")] == [
        "@cand", "ABSTRACT", "/system/bin/cand", "none", "yes", "-", "close_rebind (heuristic)",
    ]
    assert [c.strip() for c in lines[3].split(" | ")][3] == "secure"
    assert lines[-1] == "skipped: /sbin/adbd (SKIPPED_STATIC)"


def test_empty_table_has_header_only():
    lines = render_table(Report(image="empty")).splitlines()

    assert len(lines) == 2
    assert [c.strip() for c in lines[0].split(" | ")] == list(TABLE_COLUMNS)


def test_property_restart_is_not_heuristic():
    report = Report(image="x", endpoints=(_result("@fmhal", dos=DosRisk.PROPERTY_RESTART),))
    assert "property_restart" in render_table(report)
    assert "heuristic" not in render_table(report)


def test_table_format_skips_schema():
    out = emit_report(_report(), fmt="table")
    assert out.decode().startswith("Address")


@pytest.mark.parametrize(
    "reasons, expected",
    [
        ((), False),
        ((SkipReason.NO_SOCKETS_FOUND,), False),
        ((SkipReason.NO_SOCKETS_FOUND, SkipReason.SKIPPED_STATIC), True),
        ((SkipReason.MALFORMED_ELF,), True),
    ],
)
def test_only_unanalyzed_binaries_count_as_skipped(reasons, expected):
    skipped = tuple(SkippedBinary(binary=f"/system/bin/d{i}", reason=r) for i, r in enumerate(reasons))
    assert Report(image="img", skipped=skipped).analysis_skipped is expected
