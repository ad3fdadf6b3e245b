import difflib
import json

import pytest

from udsaudit.access import DosRisk
from udsaudit.android_ids import IdResolver
from udsaudit.binanalysis.records import SYMBOLIC, BindPosition, CredModCall, CredModKind
from udsaudit.cli import EXIT_FATAL, EXIT_OK, EXIT_SKIPPED, main
from udsaudit.config import AnalysisSettings
from udsaudit.endpoint import Namespace, Provenance, SocketEndpoint
from udsaudit.pipeline import _Candidate, attach_socket_files, overlay_after_bind, run_pipeline

from tests import programs
from tests.conftest import GOLDEN_DIR, make_image
from tests.elf_builder import AARCH64, build_elf
from tests.mini_aosp import POLICY, build_mini_aosp


def _analyze(capsysbinary, *argv):
    code = main(["analyze", *map(str, argv)])
    return code, capsysbinary.readouterr().out


def _assert_matches_golden(output: bytes, name: str) -> None:
    expected = (GOLDEN_DIR / name).read_bytes()
    if output != expected:
        diff = difflib.unified_diff(
            expected.decode().splitlines(), output.decode().splitlines(), "expected", "actual", lineterm=""
        )
        pytest.fail("report differs from golden file:\n" + "\n".join(diff))


def test_mini_aosp_golden(mini_aosp, capsysbinary):
    code, out = _analyze(capsysbinary, mini_aosp, "--canonical")

    assert code == EXIT_SKIPPED
    _assert_matches_golden(out, "mini_aosp.json")


def test_canonical_runs_are_byte_identical(mini_aosp, capsysbinary):
    runs = [_analyze(capsysbinary, mini_aosp, "--canonical")[1] for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]


def test_worker_pool_matches_serial_run(mini_aosp, capsysbinary):
    _, serial = _analyze(capsysbinary, mini_aosp, "--canonical", "--jobs", "1")
    _, pooled = _analyze(capsysbinary, mini_aosp, "--canonical", "--jobs", "2")
    assert serial == pooled


def test_non_canonical_output_carries_timing(mini_aosp, capsysbinary):
    _, out = _analyze(capsysbinary, mini_aosp)
    timing = json.loads(out)["timing"]
    assert {"load", "policy", "binaries", "evaluate"} <= set(timing)


def test_clean_image_exits_zero(mini_aosp_no_adbd, capsysbinary):
    code, out = _analyze(capsysbinary, mini_aosp_no_adbd, "--canonical")

    assert code == EXIT_OK
    report = json.loads(out)
    assert report["skipped"] == []
    assert report["stats"]["endpoints"] == 6


def test_missing_policy_is_fatal(tmp_path, capsysbinary):
    image_dir = build_mini_aosp(tmp_path, policy="")
    code, out = _analyze(capsysbinary, image_dir)

    assert code == EXIT_FATAL
    assert out == b""


def test_malformed_manifest_is_fatal(mini_aosp, capsysbinary):
    manifest = mini_aosp / "manifest.tsv"
    manifest.write_text(manifest.read_text() + "/system/bin/broken\t0999\t0\t0\t-\tregular\n")

    assert _analyze(capsysbinary, mini_aosp)[0] == EXIT_FATAL


def test_strict_mode_rejects_malformed_policy(tmp_path, capsysbinary):
    image_dir = build_mini_aosp(tmp_path, policy=POLICY + "allow untrusted_app netd unix_stream_socket connectto;\n")

    assert _analyze(capsysbinary, image_dir, "--strict")[0] == EXIT_FATAL
    assert _analyze(capsysbinary, image_dir, "--canonical")[0] == EXIT_SKIPPED


def test_unknown_permission_is_fatal(mini_aosp, capsysbinary):
    assert _analyze(capsysbinary, mini_aosp, "--perm-set", "CAMERA")[0] == EXIT_FATAL


def test_perm_set_narrows_access(mini_aosp, capsysbinary):
    _, out = _analyze(capsysbinary, mini_aosp, "--canonical", "--perm-set", "BLUETOOTH")
    report = json.loads(out)

    accessible = [e["address"] for e in report["endpoints"] if e["verdict"]["accessible"]]
    assert accessible == ["@cand", "@fmhal"]


def test_table_format(mini_aosp, capsysbinary):
    code, out = _analyze(capsysbinary, mini_aosp, "--format", "table")
    lines = out.decode().splitlines()

    assert code == EXIT_SKIPPED
    assert lines[0].startswith("Address")
    assert any(line.startswith("@cand ") and "close_rebind (heuristic)" in line for line in lines)
    assert lines[-1] == "skipped: /sbin/adbd (SKIPPED_STATIC)"


def test_pipeline_endpoints(mini_aosp):
    report = run_pipeline(mini_aosp, AnalysisSettings(canonical=True))
    by_address = {r.endpoint.address: r for r in report.endpoints}

    assert [r.endpoint.sort_key for r in report.endpoints] == sorted(r.endpoint.sort_key for r in report.endpoints)
    fwmarkd = by_address["fwmarkd"]
    assert fwmarkd.endpoint.provenance == Provenance.BINARY_GETENV
    assert not fwmarkd.verdict.accessible

    cam = by_address["/data/vendor/qcam/cam_socket"]
    assert cam.endpoint.namespace == Namespace.FILESYSTEM
    assert cam.endpoint.file_entry.mode == 0o700
    assert cam.endpoint.file_entry.label_type == "camera_data_file"

    fmhal = by_address["@fmhal"]
    assert fmhal.verdict.dos_risk == DosRisk.PROPERTY_RESTART
    assert fmhal.verdict.auth_summary.value == "secure"


RIL_SOCKET = "/data/vendor/ril/ril_socket"


def _attach(*cred_mods):
    image = make_image(
        [
            ("/data/vendor/ril", 0o755, 1001, 1001, "u:object_r:ril_data_file:s0", "directory"),
            (RIL_SOCKET, 0o600, 1001, 1001, "u:object_r:ril_data_file:s0", "socket_file"),
        ]
    )
    endpoint = SocketEndpoint(
        address=RIL_SOCKET,
        namespace=Namespace.FILESYSTEM,
        owner_binary="/vendor/bin/rild",
        owner_domain="rild",
        provenance=Provenance.BINARY_BIND,
    )
    candidates = {endpoint.sort_key: _Candidate(endpoint, tuple(cred_mods))}
    image, endpoints = attach_socket_files(image, candidates, [], IdResolver(), AnalysisSettings())
    return image, endpoints[0]


def _after_bind(kind, *args, target=RIL_SOCKET, callsite=0x40):
    return CredModCall(kind=kind, args=args, position=BindPosition.AFTER_BIND, callsite=callsite, target=target)


def test_chmod_after_bind_overrides_existing_socket_file():
    image, endpoint = _attach(_after_bind(CredModKind.CHMOD, 0o666))

    assert endpoint.file_entry.mode == 0o666
    assert image.get(RIL_SOCKET).mode == 0o666
    assert endpoint.file_entry.label_type == "ril_data_file"
    assert not endpoint.dac_indeterminate


def test_chown_after_bind_overrides_existing_owner():
    _, endpoint = _attach(
        _after_bind(CredModKind.CHMOD, 0o660, callsite=0x40),
        _after_bind(CredModKind.FCHOWN, 0xFFFFFFFF, 3003, target=3, callsite=0x50),
    )

    entry = endpoint.file_entry
    assert (entry.mode, entry.uid, entry.gid) == (0o660, 1001, 3003)


def test_symbolic_chmod_on_existing_socket_file_is_indeterminate():
    image, endpoint = _attach(_after_bind(CredModKind.CHMOD, SYMBOLIC))

    assert endpoint.dac_indeterminate
    assert image.get(RIL_SOCKET).mode == 0o600


def test_umask_leaves_existing_socket_file_alone():
    umask = CredModCall(kind=CredModKind.UMASK, args=(0o000,), position=BindPosition.BEFORE_BIND, callsite=0x10)
    image, endpoint = _attach(umask)

    assert endpoint.file_entry.mode == 0o600
    assert overlay_after_bind(image.get(RIL_SOCKET), [umask]) is image.get(RIL_SOCKET)


def test_binary_without_sockets_does_not_change_exit_code(mini_aosp_no_adbd, capsysbinary):
    camera = mini_aosp_no_adbd / "rootfs" / "vendor" / "bin" / "mm-qcamera-daemon"
    camera.write_bytes(build_elf(programs.idle_daemon(AARCH64)))

    code, out = _analyze(capsysbinary, mini_aosp_no_adbd, "--canonical")
    report = json.loads(out)

    assert code == EXIT_OK
    assert report["skipped"] == [{"binary": "/vendor/bin/mm-qcamera-daemon", "reason": "NO_SOCKETS_FOUND"}]
