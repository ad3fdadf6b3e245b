import random

import pytest

from udsaudit.access import (
    Access,
    AccessVerdict,
    DosRisk,
    classify_namespace,
    combine_verdict,
    dos_risk_for,
    eval_dac,
    eval_mac,
    eval_parent_traversal,
    evaluate_endpoint,
    grant_subsets,
    minimal_grants,
    normalize_permission,
    threat_model_credentials,
)
from udsaudit.binanalysis.records import (
    CheckStrength,
    ClassifiedCheck,
    Cred,
    ExtractedBind,
    NamespaceHint,
    PeerCredCheck,
    ReservedLookup,
    Usage,
    UsageKind,
)
from udsaudit.config import AnalysisSettings
from udsaudit.endpoint import Namespace, Provenance, SocketEndpoint
from udsaudit.errors import UnclassifiableAddress, UnknownPermission
from udsaudit.firmware import CredentialSet, FileKind, FsEntry
from udsaudit.initrc import RestartRisk

from tests.conftest import make_image

APP = 10123
INET, NET_BT, NET_BT_ADMIN, EXT_STORAGE = 3003, 3002, 3001, 1077
GRANTS = ("BLUETOOTH", "BLUETOOTH_ADMIN", "INTERNET", "MANAGE_EXTERNAL_STORAGE")
SOCKET_LABEL = "u:object_r:dnsproxyd_socket:s0"


def _entry(path="/dev/socket/dnsproxyd", mode=0o660, uid=0, gid=INET, label=SOCKET_LABEL):
    return FsEntry(path=path, mode=mode, uid=uid, gid=gid, selabel=label, kind=FileKind.SOCKET_FILE)


def _endpoint(namespace=Namespace.RESERVED, address="dnsproxyd", owner="netd", entry=None, **kw):
    if entry is None and namespace != Namespace.ABSTRACT:
        entry = _entry()
    return SocketEndpoint(
        address=address,
        namespace=namespace,
        owner_binary="/system/bin/netd",
        owner_domain=owner,
        file_entry=entry,
        provenance=kw.pop("provenance", Provenance.INITRC),
        **kw,
    )


def _reference_dac(mode, uid, gid, creds):
    if creds.uid == uid:
        return bool(mode & 0o200)
    if gid == creds.primary_gid or gid in creds.supplementary_gids:
        return bool(mode & 0o020)
    return bool(mode & 0o002)


# ---------------------------------------------------------------------------
# namespace classification


@pytest.mark.parametrize(
    "raw,namespace,address",
    [
        (b"\x00cand", Namespace.ABSTRACT, "@cand"),
        (b"\x00cand\x00\x00", Namespace.ABSTRACT, "@cand"),
        (b"/data/vendor/qcam/cam_socket", Namespace.FILESYSTEM, "/data/vendor/qcam/cam_socket"),
        (b"/dev/socket/qmux", Namespace.FILESYSTEM, "/dev/socket/qmux"),
    ],
)
def test_classify_raw_bytes(raw, namespace, address):
    classified = classify_namespace(raw)
    assert (classified.namespace, classified.address) == (namespace, address)


def test_filesystem_under_reserved_dir_is_flagged():
    assert classify_namespace(b"/dev/socket/qmux").reserved_dir
    assert not classify_namespace(b"/data/misc/qmux").reserved_dir


@pytest.mark.parametrize("raw", [b"", b"\x00", b"\x00\x00\x00", b"relative/sock"])
def test_unclassifiable(raw):
    with pytest.raises(UnclassifiableAddress):
        classify_namespace(raw)


def test_reserved_sources():
    assert classify_namespace(ReservedLookup(name="cnd", callsite=0x10)).namespace == Namespace.RESERVED
    listener = ExtractedBind(callsite=1, address_bytes=b"netd", namespace_hint=NamespaceHint.RESERVED_ENV)
    assert classify_namespace(listener) == (Namespace.RESERVED, "netd", True)


def test_abstract_iff_leading_zero():
    rng = random.Random(7)
    for _ in range(500):
        raw = bytes(rng.choice(b"\x00/ab.") for _ in range(rng.randint(1, 12)))
        try:
            classified = classify_namespace(raw)
        except UnclassifiableAddress:
            continue
        assert (classified.namespace == Namespace.ABSTRACT) == (raw[:1] == b"\x00")


# ---------------------------------------------------------------------------
# DAC


CRED_CASES = {
    "owner": (APP, 0),
    "primary_group": (0, APP),
    "supplementary_group": (0, INET),
    "other": (0, 0),
}


@pytest.mark.parametrize("case", sorted(CRED_CASES))
def test_dac_matches_reference_for_every_mode(case):
    creds = threat_model_credentials(["INTERNET"], APP)
    uid, gid = CRED_CASES[case]
    for mode in range(0o1000):
        entry = _entry(mode=mode, uid=uid, gid=gid)
        assert eval_dac(entry, creds) == _reference_dac(mode, uid, gid, creds), (case, oct(mode))


def test_owner_class_decides_even_when_other_allows():
    creds = threat_model_credentials((), APP)
    assert not eval_dac(_entry(mode=0o066, uid=APP, gid=0), creds)
    assert not eval_dac(_entry(mode=0o606, uid=1000, gid=APP), creds)


def test_search_bit():
    creds = threat_model_credentials((), APP)
    assert eval_dac(_entry(mode=0o711, uid=0, gid=0), creds, Access.SEARCH)
    assert not eval_dac(_entry(mode=0o770, uid=0, gid=0), creds, Access.SEARCH)


def test_threat_model_credentials():
    creds = threat_model_credentials(["android.permission.INTERNET", "BLUETOOTH"])

    assert creds.uid == APP and creds.primary_gid == APP
    assert creds.supplementary_gids == frozenset({INET, NET_BT})
    assert creds.all_gids == frozenset({APP, INET, NET_BT})


def test_unknown_permission():
    with pytest.raises(UnknownPermission):
        normalize_permission("android.permission.CAMERA")
    assert normalize_permission("android.permission.BLUETOOTH_ADMIN") == "BLUETOOTH_ADMIN"


def test_primary_gid_is_not_duplicated():
    creds = CredentialSet(uid=1, primary_gid=5, supplementary_gids=frozenset({5, 6}))
    assert creds.supplementary_gids == frozenset({6})


def test_parent_traversal():
    image = make_image(
        [
            ("/", 0o755, 0, 0, "u:object_r:rootfs:s0", "directory"),
            ("/data", 0o771, 1000, 1000, "u:object_r:system_data_file:s0", "directory"),
            ("/data/vendor", 0o770, 0, 0, "u:object_r:vendor_data_file:s0", "directory"),
        ]
    )
    creds = threat_model_credentials((), APP)
    assert eval_parent_traversal(image, "/data/sock", creds)
    assert not eval_parent_traversal(image, "/data/vendor/qcam/sock", creds)
    assert eval_parent_traversal(None, "/anything/sock", creds)


# ---------------------------------------------------------------------------
# grant subsets


def test_grant_subset_order():
    subsets = grant_subsets(GRANTS)

    assert len(subsets) == 16
    assert subsets[0] == ()
    assert subsets[1:5] == [(g,) for g in GRANTS]
    assert subsets[-1] == GRANTS
    assert [len(s) for s in subsets] == sorted(len(s) for s in subsets)


def test_minimal_grants_none_when_nothing_passes():
    assert minimal_grants(lambda subset: False, GRANTS) is None
    assert minimal_grants(lambda subset: True, GRANTS) == ()


def _random_entry(rng):
    ids = [0, 1000, APP, INET, NET_BT, NET_BT_ADMIN, EXT_STORAGE]
    return _entry(mode=rng.randrange(0o1000), uid=rng.choice(ids), gid=rng.choice(ids))


def _passes(entry, subset):
    return eval_dac(entry, threat_model_credentials(subset, APP))


def test_required_permissions_are_minimal(mini_graph):
    rng = random.Random(20190811)
    settings = AnalysisSettings()
    for _ in range(50):
        entry = _random_entry(rng)
        verdict = evaluate_endpoint(_endpoint(entry=entry), mini_graph, None, settings)
        passing = [s for s in grant_subsets(GRANTS) if _passes(entry, s)]

        assert verdict.accessible == bool(passing)
        if not passing:
            assert verdict.required_permissions == ()
            continue
        required = verdict.required_permissions
        assert _passes(entry, required)
        assert not any(_passes(entry, s) for s in grant_subsets(GRANTS) if len(s) < len(required))


def test_more_grants_never_revoke_access(mini_graph):
    rng = random.Random(3)
    for _ in range(50):
        endpoint = _endpoint(entry=_random_entry(rng))
        smaller = frozenset(rng.sample(GRANTS, rng.randint(0, 3)))
        larger = smaller | frozenset(rng.sample(GRANTS, rng.randint(1, 4)))
        before = evaluate_endpoint(endpoint, mini_graph, None, AnalysisSettings(perm_set=smaller))
        after = evaluate_endpoint(endpoint, mini_graph, None, AnalysisSettings(perm_set=larger))
        assert not before.accessible or after.accessible


def test_internet_grant_opens_inet_socket(mini_graph):
    verdict = evaluate_endpoint(_endpoint(), mini_graph, None, AnalysisSettings())

    assert verdict.mac_ipc_allowed and verdict.mac_file_allowed and verdict.dac_allowed
    assert verdict.accessible
    assert verdict.required_permissions == ("INTERNET",)


def test_no_grants_configured(mini_graph):
    verdict = evaluate_endpoint(_endpoint(), mini_graph, None, AnalysisSettings(perm_set=""))
    assert not verdict.accessible
    assert verdict.dac_allowed is False


# ---------------------------------------------------------------------------
# MAC and verdict shape


def test_eval_mac(mini_graph):
    assert eval_mac(mini_graph, "untrusted_app", _endpoint()) == (True, True)
    assert eval_mac(mini_graph, "untrusted_app", _endpoint(Namespace.ABSTRACT, "@cand", owner="cand")) == (True, None)
    # init owns nothing the app may connect to
    assert eval_mac(mini_graph, "untrusted_app", _endpoint(owner="init"))[0] is False
    camera = _entry(path="/data/vendor/qcam/cam_socket", label="u:object_r:camera_data_file:s0")
    endpoint = _endpoint(Namespace.FILESYSTEM, camera.path, owner="mm_qcamera_daemon", entry=camera)
    assert eval_mac(mini_graph, "untrusted_app", endpoint) == (True, False)


def test_combine_verdict():
    endpoint = _endpoint()
    verdict = combine_verdict(endpoint, (True, True), True, required_permissions=["INTERNET"])
    assert verdict.accessible and verdict.required_permissions == ("INTERNET",)

    denied = combine_verdict(endpoint, (True, False), True, required_permissions=["INTERNET"])
    assert not denied.accessible
    assert denied.required_permissions == ()

    abstract = combine_verdict(_endpoint(Namespace.ABSTRACT, "@x"), (True, True), True)
    assert abstract.accessible
    assert (abstract.mac_file_allowed, abstract.dac_allowed) == (None, None)


def test_unknown_owner_denies_ipc(mini_graph):
    verdict = evaluate_endpoint(_endpoint(owner=""), mini_graph)
    assert not verdict.mac_ipc_allowed
    assert not verdict.accessible


def test_unlabeled_file_denies_file_mac(mini_graph):
    entry = _entry(label="u:object_r:unlabeled:s0")
    verdict = evaluate_endpoint(_endpoint(entry=entry), mini_graph)
    assert verdict.mac_ipc_allowed
    assert verdict.mac_file_allowed is False
    assert not verdict.accessible


def test_missing_file_entry_is_not_accessible(mini_graph):
    endpoint = SocketEndpoint(address="fwmarkd", namespace=Namespace.RESERVED, owner_binary="/system/bin/netd",
                              owner_domain="netd", provenance=Provenance.BINARY_GETENV)
    verdict = evaluate_endpoint(endpoint, mini_graph)
    assert verdict.dac_allowed is False
    assert not verdict.accessible


def test_abstract_verdict_ignores_files(mini_graph):
    endpoint = _endpoint(Namespace.ABSTRACT, "@cand", owner="cand")
    verdict = evaluate_endpoint(endpoint, mini_graph)

    assert verdict.mac_file_allowed is None and verdict.dac_allowed is None
    assert verdict.accessible == verdict.mac_ipc_allowed is True
    assert verdict.required_permissions == ()
    # any image, any grants: same verdict
    image = make_image([("/", 0o700, 0, 0, "u:object_r:rootfs:s0", "directory")])
    assert evaluate_endpoint(endpoint, mini_graph, image, AnalysisSettings(perm_set="")) == verdict


def test_abstract_with_file_entry_is_rejected():
    with pytest.raises(ValueError):
        _endpoint(Namespace.ABSTRACT, "@x", entry=_entry())


def test_indeterminate_dac(mini_graph):
    entry = _entry(path="/data/vendor/qcam/cam_socket", mode=0o700, uid=1006, gid=1006,
                   label="u:object_r:camera_data_file:s0")
    endpoint = _endpoint(Namespace.FILESYSTEM, entry.path, owner="mm_qcamera_daemon", entry=entry,
                         dac_indeterminate=True, provenance=Provenance.BINARY_BIND)
    verdict = evaluate_endpoint(endpoint, mini_graph)

    assert verdict.indeterminate_dac
    assert verdict.dac_allowed is None
    assert not verdict.accessible


def test_verdict_rejects_access_without_prerequisites():
    with pytest.raises(ValueError):
        AccessVerdict(mac_ipc_allowed=False, accessible=True)
    with pytest.raises(ValueError):
        AccessVerdict(mac_ipc_allowed=True, mac_file_allowed=True, dac_allowed=False, accessible=True)
    assert AccessVerdict(mac_ipc_allowed=True, accessible=True).accessible


def test_auth_summary_takes_strongest_check(mini_graph):
    def classified(cred, kind, strength, **kw):
        usage = Usage(kind=kind, cred=cred, **kw)
        return ClassifiedCheck(check=PeerCredCheck(callsite=1, creds_used=frozenset({cred}), usages=(usage,)),
                               strength=strength)

    checks = (
        classified(Cred.PID, UsageKind.FUNCTION_ARG, CheckStrength.SPOOFABLE, callee="check_comm"),
        classified(Cred.UID, UsageKind.COMPARISON, CheckStrength.SECURE, comparand=1000),
    )
    verdict = evaluate_endpoint(_endpoint(checks=checks), mini_graph)
    assert verdict.auth_summary == CheckStrength.SECURE
    assert evaluate_endpoint(_endpoint(), mini_graph).auth_summary == CheckStrength.NONE


# ---------------------------------------------------------------------------
# DoS exposure


@pytest.mark.parametrize(
    "rebind,restart,expected",
    [
        (False, RestartRisk.NONE, DosRisk.NONE),
        (True, RestartRisk.NONE, DosRisk.CLOSE_REBIND),
        (False, RestartRisk.PROPERTY_RESTART, DosRisk.PROPERTY_RESTART),
        (True, RestartRisk.PROPERTY_RESTART, DosRisk.BOTH),
    ],
)
def test_dos_risk(rebind, restart, expected):
    endpoint = _endpoint(Namespace.ABSTRACT, "@cand", owner="cand", close_rebind=rebind)
    assert dos_risk_for(endpoint, restart) == expected


def test_dos_risk_only_for_abstract():
    endpoint = _endpoint(close_rebind=True)
    assert dos_risk_for(endpoint, RestartRisk.PROPERTY_RESTART) == DosRisk.NONE
