"""Accessibility verdicts for socket endpoints under the untrusted-app threat model."""

import logging
from enum import Enum
from itertools import combinations
from typing import Callable, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, model_validator

from udsaudit.android_ids import ANDROID_IDS
from udsaudit.binanalysis.extract import summarize_strength
from udsaudit.binanalysis.records import CheckStrength, ClassifiedCheck, ExtractedBind, NamespaceHint, ReservedLookup
from udsaudit.config import AnalysisSettings, get_settings
from udsaudit.endpoint import RESERVED_SOCKET_DIR, Namespace, SocketEndpoint
from udsaudit.errors import UnclassifiableAddress, UnknownPermission
from udsaudit.firmware import CredentialSet, FirmwareImage, FsEntry
from udsaudit.initrc import RestartRisk, SocketOption
from udsaudit.sepolicy import UNKNOWN_OWNER, ClassCategory, DataflowGraph, PolicyObject

logger = logging.getLogger(__name__)

PERMISSION_PREFIX = "android.permission."

PERMISSION_GROUPS = {
    "INTERNET": "inet",
    "BLUETOOTH": "net_bt",
    "BLUETOOTH_ADMIN": "net_bt_admin",
    "MANAGE_EXTERNAL_STORAGE": "external_storage",
}


class Access(str, Enum):
    READ = "read"
    WRITE = "write"
    SEARCH = "search"


_ACCESS_BIT = {Access.READ: 0o4, Access.WRITE: 0o2, Access.SEARCH: 0o1}


class DosRisk(str, Enum):
    NONE = "none"
    CLOSE_REBIND = "close_rebind"
    PROPERTY_RESTART = "property_restart"
    BOTH = "both"


class ClassifiedAddress(NamedTuple):
    namespace: Namespace
    address: str
    reserved_dir: bool = False


class AccessVerdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    mac_ipc_allowed: bool
    mac_file_allowed: Optional[bool] = None
    dac_allowed: Optional[bool] = None
    required_permissions: Tuple[str, ...] = ()
    auth_summary: CheckStrength = CheckStrength.NONE
    accessible: bool
    dos_risk: DosRisk = DosRisk.NONE
    indeterminate_dac: bool = False

    @model_validator(mode="after")
    def _accessible_needs_prerequisites(self):
        if self.accessible and not self.mac_ipc_allowed:
            raise ValueError("accessible endpoints need the IPC permission")
        if self.accessible and self.mac_file_allowed is not None and not (self.mac_file_allowed and self.dac_allowed):
            raise ValueError("accessible file-backed endpoints need file MAC and DAC")
        return self


# ----------------------------------------------------------------------------
# Namespace classification
# ----------------------------------------------------------------------------


def _display(raw: bytes) -> str:
    return raw.decode("utf-8", "backslashreplace")


def _filesystem(path: str) -> ClassifiedAddress:
    return ClassifiedAddress(Namespace.FILESYSTEM, path, path.startswith(RESERVED_SOCKET_DIR + "/"))


def classify_namespace(raw: Union[ExtractedBind, SocketOption, ReservedLookup, bytes]) -> ClassifiedAddress:
    if isinstance(raw, (SocketOption, ReservedLookup)):
        return ClassifiedAddress(Namespace.RESERVED, raw.name, True)
    if isinstance(raw, ExtractedBind):
        if raw.namespace_hint == NamespaceHint.RESERVED_ENV and raw.address_bytes:
            return ClassifiedAddress(Namespace.RESERVED, _display(raw.address_bytes), True)
        data = raw.address_bytes
    else:
        data = raw
    if data[:1] == b"\x00" and len(data.rstrip(b"\x00")) > 0:
        return ClassifiedAddress(Namespace.ABSTRACT, "@" + _display(data[1:].rstrip(b"\x00")))
    if data[:1] == b"/":
        return _filesystem(_display(data))
    raise UnclassifiableAddress(f"cannot classify socket address {data!r}")


# ----------------------------------------------------------------------------
# Credentials and DAC
# ----------------------------------------------------------------------------


def normalize_permission(name: str) -> str:
    short = name.strip().removeprefix(PERMISSION_PREFIX)
    if short not in PERMISSION_GROUPS:
        raise UnknownPermission(name)
    return short


def threat_model_credentials(grants: Iterable[str] = (), uid: Optional[int] = None) -> CredentialSet:
    """Credentials of an untrusted app holding ``grants``; its primary gid equals its uid."""
    uid = get_settings().untrusted_app_uid if uid is None else uid
    gids = frozenset(ANDROID_IDS[PERMISSION_GROUPS[normalize_permission(g)]] for g in grants)
    return CredentialSet(uid=uid, primary_gid=uid, supplementary_gids=gids)


def eval_dac(entry: FsEntry, creds: CredentialSet, access: Access = Access.WRITE) -> bool:
    """Owner, then group, then other: the first class that matches decides."""
    bit = _ACCESS_BIT[access]
    if creds.uid == entry.uid:
        return bool(entry.mode & (bit << 6))
    if entry.gid in creds.all_gids:
        return bool(entry.mode & (bit << 3))
    return bool(entry.mode & bit)


def _parents(path: str) -> List[str]:
    parts = path.strip("/").split("/")[:-1]
    return ["/"] + ["/" + "/".join(parts[:i]) for i in range(1, len(parts) + 1)]


def eval_parent_traversal(image: Optional[FirmwareImage], path: str, creds: CredentialSet, warn: bool = True) -> bool:
    """Search permission on every ancestor present in the manifest."""
    if image is None:
        return True
    missing = []
    for parent in _parents(path):
        entry = image.get(parent)
        if entry is None:
            missing.append(parent)
            continue
        if not eval_dac(entry, creds, Access.SEARCH):
            logger.debug(f"parent_not_searchable path={path} parent={parent}")
            return False
    if warn and missing and missing != ["/"]:
        logger.warning(f"parent_missing path={path} assumed_traversable={','.join(missing)}")
    return True


# ----------------------------------------------------------------------------
# MAC
# ----------------------------------------------------------------------------


def owned_ipc_objects(graph: DataflowGraph, domain: str) -> List[PolicyObject]:
    return sorted(obj for obj, owners in graph.ipc_owner.items() if domain in owners)


def eval_mac(graph: DataflowGraph, subject: str, endpoint: SocketEndpoint) -> Tuple[bool, Optional[bool]]:
    """(IPC write to the owner's socket, write to the socket file); the latter is None for ABSTRACT."""
    if not endpoint.owner_domain or endpoint.owner_domain == UNKNOWN_OWNER:
        logger.warning(f"mac_owner_unknown address={endpoint.address} binary={endpoint.owner_binary}")
        ipc = False
    else:
        ipc = any(graph.can_write(subject, obj) for obj in owned_ipc_objects(graph, endpoint.owner_domain))

    if endpoint.namespace == Namespace.ABSTRACT:
        return ipc, None
    entry = endpoint.file_entry
    if entry is None or not entry.label_type:
        logger.warning(f"mac_file_unlabeled address={endpoint.address}")
        return ipc, False
    return ipc, graph.can_write(subject, PolicyObject(entry.label_type, ClassCategory.FILE))


# ----------------------------------------------------------------------------
# Verdicts
# ----------------------------------------------------------------------------


def grant_subsets(grants: Iterable[str]) -> List[Tuple[str, ...]]:
    """Every subset of ``grants``, smallest first, lexical within a size."""
    ordered = sorted(set(grants))
    return [combo for size in range(len(ordered) + 1) for combo in combinations(ordered, size)]


def minimal_grants(passes: Callable[[Tuple[str, ...]], bool], grants: Iterable[str]) -> Optional[Tuple[str, ...]]:
    for subset in grant_subsets(grants):
        if passes(subset):
            return subset
    return None


def dos_risk_for(endpoint: SocketEndpoint, restart: RestartRisk = RestartRisk.NONE) -> DosRisk:
    if endpoint.namespace != Namespace.ABSTRACT:
        return DosRisk.NONE
    rebind = endpoint.close_rebind
    restarts = restart == RestartRisk.PROPERTY_RESTART
    if rebind and restarts:
        return DosRisk.BOTH
    if rebind:
        return DosRisk.CLOSE_REBIND
    if restarts:
        return DosRisk.PROPERTY_RESTART
    return DosRisk.NONE


def combine_verdict(
    endpoint: SocketEndpoint,
    mac: Tuple[bool, Optional[bool]],
    dac: Optional[bool],
    checks: Sequence[ClassifiedCheck] = (),
    dos_risk: DosRisk = DosRisk.NONE,
    required_permissions: Optional[Iterable[str]] = None,
) -> AccessVerdict:
    mac_ipc, mac_file = mac
    if endpoint.namespace == Namespace.ABSTRACT:
        mac_file, dac = None, None
        accessible = mac_ipc
    else:
        accessible = bool(mac_ipc and mac_file and dac)
    return AccessVerdict(
        mac_ipc_allowed=mac_ipc,
        mac_file_allowed=mac_file,
        dac_allowed=dac,
        required_permissions=tuple(sorted(required_permissions or ())) if accessible else (),
        auth_summary=summarize_strength(checks),
        accessible=accessible,
        dos_risk=dos_risk,
        indeterminate_dac=endpoint.dac_indeterminate and endpoint.namespace != Namespace.ABSTRACT,
    )


def evaluate_endpoint(
    endpoint: SocketEndpoint,
    graph: DataflowGraph,
    image: Optional[FirmwareImage] = None,
    settings: Optional[AnalysisSettings] = None,
    restart: RestartRisk = RestartRisk.NONE,
) -> AccessVerdict:
    """Verdict for ``endpoint`` when the app may request any subset of the configured grants."""
    settings = settings or get_settings()
    grants = sorted(settings.perm_set)
    mac = eval_mac(graph, settings.subject, endpoint)
    dos = dos_risk_for(endpoint, restart)

    if endpoint.namespace == Namespace.ABSTRACT:
        return combine_verdict(endpoint, mac, None, endpoint.checks, dos, ())
    if endpoint.dac_indeterminate:
        return combine_verdict(endpoint, mac, None, endpoint.checks, dos)

    entry = endpoint.file_entry
    if entry is None:
        logger.warning(f"dac_no_file_entry address={endpoint.address}")
        return combine_verdict(endpoint, mac, False, endpoint.checks, dos)

    def dac_passes(subset: Tuple[str, ...]) -> bool:
        creds = threat_model_credentials(subset, settings.untrusted_app_uid)
        return eval_dac(entry, creds) and eval_parent_traversal(image, entry.path, creds, warn=False)

    eval_parent_traversal(image, entry.path, threat_model_credentials((), settings.untrusted_app_uid))
    required = minimal_grants(dac_passes, grants)
    return combine_verdict(endpoint, mac, required is not None, endpoint.checks, dos, required)


def permission_set(names: Iterable[str]) -> FrozenSet[str]:
    return frozenset(normalize_permission(n) for n in names)

