"""Android init RC parsing and boot-time filesystem simulation."""

import logging
import posixpath
import shlex
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

from pydantic import BaseModel, ConfigDict, field_validator

from udsaudit.android_ids import IdResolver
from udsaudit.endpoint import Namespace, Provenance, SocketEndpoint, reserved_socket_path
from udsaudit.firmware import (
    FileKind,
    FirmwareImage,
    FsEntry,
    insert_entry,
    label_or_default,
    label_type,
    normalize_path,
    relabel,
    resolve_unset_labels,
)

logger = logging.getLogger(__name__)

DEFAULT_DIR_MODE = 0o755


class SockType(str, Enum):
    STREAM = "stream"
    DGRAM = "dgram"
    SEQPACKET = "seqpacket"


class SocketOption(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    sock_type: SockType
    perm: int
    user: Optional[str] = None
    group: Optional[str] = None
    seclabel: Optional[str] = None

    @field_validator("name")
    @classmethod
    def _name_nonempty(cls, value: str) -> str:
        if not value:
            raise ValueError("socket name is empty")
        return value

    @field_validator("perm")
    @classmethod
    def _perm_range(cls, value: int) -> int:
        if not 0 <= value <= 0o777:
            raise ValueError(f"socket perm out of range: {value:o}")
        return value


class TriggerAction(str, Enum):
    START = "start"
    STOP = "stop"
    RESTART = "restart"


class PropertyTrigger(BaseModel):
    model_config = ConfigDict(frozen=True)

    property: str
    value: str
    action: TriggerAction
    service: str
    origin: str = ""
    line: int = 0


class FsActionKind(str, Enum):
    MKDIR = "mkdir"
    CHMOD = "chmod"
    CHOWN = "chown"
    RESTORECON = "restorecon"


class FsAction(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: FsActionKind
    path: str
    mode: Optional[int] = None
    owner: Optional[str] = None
    group: Optional[str] = None
    origin: str = ""
    line: int = 0


class ServiceDefinition(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    exec_path: str
    args: Tuple[str, ...] = ()
    user: Optional[str] = None
    group: Optional[str] = None
    supplementary_groups: Tuple[str, ...] = ()
    classes: Tuple[str, ...] = ("default",)
    oneshot: bool = False
    disabled: bool = False
    seclabel: Optional[str] = None
    sockets: Tuple[SocketOption, ...] = ()
    triggers: Tuple[PropertyTrigger, ...] = ()
    origin: str = ""

    @field_validator("exec_path")
    @classmethod
    def _absolute(cls, value: str) -> str:
        if not value.startswith("/"):
            raise ValueError(f"exec path is not absolute: {value}")
        return posixpath.normpath(value)

    @property
    def domain(self) -> Optional[str]:
        return label_type(self.seclabel)


class RestartRisk(str, Enum):
    NONE = "none"
    PROPERTY_RESTART = "property_restart"


class InitRcTree(NamedTuple):
    services: List[ServiceDefinition]
    triggers: List[PropertyTrigger]
    fs_actions: List[FsAction]


# ----------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------

_SECTION_KEYWORDS = ("service", "on", "import")
_CAPTURED_OPTIONS = ("socket", "user", "group", "seclabel", "oneshot", "disabled", "class")


def _logical_lines(text: str) -> List[Tuple[int, List[str]]]:
    """Tokenized lines with backslash continuations joined and comments dropped."""
    lines: List[Tuple[int, List[str]]] = []
    pending = ""
    start = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not pending:
            start = lineno
        if stripped.endswith("\\"):
            pending += stripped[:-1] + " "
            continue
        joined = (pending + stripped).strip()
        pending = ""
        if not joined or joined.startswith("#"):
            continue
        try:
            tokens = shlex.split(joined, comments=True)
        except ValueError:
            tokens = joined.split()
        if tokens:
            lines.append((start, tokens))
    if pending.strip():
        lines.append((start, pending.split()))
    return lines


def _parse_mode(text: str) -> Optional[int]:
    try:
        return int(text, 8)
    except ValueError:
        return None


def _parse_socket(args: List[str]) -> Optional[SocketOption]:
    if len(args) < 3:
        return None
    sock_type = args[1].split("+", 1)[0]
    perm = _parse_mode(args[2])
    if perm is None or sock_type not in SockType._value2member_map_:
        return None
    try:
        return SocketOption(
            name=args[0],
            sock_type=SockType(sock_type),
            perm=perm,
            user=args[3] if len(args) > 3 else None,
            group=args[4] if len(args) > 4 else None,
            seclabel=args[5] if len(args) > 5 else None,
        )
    except ValueError:
        return None


def _property_conditions(trigger_tokens: List[str]) -> List[Tuple[str, str]]:
    conditions = []
    for token in trigger_tokens:
        if not token.startswith("property:"):
            continue
        name, _, value = token[len("property:"):].partition("=")
        if name:
            conditions.append((name, value or "*"))
    return conditions


def _fs_action(tokens: List[str], origin: str, line: int) -> Optional[FsAction]:
    command, args = tokens[0], tokens[1:]
    if command == "mkdir" and args:
        return FsAction(
            kind=FsActionKind.MKDIR,
            path=args[0],
            mode=_parse_mode(args[1]) if len(args) > 1 else None,
            owner=args[2] if len(args) > 2 else None,
            group=args[3] if len(args) > 3 else None,
            origin=origin,
            line=line,
        )
    if command == "chmod" and len(args) >= 2:
        mode = _parse_mode(args[0])
        if mode is None:
            return None
        return FsAction(kind=FsActionKind.CHMOD, path=args[-1], mode=mode, origin=origin, line=line)
    if command == "chown" and len(args) >= 2:
        owner = args[0]
        group = args[1] if len(args) >= 3 else None
        return FsAction(kind=FsActionKind.CHOWN, path=args[-1], owner=owner, group=group, origin=origin, line=line)
    if command in ("restorecon", "restorecon_recursive") and args:
        paths = [a for a in args if not a.startswith("--")]
        if paths:
            return FsAction(kind=FsActionKind.RESTORECON, path=paths[0], origin=origin, line=line)
    return None


def parse_initrc(text: str, origin: str = "") -> Tuple[List[ServiceDefinition], List[PropertyTrigger], List[FsAction]]:
    """Parse one RC file; unknown options and commands are counted, never fatal."""
    services: List[ServiceDefinition] = []
    triggers: List[PropertyTrigger] = []
    fs_actions: List[FsAction] = []
    unknown = 0

    current: Optional[Dict] = None
    conditions: Optional[List[Tuple[str, str]]] = None

    def close_service():
        nonlocal current
        if current is None:
            return
        try:
            services.append(ServiceDefinition(**current))
        except ValueError as e:
            logger.warning(f"service_skipped origin={origin} name={current.get('name')} reason={e}")
        current = None

    for line, tokens in _logical_lines(text):
        keyword = tokens[0]
        if keyword in _SECTION_KEYWORDS:
            close_service()
            conditions = None
            if keyword == "service":
                if len(tokens) < 3:
                    logger.warning(f"service_malformed origin={origin} line={line}")
                    continue
                current = {"name": tokens[1], "exec_path": tokens[2], "args": tuple(tokens[3:]),
                           "origin": origin, "sockets": ()}
            elif keyword == "on":
                conditions = _property_conditions([t for t in tokens[1:] if t != "&&"])
            continue

        if current is not None:
            args = tokens[1:]
            if keyword == "socket":
                option = _parse_socket(args)
                if option is None:
                    unknown += 1
                    logger.warning(f"socket_option_malformed origin={origin} line={line}")
                elif any(s.name == option.name for s in current["sockets"]):
                    logger.warning(f"socket_option_duplicate service={current['name']} name={option.name}")
                else:
                    current["sockets"] = current["sockets"] + (option,)
            elif keyword == "user" and args:
                current["user"] = args[0]
            elif keyword == "group" and args:
                current["group"] = args[0]
                current["supplementary_groups"] = tuple(args[1:])
            elif keyword == "seclabel" and args:
                current["seclabel"] = args[0]
            elif keyword == "oneshot":
                current["oneshot"] = True
            elif keyword == "disabled":
                current["disabled"] = True
            elif keyword == "class" and args:
                current["classes"] = tuple(args)
            else:
                unknown += 1
            continue

        if conditions is None:
            unknown += 1
            continue
        if keyword in TriggerAction._value2member_map_ and len(tokens) >= 2:
            for prop, value in conditions:
                triggers.append(PropertyTrigger(property=prop, value=value, action=TriggerAction(keyword),
                                                service=tokens[1], origin=origin, line=line))
            continue
        action = _fs_action(tokens, origin, line)
        if action is not None:
            fs_actions.append(action)

    close_service()
    logger.debug(
        f"initrc_parsed origin={origin} services={len(services)} triggers={len(triggers)} "
        f"fs_actions={len(fs_actions)} unknown={unknown}"
    )
    return services, triggers, fs_actions


def _imports(text: str) -> List[str]:
    return [tokens[1] for _, tokens in _logical_lines(text) if tokens[0] == "import" and len(tokens) > 1]


def parse_initrc_tree(sources: Sequence[Tuple[str, str]], entry: str = "/init.rc") -> InitRcTree:
    """Parse every RC source and merge them in path order, then line order.

    Imports are walked from ``entry`` only to report files nothing imports;
    they resolve against the image root and property-expanded imports
    (``${...}``) are skipped. The first declaration of a service wins.
    """
    by_path = {path: text for path, text in sources}
    order = sorted(by_path)
    visited: Set[str] = set()

    def visit(path: str):
        if path in visited or path not in by_path:
            return
        visited.add(path)
        for target in _imports(by_path[path]):
            if "${" in target:
                logger.debug(f"import_unresolved origin={path} target={target}")
                continue
            target = posixpath.normpath("/" + target.lstrip("/"))
            if target in by_path:
                visit(target)
            else:
                for candidate in sorted(p for p in by_path if posixpath.dirname(p) == target):
                    visit(candidate)

    visit(entry)
    for path in order:
        if path not in visited:
            logger.debug(f"initrc_not_imported path={path}")

    services: Dict[str, ServiceDefinition] = {}
    triggers: List[PropertyTrigger] = []
    fs_actions: List[FsAction] = []
    for path in order:
        file_services, file_triggers, file_actions = parse_initrc(by_path[path], origin=path)
        for service in file_services:
            if service.name in services:
                logger.warning(f"service_redefined name={service.name} origin={path}")
                continue
            services[service.name] = service
        triggers.extend(file_triggers)
        fs_actions.extend(file_actions)

    for trigger in triggers:
        if trigger.service not in services:
            logger.warning(f"trigger_dangling service={trigger.service} property={trigger.property}")

    attached = []
    for service in services.values():
        own = tuple(t for t in triggers if t.service == service.name)
        attached.append(service.model_copy(update={"triggers": own}) if own else service)

    logger.info(f"initrc_tree_parsed files={len(order)} services={len(attached)} triggers={len(triggers)}")
    return InitRcTree(attached, triggers, fs_actions)


# ----------------------------------------------------------------------------
# Endpoints and boot simulation
# ----------------------------------------------------------------------------


def socket_file_entry(option: SocketOption, resolver: IdResolver) -> FsEntry:
    return FsEntry(
        path=reserved_socket_path(option.name),
        mode=option.perm,
        uid=resolver.uid(option.user),
        gid=resolver.gid(option.group),
        selabel=option.seclabel,
        kind=FileKind.SOCKET_FILE,
    )


def extract_reserved_sockets(service: ServiceDefinition,
                             resolver: Optional[IdResolver] = None) -> List[SocketEndpoint]:
    resolver = resolver or IdResolver()
    return [
        SocketEndpoint(
            address=option.name,
            namespace=Namespace.RESERVED,
            owner_binary=service.exec_path,
            owner_domain=service.domain or "",
            file_entry=socket_file_entry(option, resolver),
            provenance=Provenance.INITRC,
            service=service.name,
            reserved_dir=True,
        )
        for option in service.sockets
    ]


def _apply_fs_action(image: FirmwareImage, action: FsAction, resolver: IdResolver) -> FirmwareImage:
    if not action.path.startswith("/"):
        return image
    path = normalize_path(action.path)
    existing = image.get(path)

    if action.kind == FsActionKind.RESTORECON:
        return relabel(image, path)

    if action.kind == FsActionKind.MKDIR and existing is None:
        entry = FsEntry(
            path=path,
            mode=action.mode if action.mode is not None else DEFAULT_DIR_MODE,
            uid=resolver.uid(action.owner),
            gid=resolver.gid(action.group),
            kind=FileKind.DIRECTORY,
        )
        return insert_entry(image, entry)

    if existing is None:
        logger.debug(f"fs_action_no_target kind={action.kind.value} path={path}")
        return image

    update = {}
    if action.mode is not None:
        update["mode"] = action.mode
    if action.owner is not None:
        update["uid"] = resolver.uid(action.owner, default=existing.uid)
    if action.group is not None:
        update["gid"] = resolver.gid(action.group, default=existing.gid)
    if not update:
        return image
    changed = existing.model_copy(update=update)
    if changed == existing:
        return image
    return insert_entry(image, changed, overwrite=True)


def simulate_boot(image: FirmwareImage, services: Sequence[ServiceDefinition], fs_actions: Sequence[FsAction],
                  resolver: Optional[IdResolver] = None) -> FirmwareImage:
    """Apply RC filesystem commands, then create socket files of enabled services."""
    resolver = resolver or IdResolver(image.passwd_source, image.group_source)

    for action in fs_actions:
        image = _apply_fs_action(image, action, resolver)

    created: Dict[str, str] = {}
    for service in services:
        if service.disabled:
            continue
        for option in service.sockets:
            entry = socket_file_entry(option, resolver)
            owner = created.get(entry.path)
            if owner is not None:
                logger.warning(f"socket_conflict path={entry.path} kept={owner} dropped={service.name}")
                continue
            created[entry.path] = service.name
            if entry.selabel is None:
                entry = entry.model_copy(update={"selabel": label_or_default(image, entry.path, entry.kind)})
            if image.get(entry.path) == entry:
                continue
            image = insert_entry(image, entry, overwrite=True)

    image = resolve_unset_labels(image)
    logger.info(f"boot_simulated sockets={len(created)} fs_actions={len(fs_actions)}")
    return image


def restart_risk(service: ServiceDefinition, triggers: Sequence[PropertyTrigger]) -> RestartRisk:
    targeted = [t for t in list(triggers) + list(service.triggers) if t.service == service.name]
    if any(t.action in (TriggerAction.STOP, TriggerAction.RESTART) for t in targeted):
        return RestartRisk.PROPERTY_RESTART
    if service.disabled and any(t.action == TriggerAction.START for t in targeted):
        return RestartRisk.PROPERTY_RESTART
    return RestartRisk.NONE
