"""Socket-relevant facts recovered from a binary's call sites."""

import logging
import re
from typing import Dict, Iterable, List, NamedTuple, Optional, Set

import networkx as nx

from udsaudit.binanalysis.cfg import Cfg, CallSite
from udsaudit.binanalysis.dataflow import CallFacts, function_facts, read_string
from udsaudit.binanalysis.elf import BinaryImage
from udsaudit.binanalysis.records import (
    AFTER_BIND_KINDS,
    BEFORE_BIND_KINDS,
    STRENGTH_ORDER,
    SYMBOLIC,
    UNDEFINED,
    ArgValue,
    BindPosition,
    CheckStrength,
    ClassifiedCheck,
    Confidence,
    Cred,
    CredModCall,
    CredModKind,
    ExtractedBind,
    NamespaceHint,
    PeerCredCheck,
    ReservedLookup,
    Usage,
    UsageKind,
)
from udsaudit.binanalysis.values import TOP, Const, RetVal, Taint, Value, location
from udsaudit.config import DEFAULT_BIND_APIS, DEFAULT_GETENV_APIS, get_settings

logger = logging.getLogger(__name__)

AF_UNIX = 1
SUN_PATH_MAX = 108
ANDROID_SOCKET_ENV_PREFIX = b"ANDROID_SOCKET_"

# ANDROID_SOCKET_NAMESPACE_* from cutils/sockets.h
_ANDROID_NAMESPACES = {0: NamespaceHint.ABSTRACT, 1: NamespaceHint.RESERVED_ENV, 2: NamespaceHint.FILESYSTEM}

_MANGLED_NAME = re.compile(r"^_ZN(\d+)")
_PROC_NAME_FILES = (b"comm", b"cmdline", b"status")


class BindApi(NamedTuple):
    name_arg: int
    namespace_arg: Optional[int] = None
    fixed_hint: Optional[NamespaceHint] = None
    sockaddr: bool = False
    len_arg: Optional[int] = None
    fd_arg: Optional[int] = None


BIND_APIS: Dict[str, BindApi] = {
    "bind": BindApi(name_arg=1, sockaddr=True, len_arg=2, fd_arg=0),
    "socket_local_server": BindApi(name_arg=0, namespace_arg=1),
    "socket_local_server_bind": BindApi(name_arg=1, namespace_arg=2, fd_arg=0),
    # this is the C++ object in x0/rdi; the name is the first real argument
    "FrameworkListener": BindApi(name_arg=1, fixed_hint=NamespaceHint.RESERVED_ENV),
    "SocketListener": BindApi(name_arg=1, fixed_hint=NamespaceHint.RESERVED_ENV),
}

CRED_MOD_SYMBOLS = {kind.value: kind for kind in CredModKind}


class CallsiteMatch(NamedTuple):
    callsite: int
    function: int
    symbol: str


def canonical_symbol(symbol: Optional[str], wanted: Iterable[str]) -> Optional[str]:
    """The API name ``symbol`` refers to, resolving mangled C++ string constructors."""
    if not symbol:
        return None
    wanted = set(wanted)
    if symbol in wanted:
        return symbol
    m = _MANGLED_NAME.match(symbol)
    if m is None:
        return None
    size = int(m.group(1))
    name = symbol[m.end():m.end() + size]
    rest = symbol[m.end() + size:]
    if name in wanted and rest[:3] in ("C1E", "C2E") and rest[3:].startswith("PKc"):
        return name
    return None


def find_callsites(cfg: Cfg, symbols: Iterable[str]) -> List[CallsiteMatch]:
    wanted = set(symbols)
    found = []
    for site in cfg.callsites.values():
        name = canonical_symbol(site.symbol, wanted)
        if name is not None:
            found.append(CallsiteMatch(site.address, site.function, name))
    return sorted(found)


def _facts_at(cfg: Cfg, match: CallsiteMatch) -> Optional[CallFacts]:
    return function_facts(cfg, match.function).calls.get(match.callsite)


def _hint_for(data: bytes) -> NamespaceHint:
    if data[:1] == b"\x00":
        return NamespaceHint.ABSTRACT
    if data[:1] == b"/":
        return NamespaceHint.FILESYSTEM
    return NamespaceHint.UNKNOWN


def _confidence(data: bytes, complete: bool) -> Confidence:
    if complete and data:
        return Confidence.EXACT
    return Confidence.PARTIAL if data else Confidence.SYMBOLIC


def _from_sockaddr(cfg: Cfg, match: CallsiteMatch, call: CallFacts, api: BindApi) -> Optional[ExtractedBind]:
    state = call.state
    loc = location(call.args[api.name_arg])
    if loc is None:
        return ExtractedBind(callsite=match.callsite, function=match.function, api=match.symbol)
    region, offset = loc
    family = state.mem.load(region, offset, 2, cfg.image)
    if isinstance(family, Const) and family.value != AF_UNIX:
        logger.debug(f"bind_not_unix callsite=0x{match.callsite:x} family={family.value}")
        return None
    path = offset + 2
    first = state.mem.byte_at(region, path, cfg.image)
    if first is None:
        return ExtractedBind(callsite=match.callsite, function=match.function, api=match.symbol)
    if first == 0:
        addrlen = call.args[api.len_arg] if api.len_arg is not None else TOP
        if isinstance(addrlen, Const) and 2 < addrlen.value <= 2 + SUN_PATH_MAX:
            raw = state.mem.read_bytes(region, path, addrlen.value - 2, cfg.image)
            known = []
            for byte in raw:
                if byte is None:
                    break
                known.append(byte)
            data, complete = bytes(known), len(known) == len(raw)
        else:
            name, complete = state.mem.read_cstring(region, path + 1, cfg.image, SUN_PATH_MAX - 1)
            data = b"\x00" + name
        return ExtractedBind(
            callsite=match.callsite,
            function=match.function,
            address_bytes=data,
            namespace_hint=NamespaceHint.ABSTRACT,
            api=match.symbol,
            confidence=Confidence.EXACT if complete and len(data) > 1 else Confidence.PARTIAL,
        )
    data, complete = state.mem.read_cstring(region, path, cfg.image, SUN_PATH_MAX)
    return ExtractedBind(
        callsite=match.callsite,
        function=match.function,
        address_bytes=data,
        namespace_hint=_hint_for(data),
        api=match.symbol,
        confidence=_confidence(data, complete),
    )


def _from_wrapper(cfg: Cfg, match: CallsiteMatch, call: CallFacts, api: BindApi) -> ExtractedBind:
    name, complete = read_string(cfg.image, call.state, call.args[api.name_arg])
    hint = api.fixed_hint
    if hint is None:
        ns = call.args[api.namespace_arg]
        hint = _ANDROID_NAMESPACES.get(ns.value, NamespaceHint.UNKNOWN) if isinstance(ns, Const) else NamespaceHint.UNKNOWN
    if hint == NamespaceHint.ABSTRACT:
        data = b"\x00" + name
        confidence = Confidence.EXACT if complete and name else Confidence.PARTIAL
    else:
        data = name
        if hint != NamespaceHint.RESERVED_ENV or data[:1] == b"\x00":
            hint = _hint_for(data)
        confidence = _confidence(data, complete)
    return ExtractedBind(
        callsite=match.callsite,
        function=match.function,
        address_bytes=data,
        namespace_hint=hint,
        api=match.symbol,
        confidence=confidence,
    )


def extract_bind_addresses(
    cfg: Cfg, binary: Optional[BinaryImage] = None, apis: Optional[Iterable[str]] = None
) -> List[ExtractedBind]:
    """One record per bind-like call site, reached or not by the dataflow."""
    apis = tuple(apis) if apis is not None else get_settings().bind_apis or DEFAULT_BIND_APIS
    binds = []
    for match in find_callsites(cfg, apis):
        api = BIND_APIS.get(match.symbol)
        call = _facts_at(cfg, match)
        if api is None:
            # user-supplied wrapper with an unknown prototype: assume sockaddr in the second slot
            api = BindApi(name_arg=1, sockaddr=True, len_arg=2, fd_arg=0)
        if call is None:
            bind = ExtractedBind(callsite=match.callsite, function=match.function, api=match.symbol)
        elif api.sockaddr:
            bind = _from_sockaddr(cfg, match, call, api)
        else:
            bind = _from_wrapper(cfg, match, call, api)
        if bind is not None and call is not None and call.state.degraded and bind.confidence == Confidence.EXACT:
            # a callee on the way here was not analyzed
            logger.debug(f"bind_confidence_degraded callsite=0x{match.callsite:x}")
            bind = bind.model_copy(update={"confidence": Confidence.PARTIAL})
        if bind is not None:
            binds.append(bind)
    logger.debug(f"binds_extracted path={cfg.image.path} count={len(binds)}")
    return binds


def extract_reserved_getenv(
    cfg: Cfg, binary: Optional[BinaryImage] = None, apis: Optional[Iterable[str]] = None
) -> List[ReservedLookup]:
    apis = tuple(apis) if apis is not None else get_settings().getenv_apis or DEFAULT_GETENV_APIS
    found = []
    for match in find_callsites(cfg, apis):
        call = _facts_at(cfg, match)
        if call is None:
            continue
        text, complete = read_string(cfg.image, call.state, call.args[0])
        if not complete or not text:
            continue
        if match.symbol == "getenv":
            if not text.startswith(ANDROID_SOCKET_ENV_PREFIX) or len(text) == len(ANDROID_SOCKET_ENV_PREFIX):
                continue
            text = text[len(ANDROID_SOCKET_ENV_PREFIX):]
        found.append(ReservedLookup(name=text.decode("utf-8", "replace"), callsite=match.callsite, api=match.symbol))
    return found


# ---------------------------------------------------------------------------
# credential changes around a bind


def _dominators(cfg: Cfg, entry: int) -> Dict[int, int]:
    key = ("idom", entry)
    idom = cfg.facts.get(key)
    if idom is None:
        func = cfg.functions[entry]
        idom = nx.immediate_dominators(func.graph, func.entry)
        cfg.facts[key] = idom
    return idom


def dominates(cfg: Cfg, entry: int, a: int, b: int) -> bool:
    """Whether instruction ``a`` dominates instruction ``b`` inside function ``entry``."""
    func = cfg.functions[entry]
    block_a, block_b = func.block_of(a), func.block_of(b)
    if block_a is None or block_b is None:
        return False
    if block_a == block_b:
        return a <= b
    idom = _dominators(cfg, entry)
    node = block_b
    while node in idom and idom[node] != node:
        node = idom[node]
        if node == block_a:
            return True
    return False


def _int_arg(value: Value) -> ArgValue:
    return value.value & 0xFFFFFFFF if isinstance(value, Const) else SYMBOLIC


def _path_arg(cfg: Cfg, call: CallFacts, value: Value) -> ArgValue:
    text, complete = read_string(cfg.image, call.state, value)
    return text.decode("utf-8", "replace") if complete and text else SYMBOLIC


def _cred_mod(cfg: Cfg, kind: CredModKind, call: CallFacts, position: BindPosition) -> CredModCall:
    a = call.args
    target = None
    if kind in (CredModKind.UMASK, CredModKind.SETEUID, CredModKind.SETEGID):
        args = (_int_arg(a[0]),)
    elif kind == CredModKind.CHMOD:
        target, args = _path_arg(cfg, call, a[0]), (_int_arg(a[1]),)
    elif kind == CredModKind.FCHMOD:
        target, args = _int_arg(a[0]), (_int_arg(a[1]),)
    elif kind == CredModKind.CHOWN:
        target, args = _path_arg(cfg, call, a[0]), (_int_arg(a[1]), _int_arg(a[2]))
    else:
        target, args = _int_arg(a[0]), (_int_arg(a[1]), _int_arg(a[2]))
    return CredModCall(kind=kind, args=args, position=position, callsite=call.site.address, target=target)


def extract_cred_mods(cfg: Cfg, bind_callsite: int) -> List[CredModCall]:
    """umask/seteuid/setegid dominating the bind and chmod/chown the bind dominates."""
    site = cfg.callsites[bind_callsite]
    facts = function_facts(cfg, site.function)
    mods = []
    for address in sorted(facts.calls):
        call = facts.calls[address]
        kind = CRED_MOD_SYMBOLS.get(call.site.symbol or "")
        if kind is None:
            continue
        if kind in BEFORE_BIND_KINDS and dominates(cfg, site.function, address, bind_callsite):
            mods.append(_cred_mod(cfg, kind, call, BindPosition.BEFORE_BIND))
        elif kind in AFTER_BIND_KINDS and dominates(cfg, site.function, bind_callsite, address):
            mods.append(_cred_mod(cfg, kind, call, BindPosition.AFTER_BIND))
    return mods


# ---------------------------------------------------------------------------
# peer credential checks


def _comparand(value: Value) -> ArgValue:
    return value.value & 0xFFFFFFFF if isinstance(value, Const) else UNDEFINED


def extract_peer_checks(cfg: Cfg, binary: Optional[BinaryImage] = None) -> List[PeerCredCheck]:
    checks = []
    nonconstant = 0
    for match in find_callsites(cfg, ("getsockopt",)):
        facts = function_facts(cfg, match.function)
        call = facts.calls.get(match.callsite)
        if call is None:
            continue
        optname = call.args[2]
        if not isinstance(optname, Const):
            nonconstant += 1
            continue
        if optname.value != 0x11:
            continue

        usages: Set[Usage] = set()
        for address, left, right in facts.compares:
            for tainted, other in ((left, right), (right, left)):
                if isinstance(tainted, Taint) and tainted.source == match.callsite:
                    usages.add(Usage(kind=UsageKind.COMPARISON, cred=tainted.cred, address=address,
                                     comparand=_comparand(other)))
        for address, callee_call in facts.calls.items():
            for arg in callee_call.args:
                if isinstance(arg, Taint) and arg.source == match.callsite:
                    usages.add(Usage(kind=UsageKind.FUNCTION_ARG, cred=arg.cred, address=address,
                                     callee=callee_call.site.callee))
        if not usages:
            logger.debug(f"peercred_unused callsite=0x{match.callsite:x}")
            continue
        ordered = tuple(sorted(usages, key=lambda u: (u.address, u.kind.value, u.cred.value, str(u.comparand))))
        checks.append(PeerCredCheck(callsite=match.callsite, creds_used=frozenset(u.cred for u in ordered),
                                    usages=ordered))
    if nonconstant:
        logger.info(f"getsockopt_nonconstant_optname path={cfg.image.path} count={nonconstant}")
    return checks


def _function_named(cfg: Cfg, callee: str) -> Optional[int]:
    if callee.startswith("0x"):
        address = int(callee, 16)
    else:
        address = cfg.image.functions.get(callee)
    return address if address in cfg.functions else None


def _reads_process_name(cfg: Cfg, entry: int) -> bool:
    facts = function_facts(cfg, entry)
    for call in facts.calls.values():
        for arg in call.args:
            text, _ = read_string(cfg.image, call.state, arg)
            if b"/proc/" in text and any(name in text for name in _PROC_NAME_FILES):
                return True
    return False


def callee_hints(cfg: Cfg, check: PeerCredCheck, lookup_symbols: Optional[Iterable[str]] = None) -> Dict[str, str]:
    """Map each callee receiving a credential to ``process_name_lookup`` when it resolves a process name."""
    lookup_symbols = set(lookup_symbols if lookup_symbols is not None else get_settings().process_name_lookup_symbols)
    hints = {}
    for usage in check.usages:
        if usage.kind != UsageKind.FUNCTION_ARG or not usage.callee or usage.callee in hints:
            continue
        if usage.callee in lookup_symbols:
            hints[usage.callee] = "process_name_lookup"
            continue
        entry = _function_named(cfg, usage.callee)
        if entry is not None and _reads_process_name(cfg, entry):
            hints[usage.callee] = "process_name_lookup"
    return hints


def classify_check_strength(check: PeerCredCheck, callee_hints: Optional[Dict[str, str]] = None) -> CheckStrength:
    callee_hints = callee_hints or {}
    for usage in check.usages:
        if (
            usage.cred == Cred.PID
            and usage.kind == UsageKind.FUNCTION_ARG
            and callee_hints.get(usage.callee or "") == "process_name_lookup"
        ):
            return CheckStrength.SPOOFABLE
    if any(u.kind == UsageKind.COMPARISON and u.cred in (Cred.UID, Cred.GID) for u in check.usages):
        return CheckStrength.SECURE
    if any(u.cred == Cred.PID for u in check.usages):
        return CheckStrength.WEAK
    return CheckStrength.NONE


def classify_checks(
    cfg: Cfg, checks: Iterable[PeerCredCheck], lookup_symbols: Optional[Iterable[str]] = None
) -> List[ClassifiedCheck]:
    return [
        ClassifiedCheck(check=c, strength=classify_check_strength(c, callee_hints(cfg, c, lookup_symbols)))
        for c in checks
    ]


def summarize_strength(checks: Iterable[ClassifiedCheck]) -> CheckStrength:
    strengths = [c.strength for c in checks]
    return max(strengths, key=STRENGTH_ORDER.__getitem__) if strengths else CheckStrength.NONE


# ---------------------------------------------------------------------------
# close-and-rebind


def _bound_fd(call: CallFacts, api: Optional[BindApi]) -> Value:
    if api is None or api.fd_arg is None:
        return RetVal(call.site.address)
    return call.args[api.fd_arg]


def detect_close_outside_cleanup(cfg: Cfg, bind_callsite: int) -> bool:
    """A close of the bound descriptor inside a loop that also re-binds it."""
    site: CallSite = cfg.callsites[bind_callsite]
    func = cfg.functions[site.function]
    facts = function_facts(cfg, site.function)
    call = facts.calls.get(bind_callsite)
    if call is None:
        return False
    api = BIND_APIS.get(canonical_symbol(site.symbol, BIND_APIS) or "")
    fd = _bound_fd(call, api)
    if fd is TOP:
        return False
    bind_block = func.block_of(bind_callsite)
    for component in nx.strongly_connected_components(func.graph):
        if bind_block not in component:
            continue
        looping = len(component) > 1 or func.graph.has_edge(bind_block, bind_block)
        if not looping:
            return False
        for address, other in facts.calls.items():
            if other.site.symbol == "close" and other.args[0] == fd and func.block_of(address) in component:
                return True
    return False

