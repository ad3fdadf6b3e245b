"""SELinux access-vector rules and the read/write dataflow graph built from them."""

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field

from udsaudit.config import DEFAULT_READ_PERMS, DEFAULT_WRITE_PERMS
from udsaudit.errors import PolicySyntaxError
from udsaudit.firmware import FileKind, FirmwareImage, label_type
from udsaudit.initrc import ServiceDefinition

logger = logging.getLogger(__name__)

UNKNOWN_OWNER = "UNKNOWN"
SELF = "self"

FILE_CLASSES = frozenset(
    {"file", "dir", "lnk_file", "chr_file", "blk_file", "fifo_file", "sock_file", "anon_inode"}
)
OWNER_BIND_PERMS = frozenset({"bind"})
OWNER_SERVE_PERMS = frozenset({"listen", "accept"})
DOMAIN_ATTRIBUTE = "domain"

# Statement kinds that grant nothing and are skipped without being counted as unknown.
_NON_GRANTING = frozenset({"dontaudit", "auditallow", "neverallow", "allowxperm", "neverallowxperm",
                           "dontauditxperm", "auditallowxperm"})


class ClassCategory(str, Enum):
    FILE = "file"
    IPC_SOCKET = "ipc_socket"
    IPC_OTHER = "ipc_other"


class PolicyObject(NamedTuple):
    type: str
    category: ClassCategory

    def __str__(self) -> str:
        return f"{self.type}/{self.category.value}"


class AvRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: str
    target: str
    obj_class: str
    perms: FrozenSet[str] = Field(min_length=1)
    line: int = 0


class DomainTransition(NamedTuple):
    source: str
    entrypoint: str
    target: str


class PolicyStats(BaseModel):
    rules_parsed: int = 0
    unknown_statements: int = 0
    skipped_malformed: int = 0


class PolicyDb(BaseModel):
    model_config = ConfigDict(frozen=True)

    av_rules: Tuple[AvRule, ...] = ()
    attributes: Dict[str, FrozenSet[str]] = {}
    domain_transitions: Tuple[DomainTransition, ...] = ()
    types: FrozenSet[str] = frozenset()
    stats: PolicyStats = PolicyStats()

    def expand(self, name: str, source: Optional[str] = None) -> List[str]:
        """Member types of ``name``; ``self`` stands for the rule's source type."""
        if name == SELF:
            return [source] if source is not None else []
        if name in self.attributes:
            return sorted(self.attributes[name])
        return [name]


def categorize(obj_class: str) -> ClassCategory:
    if obj_class in FILE_CLASSES:
        return ClassCategory.FILE
    if "socket" in obj_class:
        return ClassCategory.IPC_SOCKET
    return ClassCategory.IPC_OTHER


# ----------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------

_TOKEN = re.compile(r"[{}:,~*]|[^\s{}:,~*;]+")


def _split_statements(text: str) -> Iterable[Tuple[int, str]]:
    """Yield ``(line, statement)`` pairs with comments removed."""
    buf: List[str] = []
    start_line = 0
    depth = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        for ch in line:
            if not buf and ch.isspace():
                continue
            if not buf:
                start_line = lineno
            if ch == ";" and depth == 0:
                yield start_line, "".join(buf).strip()
                buf = []
                continue
            buf.append(ch)
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth = max(depth - 1, 0)
                head = "".join(buf).split(None, 1)[0]
                # class/common bodies are not terminated by ';'
                if depth == 0 and head in ("class", "common"):
                    yield start_line, "".join(buf).strip()
                    buf = []
        if buf:
            buf.append(" ")
    if "".join(buf).strip():
        yield start_line, "".join(buf).strip()


class _Tokens:
    def __init__(self, statement: str):
        self.items = _TOKEN.findall(statement)
        self.pos = 0

    def done(self) -> bool:
        return self.pos >= len(self.items)

    def next(self) -> str:
        if self.done():
            raise ValueError("unexpected end of statement")
        token = self.items[self.pos]
        self.pos += 1
        return token

    def expect(self, token: str) -> None:
        got = self.next()
        if got != token:
            raise ValueError(f"expected {token!r}, got {got!r}")

    def name_set(self) -> List[str]:
        """A single name or a braced list; negated members are dropped."""
        token = self.next()
        if token in ("~", "*"):
            raise ValueError("complement and wildcard sets are not supported")
        if token != "{":
            return [token]
        names: List[str] = []
        negate = False
        while True:
            token = self.next()
            if token == "}":
                break
            if token == "-" or token.startswith("-"):
                negate = token == "-"
                continue
            if negate:
                negate = False
                continue
            names.append(token)
        if not names:
            raise ValueError("empty set")
        return names


def _parse_allow(tokens: _Tokens, line: int) -> List[AvRule]:
    sources = tokens.name_set()
    targets = tokens.name_set()
    tokens.expect(":")
    classes = tokens.name_set()
    perms = frozenset(tokens.name_set())
    if not tokens.done():
        raise ValueError(f"trailing tokens: {tokens.items[tokens.pos:]}")
    return [
        AvRule(source=s, target=t, obj_class=c, perms=perms, line=line)
        for s in sources
        for t in targets
        for c in classes
    ]


def _parse_name_list(tokens: _Tokens) -> List[str]:
    names = []
    while not tokens.done():
        token = tokens.next()
        if token != ",":
            names.append(token)
    return names


def parse_policy(text: str, strict: bool = False) -> PolicyDb:
    """Parse textual AV rules.

    Captures ``allow``, ``attribute``, ``typeattribute``, ``type`` (with
    attribute list) and process ``type_transition`` statements. Anything else
    is counted and skipped.
    """
    rules: List[AvRule] = []
    attributes: Dict[str, Set[str]] = {}
    memberships: List[Tuple[str, str]] = []
    transitions: List[DomainTransition] = []
    types: Set[str] = set()
    stats = PolicyStats()

    for line, statement in _split_statements(text):
        tokens = _Tokens(statement)
        if tokens.done():
            continue
        kind = tokens.next()
        try:
            if kind == "allow":
                parsed = _parse_allow(tokens, line)
                rules.extend(parsed)
                stats.rules_parsed += len(parsed)
            elif kind == "attribute":
                name = tokens.next()
                if not tokens.done():
                    raise ValueError("attribute takes one name")
                attributes.setdefault(name, set())
            elif kind == "typeattribute":
                type_name = tokens.next()
                attrs = _parse_name_list(tokens)
                if not attrs:
                    raise ValueError("typeattribute needs at least one attribute")
                types.add(type_name)
                memberships.extend((type_name, a) for a in attrs)
            elif kind == "type":
                names = _parse_name_list(tokens)
                if not names:
                    raise ValueError("type needs a name")
                type_name, rest = names[0], names[1:]
                if "alias" in rest:
                    rest = rest[: rest.index("alias")]
                types.add(type_name)
                memberships.extend((type_name, a) for a in rest)
            elif kind == "type_transition":
                source = tokens.next()
                entry = tokens.next()
                tokens.expect(":")
                obj_class = tokens.next()
                target = tokens.next()
                if obj_class == "process":
                    transitions.append(DomainTransition(source, entry, target))
            elif kind in _NON_GRANTING:
                pass
            else:
                stats.unknown_statements += 1
        except ValueError as e:
            if strict:
                raise PolicySyntaxError(line, statement, str(e))
            stats.skipped_malformed += 1
            logger.warning(f"policy_statement_skipped line={line} reason={e}")

    for type_name, attr in memberships:
        attributes.setdefault(attr, set()).add(type_name)

    db = PolicyDb(
        av_rules=tuple(rules),
        attributes={a: frozenset(m) for a, m in sorted(attributes.items())},
        domain_transitions=tuple(transitions),
        types=frozenset(types),
        stats=stats,
    )
    logger.info(
        f"policy_parsed rules={stats.rules_parsed} attributes={len(db.attributes)} "
        f"transitions={len(transitions)} unknown={stats.unknown_statements} malformed={stats.skipped_malformed}"
    )
    return db


# ----------------------------------------------------------------------------
# Dataflow graph
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DataflowGraph:
    """Read/write abstraction of the policy.

    Write edges carry data subject→object, read edges object→subject; both
    are stored as ``(subject, object)`` pairs.
    """

    subjects: FrozenSet[str] = frozenset()
    objects: FrozenSet[PolicyObject] = frozenset()
    read_edges: FrozenSet[Tuple[str, PolicyObject]] = frozenset()
    write_edges: FrozenSet[Tuple[str, PolicyObject]] = frozenset()
    ipc_owner: Dict[PolicyObject, Tuple[str, ...]] = field(default_factory=dict)
    unknown_permissions: int = 0
    graph: nx.DiGraph = field(default_factory=nx.DiGraph, compare=False, repr=False)

    def can_write(self, subject: str, obj: PolicyObject) -> bool:
        return (subject, obj) in self.write_edges


def build_dataflow_graph(db: PolicyDb, write_perms: FrozenSet[str] = DEFAULT_WRITE_PERMS,
                         read_perms: FrozenSet[str] = DEFAULT_READ_PERMS) -> DataflowGraph:
    subjects: Set[str] = set(db.attributes.get(DOMAIN_ATTRIBUTE, ()))
    objects: Set[PolicyObject] = set()
    reads: Set[Tuple[str, PolicyObject]] = set()
    writes: Set[Tuple[str, PolicyObject]] = set()
    socket_perms: Dict[Tuple[str, str], Set[str]] = defaultdict(set)
    unknown = 0

    for transition in db.domain_transitions:
        subjects.update(db.expand(transition.source))
        subjects.update(db.expand(transition.target))

    for rule in db.av_rules:
        category = categorize(rule.obj_class)
        for source in db.expand(rule.source):
            subjects.add(source)
            for target in db.expand(rule.target, source):
                obj = PolicyObject(target, category)
                objects.add(obj)
                for perm in rule.perms:
                    is_write = perm in write_perms
                    is_read = perm in read_perms
                    if is_write:
                        writes.add((source, obj))
                    if is_read:
                        reads.add((source, obj))
                    if not (is_write or is_read):
                        unknown += 1
                if category == ClassCategory.IPC_SOCKET:
                    socket_perms[(source, target)].update(rule.perms)

    owners: Dict[PolicyObject, Tuple[str, ...]] = {}
    for obj in sorted(o for o in objects if o.category == ClassCategory.IPC_SOCKET):
        holders = sorted(
            s for (s, t), perms in socket_perms.items()
            if t == obj.type and (perms & OWNER_BIND_PERMS or OWNER_SERVE_PERMS <= perms)
        )
        if holders:
            owners[obj] = tuple(holders)
        elif obj.type in subjects:
            owners[obj] = (obj.type,)

    graph = nx.DiGraph()
    graph.add_nodes_from(subjects, kind="subject")
    graph.add_nodes_from(objects, kind="object")
    graph.add_edges_from(writes)
    graph.add_edges_from((obj, subject) for subject, obj in reads)

    logger.info(
        f"dataflow_built subjects={len(subjects)} objects={len(objects)} "
        f"writes={len(writes)} reads={len(reads)} owners={len(owners)} unknown_perms={unknown}"
    )
    return DataflowGraph(
        subjects=frozenset(subjects),
        objects=frozenset(objects),
        read_edges=frozenset(reads),
        write_edges=frozenset(writes),
        ipc_owner=owners,
        unknown_permissions=unknown,
        graph=graph,
    )


def query_writable(graph: DataflowGraph, subject: str, hops: int = 1) -> FrozenSet[PolicyObject]:
    """Objects ``subject`` can write to, directly or through ``hops - 1`` relays.

    One hop is a write edge. Every further hop reads an object written in the
    previous hop into another subject and follows that subject's write edges.
    """
    if hops < 1:
        raise ValueError("hops must be positive")
    if subject not in graph.subjects:
        logger.warning(f"query_unknown_subject subject={subject}")
        return frozenset()
    if hops == 1:
        return frozenset(o for s, o in graph.write_edges if s == subject)
    distances = nx.single_source_shortest_path_length(graph.graph, subject, cutoff=2 * hops - 1)
    return frozenset(node for node in distances if isinstance(node, PolicyObject))


def filter_socket_ipc(graph: DataflowGraph, objects: Iterable[PolicyObject]) -> List[Tuple[PolicyObject, str]]:
    """Socket IPC objects paired with each candidate owner (``UNKNOWN`` when none)."""
    pairs: List[Tuple[PolicyObject, str]] = []
    for obj in sorted(objects):
        if obj.category != ClassCategory.IPC_SOCKET:
            continue
        owners = graph.ipc_owner.get(obj)
        if not owners:
            logger.warning(f"ipc_owner_unknown object={obj}")
            pairs.append((obj, UNKNOWN_OWNER))
            continue
        pairs.extend((obj, owner) for owner in owners)
    return pairs


def correlate_subject_binaries(db: PolicyDb, image: FirmwareImage,
                               services: Sequence[ServiceDefinition]) -> Dict[str, FrozenSet[str]]:
    """Map domains to the executables their processes run."""
    by_type: Dict[str, Set[str]] = defaultdict(set)
    for entry in image.iter_entries():
        if entry.kind == FileKind.REGULAR and entry.label_type:
            by_type[entry.label_type].add(entry.path)

    mapping: Dict[str, Set[str]] = defaultdict(set)
    for transition in db.domain_transitions:
        paths = by_type.get(transition.entrypoint)
        if not paths:
            logger.warning(
                f"domain_unmatched domain={transition.target} entrypoint={transition.entrypoint}"
            )
            continue
        for domain in db.expand(transition.target):
            mapping[domain].update(paths)

    for service in services:
        domain = label_type(service.seclabel)
        if domain:
            mapping[domain].add(service.exec_path)

    return {domain: frozenset(paths) for domain, paths in sorted(mapping.items())}
