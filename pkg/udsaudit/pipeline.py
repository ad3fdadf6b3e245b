"""Full analysis of one extracted firmware image.

Stages run in a fixed order: load, policy, graph, query, initrc, correlate,
binaries, boot, evaluate. Only the binary stage fans out to worker
processes; its results are merged back in path order.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from itertools import repeat
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from udsaudit.access import classify_namespace, evaluate_endpoint
from udsaudit.android_ids import IdResolver
from udsaudit.binanalysis.analyzer import BinaryFindings, SkipReason, analyze_binary
from udsaudit.binanalysis.records import SYMBOLIC, BindPosition, CredModCall, CredModKind
from udsaudit.config import AnalysisSettings, get_settings
from udsaudit.endpoint import Namespace, Provenance, SocketEndpoint, reserved_socket_path
from udsaudit.errors import MissingInitRc, UnclassifiableAddress
from udsaudit.firmware import FileKind, FirmwareImage, FsEntry, insert_entry, label_or_default, load_image_dir, resolve_unset_labels
from udsaudit.initrc import RestartRisk, ServiceDefinition, extract_reserved_sockets, parse_initrc_tree, restart_risk, simulate_boot
from udsaudit.report import EndpointResult, Report, ReportStats, SkippedBinary
from udsaudit.sepolicy import UNKNOWN_OWNER, build_dataflow_graph, correlate_subject_binaries, filter_socket_ipc, parse_policy, query_writable

logger = logging.getLogger(__name__)

UNCHANGED_ID = 0xFFFFFFFF

_PROVENANCE_RANK = {Provenance.INITRC: 0, Provenance.BINARY_BIND: 1, Provenance.BINARY_GETENV: 2}


@dataclass
class _Candidate:
    endpoint: SocketEndpoint
    cred_mods: Tuple[CredModCall, ...] = ()


@contextmanager
def _stage(timing: Dict[str, float], name: str) -> Iterator[None]:
    started = time.perf_counter()
    try:
        yield
    finally:
        timing[name] = time.perf_counter() - started
        logger.debug(f"stage_done stage={name} seconds={timing[name]:.3f}")


# ----------------------------------------------------------------------------
# Binary stage
# ----------------------------------------------------------------------------


def accessible_binaries(pairs: Iterable[Tuple[object, str]], correlation: Dict[str, frozenset]) -> Dict[str, str]:
    """Executable path -> owning domain, for every reachable socket owner.

    A binary running in several reachable domains is attributed to the
    lexically first one.
    """
    domains = sorted({owner for _, owner in pairs if owner != UNKNOWN_OWNER})
    targets: Dict[str, str] = {}
    for domain in domains:
        paths = correlation.get(domain)
        if not paths:
            logger.warning(f"domain_without_binary domain={domain}")
            continue
        for path in sorted(paths):
            targets.setdefault(path, domain)
    return {p: targets[p] for p in sorted(targets)}


def analyze_binaries(image: FirmwareImage, paths: Sequence[str], settings: AnalysisSettings) -> Dict[str, BinaryFindings]:
    blobs = [image.binaries.get(p) for p in paths]
    if settings.jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=min(settings.jobs, len(paths))) as pool:
            results = list(pool.map(analyze_binary, paths, blobs, repeat(settings)))
    else:
        results = [analyze_binary(p, b, settings) for p, b in zip(paths, blobs)]
    return {r.path: r for r in sorted(results, key=lambda r: r.path)}


# ----------------------------------------------------------------------------
# Endpoint assembly
# ----------------------------------------------------------------------------


def _services_by_binary(services: Sequence[ServiceDefinition]) -> Dict[str, ServiceDefinition]:
    by_binary: Dict[str, ServiceDefinition] = {}
    for service in sorted(services, key=lambda s: s.name):
        by_binary.setdefault(service.exec_path, service)
    return by_binary


def _binary_candidates(findings: BinaryFindings, domain: str, service: Optional[ServiceDefinition]) -> List[_Candidate]:
    common = dict(
        owner_binary=findings.path,
        owner_domain=domain,
        checks=findings.checks,
        service=service.name if service else None,
    )
    out = []
    for finding in findings.binds:
        try:
            classified = classify_namespace(finding.bind)
        except UnclassifiableAddress as e:
            logger.warning(f"endpoint_unclassifiable binary={findings.path} callsite={finding.bind.callsite:#x} error={e}")
            continue
        endpoint = SocketEndpoint(
            address=classified.address,
            namespace=classified.namespace,
            provenance=Provenance.BINARY_BIND,
            reserved_dir=classified.reserved_dir,
            close_rebind=finding.close_rebind,
            **common,
        )
        out.append(_Candidate(endpoint, finding.cred_mods))
    for lookup in findings.reserved:
        classified = classify_namespace(lookup)
        endpoint = SocketEndpoint(
            address=classified.address,
            namespace=classified.namespace,
            provenance=Provenance.BINARY_GETENV,
            reserved_dir=True,
            **common,
        )
        out.append(_Candidate(endpoint))
    return out


def merge_candidates(candidates: Iterable[_Candidate]) -> Dict[Tuple[str, str], _Candidate]:
    """One candidate per (owner_binary, address); init RC provenance wins, then bind, then getenv."""
    merged: Dict[Tuple[str, str], _Candidate] = {}
    for candidate in candidates:
        key = candidate.endpoint.sort_key
        current = merged.get(key)
        if current is None:
            merged[key] = candidate
            continue
        keep, other = current, candidate
        if _PROVENANCE_RANK[other.endpoint.provenance] < _PROVENANCE_RANK[keep.endpoint.provenance]:
            keep, other = other, keep
        update = {"close_rebind": keep.endpoint.close_rebind or other.endpoint.close_rebind}
        if not keep.endpoint.checks:
            update["checks"] = other.endpoint.checks
        merged[key] = _Candidate(keep.endpoint.model_copy(update=update), keep.cred_mods + other.cred_mods)
    return {k: merged[k] for k in sorted(merged)}


def collect_candidates(
    services: Sequence[ServiceDefinition],
    findings: Dict[str, BinaryFindings],
    targets: Dict[str, str],
    resolver: IdResolver,
) -> Dict[Tuple[str, str], _Candidate]:
    by_binary = _services_by_binary(services)
    candidates: List[_Candidate] = []
    for service in services:
        domain = targets.get(service.exec_path)
        if domain is None:
            continue
        found = findings.get(service.exec_path)
        checks = found.checks if found is not None else ()
        for endpoint in extract_reserved_sockets(service, resolver):
            candidates.append(
                _Candidate(endpoint.model_copy(update={"owner_domain": endpoint.owner_domain or domain, "checks": checks}))
            )
    for path, found in findings.items():
        if not found.skipped:
            candidates.extend(_binary_candidates(found, targets[path], by_binary.get(path)))
    return merge_candidates(candidates)


# ----------------------------------------------------------------------------
# Socket files
# ----------------------------------------------------------------------------


def _applies_to(mod: CredModCall, path: str) -> bool:
    return mod.target is None or mod.target == SYMBOLIC or isinstance(mod.target, int) or mod.target == path


def dac_indeterminate(cred_mods: Sequence[CredModCall], path: str) -> bool:
    return any(m.is_symbolic or m.target == SYMBOLIC for m in cred_mods if _applies_to(m, path))


def socket_file_for(
    path: str,
    cred_mods: Sequence[CredModCall],
    service: Optional[ServiceDefinition],
    resolver: IdResolver,
    default_umask: int,
) -> FsEntry:
    """Attributes a daemon's bind gives a new socket file, after the calls around it."""
    umask = default_umask
    mode: Optional[int] = None
    uid: Optional[int] = None
    gid: Optional[int] = None
    euid: Optional[int] = None
    egid: Optional[int] = None
    for mod in sorted(cred_mods, key=lambda m: m.callsite):
        if mod.is_symbolic or not _applies_to(mod, path) or mod.target == SYMBOLIC:
            continue
        if mod.kind == CredModKind.UMASK:
            umask = mod.args[0] & 0o777
        elif mod.kind == CredModKind.SETEUID:
            euid = mod.args[0]
        elif mod.kind == CredModKind.SETEGID:
            egid = mod.args[0]
        elif mod.kind in (CredModKind.CHMOD, CredModKind.FCHMOD):
            mode = mod.args[0] & 0o7777
        else:
            new_uid, new_gid = mod.args
            if new_uid != UNCHANGED_ID:
                uid = new_uid
            if new_gid != UNCHANGED_ID:
                gid = new_gid

    if uid is None:
        uid = euid if euid is not None else resolver.uid(service.user) if service and service.user else 0
    if gid is None:
        gid = egid if egid is not None else resolver.gid(service.group) if service and service.group else 0
    return FsEntry(
        path=path,
        mode=mode if mode is not None else 0o777 & ~umask,
        uid=uid,
        gid=gid,
        kind=FileKind.SOCKET_FILE,
    )


def overlay_after_bind(entry: FsEntry, cred_mods: Sequence[CredModCall]) -> FsEntry:
    """``entry`` with the constant chmod/chown calls after the bind applied in callsite order."""
    mode, uid, gid = entry.mode, entry.uid, entry.gid
    for mod in sorted(cred_mods, key=lambda m: m.callsite):
        if mod.position != BindPosition.AFTER_BIND or mod.is_symbolic or mod.target == SYMBOLIC:
            continue
        if not _applies_to(mod, entry.path):
            continue
        if mod.kind in (CredModKind.CHMOD, CredModKind.FCHMOD):
            mode = mod.args[0] & 0o7777
        else:
            new_uid, new_gid = mod.args
            if new_uid != UNCHANGED_ID:
                uid = new_uid
            if new_gid != UNCHANGED_ID:
                gid = new_gid
    if (mode, uid, gid) == (entry.mode, entry.uid, entry.gid):
        return entry
    return entry.model_copy(update={"mode": mode, "uid": uid, "gid": gid})


def attach_socket_files(
    image: FirmwareImage,
    candidates: Dict[Tuple[str, str], _Candidate],
    services: Sequence[ServiceDefinition],
    resolver: IdResolver,
    settings: AnalysisSettings,
) -> Tuple[FirmwareImage, List[SocketEndpoint]]:
    """Bind each endpoint to its file entry, inserting FILESYSTEM socket files the manifest lacks."""
    by_name = {s.name: s for s in services}
    by_binary = _services_by_binary(services)
    endpoints = []
    for candidate in candidates.values():
        endpoint = candidate.endpoint
        if endpoint.namespace == Namespace.ABSTRACT:
            endpoints.append(endpoint)
            continue

        if endpoint.namespace == Namespace.RESERVED:
            entry = image.get(reserved_socket_path(endpoint.address)) or endpoint.file_entry
            if entry is not None and entry.selabel is None:
                entry = entry.model_copy(update={"selabel": label_or_default(image, entry.path, entry.kind)})
            if entry is None:
                logger.warning(f"reserved_socket_undeclared address={endpoint.address} binary={endpoint.owner_binary}")
            endpoints.append(endpoint.model_copy(update={"file_entry": entry}))
            continue

        path = endpoint.address
        indeterminate = dac_indeterminate(candidate.cred_mods, path)
        entry = image.get(path)
        if entry is None:
            service = by_name.get(endpoint.service or "") or by_binary.get(endpoint.owner_binary)
            created = socket_file_for(path, candidate.cred_mods, service, resolver, settings.default_umask)
            image = insert_entry(image, created)
            entry = image.get(path)
            logger.info(f"socket_file_inserted path={path} mode={entry.mode:o} uid={entry.uid} gid={entry.gid}")
        else:
            updated = overlay_after_bind(entry, candidate.cred_mods)
            if updated is not entry:
                image = insert_entry(image, updated, overwrite=True)
                entry = image.get(path)
                logger.info(f"socket_file_updated path={path} mode={entry.mode:o} uid={entry.uid} gid={entry.gid}")
        endpoints.append(endpoint.model_copy(update={"file_entry": entry, "dac_indeterminate": indeterminate}))
    return image, endpoints


def _restart_for(endpoint: SocketEndpoint, services: Sequence[ServiceDefinition], triggers) -> RestartRisk:
    by_name = {s.name: s for s in services}
    service = by_name.get(endpoint.service or "") or _services_by_binary(services).get(endpoint.owner_binary)
    if service is None:
        return RestartRisk.NONE
    return restart_risk(service, triggers)


# ----------------------------------------------------------------------------
# Orchestration
# ----------------------------------------------------------------------------


def run_pipeline(image_dir: Path, settings: Optional[AnalysisSettings] = None) -> Report:
    settings = settings or get_settings()
    timing: Dict[str, float] = {}
    logger.info(f"pipeline_started image={image_dir} subject={settings.subject} hops={settings.hops} jobs={settings.jobs}")

    with _stage(timing, "load"):
        image = resolve_unset_labels(load_image_dir(Path(image_dir), settings.default_label))
        if not image.initrc_sources:
            if settings.strict:
                raise MissingInitRc(f"no init RC files in {image_dir}")
            logger.warning(f"initrc_missing image={image.image_id}")
    with _stage(timing, "policy"):
        db = parse_policy(image.policy_source, strict=settings.strict)
    with _stage(timing, "graph"):
        graph = build_dataflow_graph(db, settings.write_perms, settings.read_perms)
    with _stage(timing, "query"):
        pairs = filter_socket_ipc(graph, query_writable(graph, settings.subject, settings.hops))
    with _stage(timing, "initrc"):
        tree = parse_initrc_tree(image.initrc_sources)
        resolver = IdResolver(image.passwd_source, image.group_source)
    with _stage(timing, "correlate"):
        targets = accessible_binaries(pairs, correlate_subject_binaries(db, image, tree.services))
    with _stage(timing, "binaries"):
        findings = analyze_binaries(image, list(targets), settings)
    with _stage(timing, "boot"):
        candidates = collect_candidates(tree.services, findings, targets, resolver)
        image = simulate_boot(image, tree.services, tree.fs_actions, resolver)
        image, endpoints = attach_socket_files(image, candidates, tree.services, resolver, settings)
    with _stage(timing, "evaluate"):
        results = tuple(
            EndpointResult(
                endpoint=endpoint,
                verdict=evaluate_endpoint(
                    endpoint, graph, image, settings, _restart_for(endpoint, tree.services, tree.triggers)
                ),
            )
            for endpoint in endpoints
        )

    owners = {r.endpoint.owner_binary for r in results}
    skipped = []
    for path, found in findings.items():
        if found.skipped:
            skipped.append(SkippedBinary(binary=path, reason=found.skip_reason))
        elif path not in owners:
            logger.info(f"binary_skipped path={path} reason={SkipReason.NO_SOCKETS_FOUND.value}")
            skipped.append(SkippedBinary(binary=path, reason=SkipReason.NO_SOCKETS_FOUND))

    stats = ReportStats(
        rules_parsed=db.stats.rules_parsed,
        unknown_statements=db.stats.unknown_statements,
        skipped_malformed=db.stats.skipped_malformed,
        services=len(tree.services),
        binaries_analyzed=sum(1 for f in findings.values() if not f.skipped),
        binaries_skipped=len(skipped),
        endpoints=len(results),
        accessible=sum(1 for r in results if r.verdict.accessible),
    )
    logger.info(
        f"pipeline_finished image={image.image_id} endpoints={stats.endpoints} accessible={stats.accessible} "
        f"skipped={stats.binaries_skipped} seconds={sum(timing.values()):.3f}"
    )
    return Report(image=image.image_id, endpoints=results, skipped=tuple(skipped), stats=stats, timing=timing)
