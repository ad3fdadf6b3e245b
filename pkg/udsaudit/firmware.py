"""Immutable model of an extracted firmware tree.

The manifest is the only source of ownership, mode and label data; host
filesystem permission bits are never consulted.
"""

import logging
import posixpath
import re
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationInfo, field_validator

from udsaudit.errors import DuplicatePath, MalformedManifest, MissingPolicy, NoMatchingContext

logger = logging.getLogger(__name__)

DEFAULT_LABEL = "u:object_r:unlabeled:s0"
MANIFEST_NAME = "manifest.tsv"
ELF_MAGIC = b"\x7fELF"

POLICY_CANDIDATES = (
    "sepolicy.conf",
    "policy.conf",
    "system/etc/selinux/policy.conf",
    "system/etc/selinux/plat_sepolicy.conf",
    "vendor/etc/selinux/policy.conf",
    "vendor/etc/selinux/vendor_sepolicy.conf",
)
FILE_CONTEXTS_CANDIDATES = (
    "file_contexts",
    "plat_file_contexts",
    "system/etc/selinux/plat_file_contexts",
    "vendor_file_contexts",
    "vendor/etc/selinux/vendor_file_contexts",
)
PASSWD_CANDIDATES = ("system/etc/passwd", "etc/passwd")
GROUP_CANDIDATES = ("system/etc/group", "etc/group")


class FileKind(str, Enum):
    REGULAR = "regular"
    DIRECTORY = "directory"
    SYMLINK = "symlink"
    SOCKET_FILE = "socket_file"
    DEVICE = "device"
    OTHER = "other"


# file_contexts type selectors
_FILE_TYPE_SELECTORS = {
    "--": FileKind.REGULAR,
    "-d": FileKind.DIRECTORY,
    "-l": FileKind.SYMLINK,
    "-s": FileKind.SOCKET_FILE,
    "-c": FileKind.DEVICE,
    "-b": FileKind.DEVICE,
    "-p": FileKind.OTHER,
}


def normalize_path(path: str) -> str:
    """Absolute, no ``.``/``..`` segments, no repeated separators."""
    if not path.startswith("/"):
        raise ValueError(f"path is not absolute: {path!r}")
    normalized = posixpath.normpath(path)
    # normpath keeps a leading double slash
    if normalized.startswith("//"):
        normalized = "/" + normalized.lstrip("/")
    return normalized


def label_type(selabel: Optional[str]) -> Optional[str]:
    """Type component of ``user:role:type:level``."""
    if not selabel:
        return None
    parts = selabel.split(":")
    return parts[2] if len(parts) >= 3 else None


class FsEntry(BaseModel):
    """One filesystem object with DAC bits, ownership and SELinux label."""

    model_config = ConfigDict(frozen=True)

    path: str
    mode: int
    uid: int
    gid: int
    selabel: Optional[str] = None
    kind: FileKind = FileKind.REGULAR

    @field_validator("path")
    @classmethod
    def _path_normalized(cls, value: str) -> str:
        return normalize_path(value)

    @field_validator("mode")
    @classmethod
    def _mode_range(cls, value: int) -> int:
        if not 0 <= value <= 0o7777:
            raise ValueError(f"mode out of range: {value:o}")
        return value

    @property
    def label_type(self) -> Optional[str]:
        return label_type(self.selabel)


class CredentialSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    uid: int
    primary_gid: int
    supplementary_gids: FrozenSet[int] = frozenset()

    @field_validator("supplementary_gids")
    @classmethod
    def _drop_primary_duplicate(cls, value: FrozenSet[int], info: ValidationInfo) -> FrozenSet[int]:
        primary = info.data.get("primary_gid")
        return frozenset(g for g in value if g != primary)

    @property
    def all_gids(self) -> FrozenSet[int]:
        return self.supplementary_gids | {self.primary_gid}


class FileContextRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    pattern: str
    context: str
    file_kind: Optional[FileKind] = None


class FirmwareImage(BaseModel):
    """Loaded image. Never mutated; ``insert_entry`` returns a derived copy."""

    model_config = ConfigDict(frozen=True)

    image_id: str = ""
    entries: Dict[str, FsEntry] = {}
    file_contexts: Tuple[FileContextRule, ...] = ()
    policy_source: str = ""
    initrc_sources: Tuple[Tuple[str, str], ...] = ()
    binaries: Dict[str, bytes] = {}
    passwd_source: str = ""
    group_source: str = ""
    default_label: str = DEFAULT_LABEL

    def get(self, path: str) -> Optional[FsEntry]:
        return self.entries.get(path)

    def iter_entries(self) -> Iterator[FsEntry]:
        for path in sorted(self.entries):
            yield self.entries[path]

    def __contains__(self, path: str) -> bool:
        return path in self.entries


# ----------------------------------------------------------------------------
# file_contexts
# ----------------------------------------------------------------------------

_REGEX_META = re.compile(r"[\\.^$?*+|\[({]")


def _literal_prefix_length(pattern: str) -> int:
    stripped = pattern.lstrip("^")
    match = _REGEX_META.search(stripped)
    return len(stripped) if match is None else match.start()


@lru_cache(maxsize=4096)
def _compile_context_pattern(pattern: str) -> Optional[re.Pattern]:
    body = pattern
    if body.startswith("^"):
        body = body[1:]
    if body.endswith("$") and not body.endswith("\\$"):
        body = body[:-1]
    try:
        return re.compile(body)
    except re.error:
        logger.warning(f"file_context_bad_pattern pattern={pattern}")
        return None


def parse_file_contexts(text: str) -> List[FileContextRule]:
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) == 2:
            rules.append(FileContextRule(pattern=fields[0], context=fields[1]))
        elif len(fields) == 3 and fields[1] in _FILE_TYPE_SELECTORS:
            rules.append(
                FileContextRule(pattern=fields[0], context=fields[2], file_kind=_FILE_TYPE_SELECTORS[fields[1]])
            )
        else:
            logger.warning(f"file_context_skipped line={lineno}")
    return rules


def resolve_label(image: FirmwareImage, path: str, kind: Optional[FileKind] = None) -> str:
    """Context of the most specific matching rule.

    Specificity is the length of the pattern's literal prefix; among equally
    specific rules the one listed last wins.
    """
    if not image.file_contexts:
        raise NoMatchingContext(path)
    best: Optional[FileContextRule] = None
    best_len = -1
    for rule in image.file_contexts:
        if kind is not None and rule.file_kind is not None and rule.file_kind != kind:
            continue
        compiled = _compile_context_pattern(rule.pattern)
        if compiled is None or not compiled.fullmatch(path):
            continue
        length = _literal_prefix_length(rule.pattern)
        if length >= best_len:
            best, best_len = rule, length
    if best is None:
        raise NoMatchingContext(path)
    return best.context


def label_or_default(image: FirmwareImage, path: str, kind: Optional[FileKind] = None) -> str:
    try:
        return resolve_label(image, path, kind)
    except NoMatchingContext:
        logger.warning(f"label_defaulted path={path} label={image.default_label}")
        return image.default_label


def insert_entry(image: FirmwareImage, entry: FsEntry, overwrite: bool = False) -> FirmwareImage:
    """Derived image containing ``entry``; unset labels are resolved first."""
    if entry.path in image.entries and not overwrite:
        raise DuplicatePath(entry.path)
    if entry.selabel is None:
        entry = entry.model_copy(update={"selabel": label_or_default(image, entry.path, entry.kind)})
    entries = dict(image.entries)
    entries[entry.path] = entry
    return image.model_copy(update={"entries": {p: entries[p] for p in sorted(entries)}})


def relabel(image: FirmwareImage, path: str) -> FirmwareImage:
    """Re-resolve the label of ``path`` and everything below it."""
    prefix = path.rstrip("/") + "/"
    entries = dict(image.entries)
    changed = 0
    for p, entry in image.entries.items():
        if p == path or p.startswith(prefix):
            entries[p] = entry.model_copy(update={"selabel": label_or_default(image, p, entry.kind)})
            changed += 1
    logger.debug(f"relabel path={path} entries={changed}")
    return image.model_copy(update={"entries": entries})


def resolve_unset_labels(image: FirmwareImage) -> FirmwareImage:
    """Assign a label to every manifest entry recorded with ``-``."""
    unset = [p for p, e in image.entries.items() if e.selabel is None]
    if not unset:
        return image
    entries = dict(image.entries)
    for p in unset:
        entries[p] = entries[p].model_copy(update={"selabel": label_or_default(image, p, entries[p].kind)})
    return image.model_copy(update={"entries": entries})


# ----------------------------------------------------------------------------
# Manifest and tree loading
# ----------------------------------------------------------------------------


def parse_manifest(text: str) -> Dict[str, FsEntry]:
    entries: Dict[str, FsEntry] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        fields = raw.rstrip("\r\n").split("\t")
        if len(fields) != 6:
            raise MalformedManifest(lineno, f"expected 6 tab-separated fields, got {len(fields)}")
        path, mode_text, uid_text, gid_text, selabel, kind_text = fields
        try:
            mode = int(mode_text, 8)
        except ValueError:
            raise MalformedManifest(lineno, f"mode is not octal: {mode_text!r}")
        if mode > 0o7777:
            raise MalformedManifest(lineno, f"mode out of range: {mode_text}")
        try:
            uid, gid = int(uid_text), int(gid_text)
        except ValueError:
            raise MalformedManifest(lineno, "uid/gid must be numeric")
        try:
            kind = FileKind(kind_text)
        except ValueError:
            raise MalformedManifest(lineno, f"unknown kind: {kind_text!r}")
        try:
            path = normalize_path(path)
        except ValueError as e:
            raise MalformedManifest(lineno, str(e))
        if path in entries:
            raise MalformedManifest(lineno, f"duplicate path: {path}")
        entries[path] = FsEntry(
            path=path,
            mode=mode,
            uid=uid,
            gid=gid,
            selabel=None if selabel == "-" else selabel,
            kind=kind,
        )
    return entries


def _read_candidates(root: Path, candidates: Tuple[str, ...]) -> str:
    chunks = []
    for rel in candidates:
        candidate = root / rel
        if candidate.is_file():
            chunks.append(candidate.read_text(encoding="utf-8", errors="replace"))
    return "\n".join(chunks)


def _collect_initrc(root: Path) -> Tuple[Tuple[str, str], ...]:
    sources = []
    for rc in sorted(root.rglob("*.rc")):
        if rc.is_file():
            rel = "/" + rc.relative_to(root).as_posix()
            sources.append((rel, rc.read_text(encoding="utf-8", errors="replace")))
    return tuple(sources)


def load_image(root_dir: Path, manifest: Path, image_id: Optional[str] = None,
               default_label: str = DEFAULT_LABEL) -> FirmwareImage:
    root = Path(root_dir)
    entries = parse_manifest(Path(manifest).read_text(encoding="utf-8"))

    policy_source = _read_candidates(root, POLICY_CANDIDATES)
    if not policy_source.strip():
        raise MissingPolicy(f"no AV-rule document under {root}")

    file_contexts = tuple(parse_file_contexts(_read_candidates(root, FILE_CONTEXTS_CANDIDATES)))
    initrc_sources = _collect_initrc(root)
    if not initrc_sources:
        logger.warning(f"initrc_missing root={root}")

    binaries: Dict[str, bytes] = {}
    for path, entry in sorted(entries.items()):
        if entry.kind != FileKind.REGULAR:
            continue
        on_disk = root / path.lstrip("/")
        if not on_disk.is_file():
            logger.warning(f"manifest_missing_file path={path}")
            continue
        data = on_disk.read_bytes()
        if data.startswith(ELF_MAGIC):
            binaries[path] = data

    image = FirmwareImage(
        image_id=image_id or root.name,
        entries={p: entries[p] for p in sorted(entries)},
        file_contexts=file_contexts,
        policy_source=policy_source,
        initrc_sources=initrc_sources,
        binaries=binaries,
        passwd_source=_read_candidates(root, PASSWD_CANDIDATES),
        group_source=_read_candidates(root, GROUP_CANDIDATES),
        default_label=default_label,
    )
    logger.info(
        f"image_loaded image={image.image_id} entries={len(image.entries)} "
        f"contexts={len(file_contexts)} rc_files={len(initrc_sources)} binaries={len(binaries)}"
    )
    return image


def load_image_dir(image_dir: Path, default_label: str = DEFAULT_LABEL) -> FirmwareImage:
    """``<image_dir>/manifest.tsv`` plus the tree in ``rootfs/`` (or the directory itself)."""
    image_dir = Path(image_dir)
    root = image_dir / "rootfs"
    if not root.is_dir():
        root = image_dir
    return load_image(root, image_dir / MANIFEST_NAME, image_id=image_dir.name, default_label=default_label)
