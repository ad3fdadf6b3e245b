"""Per-binary analysis task: load, recover the CFG, extract socket findings.

``analyze_binary`` is a top-level function over plain inputs so the pipeline
can hand it to a process pool.
"""

import logging
import time
from enum import Enum
from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict

from udsaudit.binanalysis.cfg import build_cfg
from udsaudit.binanalysis.dataflow import engine_for
from udsaudit.binanalysis.elf import load_elf
from udsaudit.binanalysis.extract import (
    classify_checks,
    detect_close_outside_cleanup,
    extract_bind_addresses,
    extract_cred_mods,
    extract_peer_checks,
    extract_reserved_getenv,
)
from udsaudit.binanalysis.records import ClassifiedCheck, CredModCall, ExtractedBind, ReservedLookup
from udsaudit.config import AnalysisSettings, get_settings
from udsaudit.errors import MalformedElf, UnsupportedArch

logger = logging.getLogger(__name__)


class SkipReason(str, Enum):
    SKIPPED_STATIC = "SKIPPED_STATIC"
    UNSUPPORTED_ARCH = "UNSUPPORTED_ARCH"
    MALFORMED_ELF = "MALFORMED_ELF"
    MISSING_BINARY = "MISSING_BINARY"
    NO_SOCKETS_FOUND = "NO_SOCKETS_FOUND"
    ANALYSIS_ERROR = "ANALYSIS_ERROR"


class BindFinding(BaseModel):
    model_config = ConfigDict(frozen=True)

    bind: ExtractedBind
    cred_mods: Tuple[CredModCall, ...] = ()
    close_rebind: bool = False


class BinaryFindings(BaseModel):
    model_config = ConfigDict(frozen=True)

    path: str
    arch: Optional[str] = None
    skip_reason: Optional[SkipReason] = None
    binds: Tuple[BindFinding, ...] = ()
    reserved: Tuple[ReservedLookup, ...] = ()
    checks: Tuple[ClassifiedCheck, ...] = ()
    functions: int = 0
    unresolved_calls: int = 0
    undecodable: int = 0
    seconds: float = 0.0

    @property
    def skipped(self) -> bool:
        return self.skip_reason is not None


def _skip(path: str, reason: SkipReason, detail: str = "", arch: Optional[str] = None) -> BinaryFindings:
    logger.info(f"binary_skipped path={path} reason={reason.value}" + (f" detail={detail}" if detail else ""))
    return BinaryFindings(path=path, arch=arch, skip_reason=reason)


def analyze_binary(path: str, data: Optional[bytes], settings: Optional[AnalysisSettings] = None) -> BinaryFindings:
    settings = settings or get_settings()
    started = time.perf_counter()
    if data is None:
        return _skip(path, SkipReason.MISSING_BINARY)
    try:
        image = load_elf(data, path)
    except UnsupportedArch as e:
        return _skip(path, SkipReason.UNSUPPORTED_ARCH, str(e))
    except MalformedElf as e:
        return _skip(path, SkipReason.MALFORMED_ELF, str(e))

    if image.is_static and image.stripped:
        return _skip(path, SkipReason.SKIPPED_STATIC, arch=image.arch.value)

    try:
        cfg = build_cfg(image)
        engine_for(cfg, settings.interprocedural_depth)
        binds = []
        for bind in extract_bind_addresses(cfg, image, settings.bind_apis):
            binds.append(
                BindFinding(
                    bind=bind,
                    cred_mods=tuple(extract_cred_mods(cfg, bind.callsite)),
                    close_rebind=detect_close_outside_cleanup(cfg, bind.callsite),
                )
            )
        reserved = extract_reserved_getenv(cfg, image, settings.getenv_apis)
        checks = classify_checks(cfg, extract_peer_checks(cfg, image), settings.process_name_lookup_symbols)
    except Exception as e:
        logger.exception(f"binary_analysis_failed path={path} error={e}")
        return BinaryFindings(path=path, arch=image.arch.value, skip_reason=SkipReason.ANALYSIS_ERROR)

    elapsed = time.perf_counter() - started
    logger.info(
        f"binary_analyzed path={path} arch={image.arch.value} functions={len(cfg.functions)} "
        f"binds={len(binds)} reserved={len(reserved)} checks={len(checks)} seconds={elapsed:.3f}"
    )
    return BinaryFindings(
        path=path,
        arch=image.arch.value,
        binds=tuple(binds),
        reserved=tuple(reserved),
        checks=tuple(checks),
        functions=len(cfg.functions),
        unresolved_calls=len(cfg.unresolved),
        undecodable=cfg.undecodable,
        seconds=elapsed,
    )
