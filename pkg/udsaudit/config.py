"""Analysis settings.

Defaults live here; the CLI layers flag values on top and re-validates.
"""

from functools import lru_cache
from pathlib import Path
from typing import FrozenSet, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

GROUP_MAPPED_PERMISSIONS: Tuple[str, ...] = (
    "BLUETOOTH",
    "BLUETOOTH_ADMIN",
    "INTERNET",
    "MANAGE_EXTERNAL_STORAGE",
)

DEFAULT_WRITE_PERMS = frozenset({"write", "append", "connectto", "sendto", "create", "setattr", "bind"})
DEFAULT_READ_PERMS = frozenset({"read", "getattr", "recvfrom", "accept", "listen", "getopt"})

DEFAULT_BIND_APIS: Tuple[str, ...] = (
    "bind",
    "socket_local_server",
    "socket_local_server_bind",
    "FrameworkListener",
    "SocketListener",
)
DEFAULT_GETENV_APIS: Tuple[str, ...] = ("getenv", "android_get_control_socket")


class AnalysisSettings(BaseModel):
    """Knobs for a single pipeline run."""

    model_config = ConfigDict(frozen=True)

    subject: str = "untrusted_app"
    hops: int = Field(default=1, ge=1)
    strict: bool = False
    jobs: int = Field(default=1, ge=1)
    canonical: bool = False
    perm_set: FrozenSet[str] = frozenset(GROUP_MAPPED_PERMISSIONS)

    untrusted_app_uid: int = Field(default=10123, ge=10000)
    default_label: str = "u:object_r:unlabeled:s0"
    default_umask: int = Field(default=0o077, ge=0, le=0o777)

    write_perms: FrozenSet[str] = DEFAULT_WRITE_PERMS
    read_perms: FrozenSet[str] = DEFAULT_READ_PERMS

    interprocedural_depth: int = Field(default=3, ge=0)
    bind_apis: Tuple[str, ...] = DEFAULT_BIND_APIS
    getenv_apis: Tuple[str, ...] = DEFAULT_GETENV_APIS
    process_name_lookup_symbols: FrozenSet[str] = frozenset(
        {"get_process_name", "getProcessName", "get_task_comm"}
    )

    @field_validator("perm_set", mode="before")
    @classmethod
    def _normalize_perm_set(cls, value):
        if isinstance(value, str):
            value = [p for p in value.split(",") if p.strip()]
        return frozenset(p.strip().removeprefix("android.permission.") for p in value)


@lru_cache()
def get_settings() -> AnalysisSettings:
    return AnalysisSettings()


def load_settings(path: Path) -> AnalysisSettings:
    """Read a JSON override file; unspecified fields keep their defaults."""
    return AnalysisSettings.model_validate_json(Path(path).read_text(encoding="utf-8"))


def read_symbol_list(path: Path) -> Tuple[str, ...]:
    """One symbol per line, ``#`` comments allowed."""
    symbols = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line and line not in symbols:
            symbols.append(line)
    return tuple(symbols)
