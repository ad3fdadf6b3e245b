"""Socket endpoint record shared by init RC extraction, evaluation and reporting."""

from enum import Enum
from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, model_validator

from udsaudit.binanalysis.records import ClassifiedCheck
from udsaudit.firmware import FsEntry

RESERVED_SOCKET_DIR = "/dev/socket"


class Namespace(str, Enum):
    FILESYSTEM = "FILESYSTEM"
    RESERVED = "RESERVED"
    ABSTRACT = "ABSTRACT"


class Provenance(str, Enum):
    INITRC = "initrc"
    BINARY_BIND = "binary_bind"
    BINARY_GETENV = "binary_getenv"


def reserved_socket_path(name: str) -> str:
    return f"{RESERVED_SOCKET_DIR}/{name}"


class SocketEndpoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    address: str
    namespace: Namespace
    owner_binary: str
    owner_domain: str = ""
    file_entry: Optional[FsEntry] = None
    checks: Tuple[ClassifiedCheck, ...] = ()
    provenance: Provenance
    service: Optional[str] = None
    reserved_dir: bool = False
    close_rebind: bool = False
    dac_indeterminate: bool = False

    @model_validator(mode="after")
    def _namespace_shape(self):
        if self.namespace == Namespace.ABSTRACT and self.file_entry is not None:
            raise ValueError("abstract sockets have no file entry")
        if (
            self.namespace == Namespace.RESERVED
            and self.file_entry is not None
            and not self.file_entry.path.startswith(RESERVED_SOCKET_DIR + "/")
        ):
            raise ValueError("reserved sockets live under /dev/socket")
        return self

    @property
    def path(self) -> Optional[str]:
        if self.file_entry is not None:
            return self.file_entry.path
        if self.namespace == Namespace.RESERVED:
            return reserved_socket_path(self.address)
        if self.namespace == Namespace.FILESYSTEM:
            return self.address
        return None

    @property
    def sort_key(self) -> Tuple[str, str]:
        return (self.owner_binary, self.address)
