"""Findings produced by binary analysis."""

from enum import Enum
from typing import FrozenSet, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

SYMBOLIC = "SYMBOLIC"
UNDEFINED = "UNDEFINED"

ArgValue = Union[int, str]


class NamespaceHint(str, Enum):
    ABSTRACT = "abstract"
    FILESYSTEM = "filesystem"
    RESERVED_ENV = "reserved_env"
    UNKNOWN = "unknown"


class Confidence(str, Enum):
    EXACT = "exact"
    PARTIAL = "partial"
    SYMBOLIC = "symbolic"


class ExtractedBind(BaseModel):
    model_config = ConfigDict(frozen=True)

    callsite: int
    function: int = 0
    address_bytes: bytes = b""
    namespace_hint: NamespaceHint = NamespaceHint.UNKNOWN
    api: str = "bind"
    confidence: Confidence = Confidence.SYMBOLIC

    @model_validator(mode="after")
    def _hint_matches_bytes(self):
        leading_zero = self.address_bytes[:1] == b"\x00"
        if (self.namespace_hint == NamespaceHint.ABSTRACT) != leading_zero:
            raise ValueError("abstract hint requires a leading zero byte and vice versa")
        if self.namespace_hint == NamespaceHint.FILESYSTEM and not self.address_bytes.startswith(b"/"):
            raise ValueError("filesystem hint requires a leading '/'")
        return self


class ReservedLookup(BaseModel):
    """A reserved socket name found through an ``ANDROID_SOCKET_`` lookup."""

    model_config = ConfigDict(frozen=True)

    name: str
    callsite: int
    api: str = "getenv"


class CredModKind(str, Enum):
    UMASK = "umask"
    SETEUID = "seteuid"
    SETEGID = "setegid"
    CHMOD = "chmod"
    FCHMOD = "fchmod"
    CHOWN = "chown"
    FCHOWN = "fchown"


class BindPosition(str, Enum):
    BEFORE_BIND = "before_bind"
    AFTER_BIND = "after_bind"


BEFORE_BIND_KINDS = frozenset({CredModKind.UMASK, CredModKind.SETEUID, CredModKind.SETEGID})
AFTER_BIND_KINDS = frozenset({CredModKind.CHMOD, CredModKind.FCHMOD, CredModKind.CHOWN, CredModKind.FCHOWN})


class CredModCall(BaseModel):
    """A credential-changing call around a bind site.

    ``args`` excludes the path or descriptor being changed; the path of
    ``chmod``/``chown`` is kept in ``target``.
    """

    model_config = ConfigDict(frozen=True)

    kind: CredModKind
    args: Tuple[ArgValue, ...] = ()
    position: BindPosition
    callsite: int
    target: Optional[ArgValue] = None

    @model_validator(mode="after")
    def _position_matches_kind(self):
        allowed = BEFORE_BIND_KINDS if self.position == BindPosition.BEFORE_BIND else AFTER_BIND_KINDS
        if self.kind not in allowed:
            raise ValueError(f"{self.kind.value} cannot be {self.position.value}")
        return self

    @property
    def is_symbolic(self) -> bool:
        return any(a == SYMBOLIC for a in self.args)


class Cred(str, Enum):
    PID = "PID"
    UID = "UID"
    GID = "GID"


class UsageKind(str, Enum):
    COMPARISON = "comparison"
    FUNCTION_ARG = "function_arg"


class Usage(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: UsageKind
    cred: Cred
    address: int = 0
    comparand: Optional[ArgValue] = None
    callee: Optional[str] = None

    @model_validator(mode="after")
    def _comparand_only_for_comparisons(self):
        if self.kind == UsageKind.COMPARISON and self.comparand is None:
            raise ValueError("comparison usages need a comparand (constant or UNDEFINED)")
        if self.kind == UsageKind.FUNCTION_ARG and self.comparand is not None:
            raise ValueError("function_arg usages carry no comparand")
        return self


class PeerCredCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    callsite: int
    creds_used: FrozenSet[Cred]
    usages: Tuple[Usage, ...]

    @field_validator("creds_used")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("a peer-credential check must use at least one field")
        return value


class CheckStrength(str, Enum):
    NONE = "none"
    SPOOFABLE = "spoofable"
    WEAK = "weak"
    SECURE = "secure"


# none < spoofable < weak < secure
STRENGTH_ORDER = {
    CheckStrength.NONE: 0,
    CheckStrength.SPOOFABLE: 1,
    CheckStrength.WEAK: 2,
    CheckStrength.SECURE: 3,
}


class ClassifiedCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    check: PeerCredCheck
    strength: CheckStrength
