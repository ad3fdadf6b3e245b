"""Exception hierarchy for the audit pipeline."""

from typing import Optional


class UdsAuditError(Exception):
    """Base class for every error raised by udsaudit."""


class MalformedManifest(UdsAuditError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"manifest line {line}: {reason}")


class MissingPolicy(UdsAuditError):
    pass


class MissingInitRc(UdsAuditError):
    pass


class DuplicatePath(UdsAuditError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"path already present: {path}")


class NoMatchingContext(UdsAuditError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"no file_contexts rule matches {path}")


class PolicySyntaxError(UdsAuditError):
    def __init__(self, line: int, statement: str, reason: Optional[str] = None):
        self.line = line
        self.statement = statement
        detail = f" ({reason})" if reason else ""
        super().__init__(f"policy line {line}: malformed statement {statement!r}{detail}")


class UnsupportedArch(UdsAuditError):
    pass


class MalformedElf(UdsAuditError):
    pass


class UnclassifiableAddress(UdsAuditError):
    pass


class UnknownPermission(UdsAuditError):
    def __init__(self, permission: str):
        self.permission = permission
        super().__init__(f"unknown permission: {permission}")
