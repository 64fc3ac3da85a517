"""Exception hierarchy shared by the parser, model, solver and oracle."""

from __future__ import annotations


class WdnError(Exception):
    """Base class for every error raised by this package."""


class ParseError(WdnError):
    """Problems reading `.inp` text."""


class MalformedRecord(ParseError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DuplicateId(ParseError):
    def __init__(self, ident: str, line: int | None = None):
        self.ident = ident
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate id {ident!r}{where}")


class DanglingReference(ParseError):
    def __init__(self, link: str, node: str, line: int | None = None):
        self.link = link
        self.node = node
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"link {link!r} references unknown node {node!r}{where}")


class UnknownUnit(ParseError):
    pass


class PumpCurveUnderdetermined(ParseError):
    pass


class ValidationError(WdnError):
    """A network failed structural or parameter checks."""


class NonPositiveDimension(ValidationError):
    pass


class NegativeFlow(WdnError):
    pass


class ClosedValve(WdnError):
    pass


class DimensionMismatch(WdnError):
    pass


class SingularSystem(WdnError):
    def __init__(self, message: str, rows: list[str] | None = None):
        self.rows = list(rows or [])
        if self.rows:
            shown = ", ".join(self.rows[:20])
            more = "" if len(self.rows) <= 20 else f" (+{len(self.rows) - 20} more)"
            message = f"{message}; implicated rows: {shown}{more}"
        super().__init__(message)


class Diverged(WdnError):
    pass


class NewtonStall(WdnError):
    pass


class InfeasibleSpec(WdnError):
    pass
