"""Static validation: name resolution and boolean/numeric type checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, Optional

from .nodes import (
    ARITHMETIC_OPS,
    COMPARISON_OPS,
    FUNCTIONS,
    LOGICAL_OPS,
    Binary,
    Call,
    Expr,
    Num,
    Pos,
    RuleSet,
    Unary,
    Var,
)

NUM = "number"
BOOL = "boolean"


@dataclass(frozen=True)
class Diagnostic:
    message: str
    line: Optional[int] = None
    column: Optional[int] = None

    def __str__(self) -> str:
        if self.line is None:
            return self.message
        return f"line {self.line}, column {self.column}: {self.message}"


class RuleValidationError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


def _diag(message: str, pos: Pos) -> Diagnostic:
    return Diagnostic(message, *(pos or (None, None)))


class _Checker:
    def __init__(self, env: dict[str, str]):
        self.env = env
        self.diagnostics: list[Diagnostic] = []

    def error(self, message: str, pos: Pos) -> None:
        self.diagnostics.append(_diag(message, pos))

    def infer(self, expr: Expr) -> Optional[str]:
        """Return the type of ``expr``, or None when an error was reported below it."""
        if isinstance(expr, Num):
            return NUM
        if isinstance(expr, Var):
            if expr.name not in self.env:
                self.error(f"unknown variable {expr.name}", expr.pos)
                return None
            return self.env[expr.name]
        if isinstance(expr, Call):
            arg_types = [self.infer(a) for a in expr.args]
            if expr.func not in FUNCTIONS:
                self.error(f"unknown function {expr.func}", expr.pos)
                return None
            lo, hi = FUNCTIONS[expr.func]
            if len(expr.args) < lo or (hi is not None and len(expr.args) > hi):
                want = f"exactly {lo}" if lo == hi else f"at least {lo}"
                self.error(f"{expr.func} takes {want} argument(s), got {len(expr.args)}", expr.pos)
            if BOOL in arg_types:
                self.error(f"{expr.func} arguments must be numeric", expr.pos)
            return NUM
        if isinstance(expr, Unary):
            t = self.infer(expr.operand)
            want = NUM if expr.op == "-" else BOOL
            if t is not None and t != want:
                self.error(f"operand of unary '{expr.op}' must be {want}", expr.pos)
            return want
        if isinstance(expr, Binary):
            lt, rt = self.infer(expr.left), self.infer(expr.right)
            if expr.op in ARITHMETIC_OPS:
                operand, result = NUM, NUM
            elif expr.op in LOGICAL_OPS:
                operand, result = BOOL, BOOL
            elif expr.op in COMPARISON_OPS:
                result = BOOL
                if expr.op in ("==", "!=") and lt == rt == BOOL:
                    return BOOL
                operand = NUM
            else:
                self.error(f"unknown operator {expr.op}", expr.pos)
                return None
            for side, t in (("left", lt), ("right", rt)):
                if t is not None and t != operand:
                    self.error(f"{side} operand of '{expr.op}' must be {operand}", expr.pos)
            return result
        raise TypeError(f"not an expression node: {expr!r}")


def validate(ruleset: RuleSet, catalog: Collection[str]) -> list[Diagnostic]:
    """Check a ruleset against the observable variable catalog.

    Returns an empty list when the ruleset is valid. Defs may be numeric or
    boolean; each must reference only catalog variables or earlier defs.
    """
    env = {name: NUM for name in catalog}
    checker = _Checker(env)
    seen_defs: set[str] = set()
    for d in ruleset.defs:
        t = checker.infer(d.expr)
        if d.name in seen_defs:
            checker.error(f"duplicate definition {d.name}", d.pos)
        elif d.name in catalog:
            checker.error(f"definition {d.name} shadows an observed variable", d.pos)
        else:
            seen_defs.add(d.name)
            # a def with a type error still resolves, to avoid cascading unknown-variable noise
            env[d.name] = t or NUM
    if not ruleset.rules:
        checker.error("ruleset must contain at least one rule", None)
    for i, rule in enumerate(ruleset.rules, start=1):
        t = checker.infer(rule.condition)
        if t is not None and t != BOOL:
            checker.error(f"condition must be boolean (rule {i})", rule.pos)
        for action in rule.actions:
            t = checker.infer(action.arg)
            if t is not None and t != NUM:
                checker.error(f"argument of {action.kind} must be numeric (rule {i})", action.pos)
    return checker.diagnostics


def check(ruleset: RuleSet, catalog: Collection[str]) -> RuleSet:
    """Return ``ruleset`` unchanged or raise :class:`RuleValidationError`."""
    diagnostics = validate(ruleset, catalog)
    if diagnostics:
        raise RuleValidationError(diagnostics)
    return ruleset
