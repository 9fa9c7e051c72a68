"""Immutable AST for adaptation rulesets.

Source positions are carried for diagnostics but excluded from equality, so
two trees compare equal whenever they have the same structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

Pos = Optional[Tuple[int, int]]

ARITHMETIC_OPS = ("+", "-", "*", "/")
COMPARISON_OPS = ("<", "<=", ">", ">=", "==", "!=")
LOGICAL_OPS = ("&&", "||")
FUNCTIONS = {"min": (2, None), "max": (2, None), "abs": (1, 1)}
ACTION_KINDS = ("set_servers", "add_servers", "set_dimmer", "add_dimmer")


@dataclass(frozen=True)
class Num:
    value: float
    pos: Pos = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Var:
    name: str
    pos: Pos = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "!"
    operand: "Expr"
    pos: Pos = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    pos: Pos = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: Tuple["Expr", ...]
    pos: Pos = field(default=None, compare=False, repr=False)


Expr = Union[Num, Var, Unary, Binary, Call]


@dataclass(frozen=True)
class Action:
    kind: str
    arg: Expr
    pos: Pos = field(default=None, compare=False, repr=False)

    @property
    def control(self) -> str:
        return "servers" if self.kind.endswith("servers") else "dimmer"

    @property
    def relative(self) -> bool:
        return self.kind.startswith("add_")


@dataclass(frozen=True)
class Def:
    name: str
    expr: Expr
    pos: Pos = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Rule:
    condition: Expr
    actions: Tuple[Action, ...]
    pos: Pos = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class RuleSet:
    defs: Tuple[Def, ...] = ()
    rules: Tuple[Rule, ...] = ()


def walk(expr: Expr):
    """Yield every node of an expression tree, parents first."""
    yield expr
    if isinstance(expr, Unary):
        yield from walk(expr.operand)
    elif isinstance(expr, Binary):
        yield from walk(expr.left)
        yield from walk(expr.right)
    elif isinstance(expr, Call):
        for arg in expr.args:
            yield from walk(arg)


def identifiers(expr: Expr) -> set[str]:
    return {node.name for node in walk(expr) if isinstance(node, Var)}
