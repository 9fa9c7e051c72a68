"""Canonical pretty-printer. Emits the fewest parentheses the grammar needs."""

from __future__ import annotations

from .nodes import Action, Binary, Call, Expr, Num, Rule, RuleSet, Unary, Var

_PRECEDENCE = {
    "||": 1,
    "&&": 2,
    "<": 3, "<=": 3, ">": 3, ">=": 3, "==": 3, "!=": 3,
    "+": 4, "-": 4,
    "*": 5, "/": 5,
}
_UNARY = 6
_ATOM = 7


def _prec(expr: Expr) -> int:
    if isinstance(expr, Binary):
        return _PRECEDENCE[expr.op]
    if isinstance(expr, Unary):
        return _UNARY
    return _ATOM


def format_number(value: float) -> str:
    return repr(float(value))


def print_expr(expr: Expr) -> str:
    if isinstance(expr, Num):
        # literals are non-negative; the parser reads "-1" as Unary("-", Num(1))
        return format_number(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(print_expr(a) for a in expr.args)})"
    if isinstance(expr, Unary):
        inner = print_expr(expr.operand)
        if _prec(expr.operand) < _UNARY:
            inner = f"({inner})"
        return f"{expr.op}{inner}"
    if isinstance(expr, Binary):
        p = _PRECEDENCE[expr.op]
        left = print_expr(expr.left)
        if _prec(expr.left) < p:
            left = f"({left})"
        right = print_expr(expr.right)
        # all binary operators are left-associative
        if _prec(expr.right) <= p:
            right = f"({right})"
        return f"{left} {expr.op} {right}"
    raise TypeError(f"not an expression node: {expr!r}")


def print_action(action: Action) -> str:
    return f"{action.kind}({print_expr(action.arg)})"


def print_rule(rule: Rule) -> str:
    actions = ", ".join(print_action(a) for a in rule.actions)
    return f"when {print_expr(rule.condition)} then {actions};"


def print_ruleset(ruleset: RuleSet) -> str:
    lines = [f"let {d.name} = {print_expr(d.expr)};" for d in ruleset.defs]
    if ruleset.defs and ruleset.rules:
        lines.append("")
    lines.extend(print_rule(r) for r in ruleset.rules)
    return "\n".join(lines) + "\n" if lines else ""
