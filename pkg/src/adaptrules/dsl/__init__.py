"""Closed condition-action language for adaptation rules."""

from .check import Diagnostic, RuleValidationError, check, validate
from .evaluate import ActionSet, evaluate
from .nodes import Action, Binary, Call, Def, Num, Rule, RuleSet, Unary, Var
from .parser import GRAMMAR, DSLSyntaxError, parse_expr, parse_ruleset
from .printer import print_expr, print_ruleset

__all__ = [
    "Action", "ActionSet", "Binary", "Call", "Def", "Diagnostic", "DSLSyntaxError",
    "GRAMMAR", "Num", "Rule", "RuleSet", "RuleValidationError", "Unary", "Var",
    "check", "evaluate", "parse_expr", "parse_ruleset", "print_expr", "print_ruleset",
    "validate",
]
