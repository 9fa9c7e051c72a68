"""Lexer and recursive-descent parser for the rule language (see ``GRAMMAR``)."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .nodes import (
    ACTION_KINDS,
    Action,
    Binary,
    Call,
    Def,
    Expr,
    Num,
    Rule,
    RuleSet,
    Unary,
    Var,
)

GRAMMAR = """\
ruleset  = { def } { rule } ;
def      = "let" IDENT "=" expr ";" ;
rule     = "when" expr "then" action { "," action } ";" ;
action   = ( "set_servers" | "add_servers" | "set_dimmer" | "add_dimmer" ) "(" expr ")" ;
expr     = or ;
or       = and { "||" and } ;
and      = cmp { "&&" cmp } ;
cmp      = add { ( "<" | "<=" | ">" | ">=" | "==" | "!=" ) add } ;
add      = mul { ( "+" | "-" ) mul } ;
mul      = unary { ( "*" | "/" ) unary } ;
unary    = ( "-" | "!" ) unary | primary ;
primary  = NUMBER | IDENT | IDENT "(" expr { "," expr } ")" | "(" expr ")" ;
NUMBER   = digit { digit } [ "." { digit } ] [ ( "e" | "E" ) [ "+" | "-" ] digit { digit } ] ;
IDENT    = ( letter | "_" ) { letter | digit | "_" } ;
(* "#" starts a comment that runs to the end of the line *)"""

KEYWORDS = {"let", "when", "then"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>&&|\|\||<=|>=|==|!=|[-+*/<>!=(),;])
    """,
    re.VERBOSE,
)


class DSLSyntaxError(ValueError):
    """Lexical or syntax error with a 1-based source position."""

    def __init__(self, message: str, line: int, column: int, token: str | None = None):
        self.message = message
        self.line = line
        self.column = column
        self.token = token
        super().__init__(f"line {line}, column {column}: {message}")


@dataclass(frozen=True)
class Token:
    kind: str  # number, ident, keyword, op, eof
    text: str
    line: int
    column: int

    def describe(self) -> str:
        return "end of input" if self.kind == "eof" else repr(self.text)


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, i = 1, 0, 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        col = i - line_start + 1
        if m is None:
            raise DSLSyntaxError(f"unexpected character {text[i]!r}", line, col, text[i])
        kind = m.lastgroup
        value = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "ident":
            tokens.append(Token("keyword" if value in KEYWORDS else "ident", value, line, col))
        elif kind in ("number", "op"):
            tokens.append(Token(kind, value, line, col))
        i = m.end()
    tokens.append(Token("eof", "", line, len(text) - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        if tok.kind != "eof":
            self.i += 1
        return tok

    def at(self, text: str) -> bool:
        return self.tok.kind in ("op", "keyword") and self.tok.text == text

    def fail(self, expected: str) -> DSLSyntaxError:
        tok = self.tok
        return DSLSyntaxError(f"expected {expected}, found {tok.describe()}", tok.line, tok.column, tok.text or None)

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise self.fail(repr(text))
        return self.advance()

    def ruleset(self) -> RuleSet:
        defs, rules = [], []
        while self.at("let"):
            defs.append(self.definition())
        while self.at("when"):
            rules.append(self.rule())
        if self.tok.kind != "eof":
            raise self.fail("'let' or 'when'" if not rules else "'when' or end of input")
        return RuleSet(tuple(defs), tuple(rules))

    def definition(self) -> Def:
        start = self.expect("let")
        if self.tok.kind != "ident":
            raise self.fail("variable name")
        name = self.advance().text
        self.expect("=")
        expr = self.expr()
        self.expect(";")
        return Def(name, expr, (start.line, start.column))

    def rule(self) -> Rule:
        start = self.expect("when")
        cond = self.expr()
        self.expect("then")
        actions = [self.action()]
        while self.at(","):
            self.advance()
            actions.append(self.action())
        self.expect(";")
        return Rule(cond, tuple(actions), (start.line, start.column))

    def action(self) -> Action:
        tok = self.tok
        if tok.kind != "ident" or tok.text not in ACTION_KINDS:
            raise self.fail("action (" + ", ".join(ACTION_KINDS) + ")")
        self.advance()
        self.expect("(")
        arg = self.expr()
        self.expect(")")
        return Action(tok.text, arg, (tok.line, tok.column))

    def expr(self) -> Expr:
        return self._binary(0)

    _LEVELS = (("||",), ("&&",), ("<", "<=", ">", ">=", "==", "!="), ("+", "-"), ("*", "/"))

    def _binary(self, level: int) -> Expr:
        if level == len(self._LEVELS):
            return self.unary()
        left = self._binary(level + 1)
        while self.tok.kind == "op" and self.tok.text in self._LEVELS[level]:
            op = self.advance()
            right = self._binary(level + 1)
            left = Binary(op.text, left, right, (op.line, op.column))
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text in ("-", "!"):
            op = self.advance()
            return Unary(op.text, self.unary(), (op.line, op.column))
        return self.primary()

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            value = float(tok.text)
            if not math.isfinite(value):
                raise DSLSyntaxError(f"number out of range: {tok.text}", tok.line, tok.column, tok.text)
            return Num(value, (tok.line, tok.column))
        if tok.kind == "ident":
            self.advance()
            if not self.at("("):
                return Var(tok.text, (tok.line, tok.column))
            self.advance()
            args = [self.expr()]
            while self.at(","):
                self.advance()
                args.append(self.expr())
            self.expect(")")
            return Call(tok.text, tuple(args), (tok.line, tok.column))
        if self.at("("):
            self.advance()
            inner = self.expr()
            self.expect(")")
            return inner
        raise self.fail("expression")


def parse_ruleset(text: str) -> RuleSet:
    """Parse DSL source into a :class:`RuleSet`; raises :class:`DSLSyntaxError`."""
    return _Parser(text).ruleset()


def parse_expr(text: str) -> Expr:
    p = _Parser(text)
    expr = p.expr()
    if p.tok.kind != "eof":
        raise p.fail("end of input")
    return expr
