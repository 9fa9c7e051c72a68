from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Union

from .nodes import Binary, Call, Expr, Num, RuleSet, Unary, Var

Value = Union[float, bool]


@dataclass(frozen=True)
class ActionSet:
    """Resolved control targets for one interval.

    ``servers`` is the requested provisioned count (active plus booting),
    rounded half away from zero and floored at 0; the simulator clamps it to
    the pool limits. ``dimmer`` is unclamped. When ``error`` is set both
    targets are None.
    """

    servers: Optional[int] = None
    dimmer: Optional[float] = None
    fired: tuple[int, ...] = ()
    error: Optional[str] = None

    @property
    def empty(self) -> bool:
        return self.servers is None and self.dimmer is None


class EvalError(ArithmeticError):
    pass


def _eval(expr: Expr, env: Mapping[str, Value]) -> Value:
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        try:
            return env[expr.name]
        except KeyError:
            raise EvalError(f"unknown variable {expr.name}") from None
    if isinstance(expr, Unary):
        v = _eval(expr.operand, env)
        return -v if expr.op == "-" else not v
    if isinstance(expr, Call):
        args = [_eval(a, env) for a in expr.args]
        if expr.func == "min":
            return float(min(args))
        if expr.func == "max":
            return float(max(args))
        if expr.func == "abs":
            return abs(args[0])
        raise EvalError(f"unknown function {expr.func}")
    if isinstance(expr, Binary):
        op = expr.op
        if op == "&&":
            return bool(_eval(expr.left, env)) and bool(_eval(expr.right, env))
        if op == "||":
            return bool(_eval(expr.left, env)) or bool(_eval(expr.right, env))
        a, b = _eval(expr.left, env), _eval(expr.right, env)
        if op == "+":
            r = a + b
        elif op == "-":
            r = a - b
        elif op == "*":
            r = a * b
        elif op == "/":
            if b == 0:
                raise EvalError("division by zero")
            r = a / b
        elif op == "<":
            return a < b
        elif op == "<=":
            return a <= b
        elif op == ">":
            return a > b
        elif op == ">=":
            return a >= b
        elif op == "==":
            return a == b
        elif op == "!=":
            return a != b
        else:
            raise EvalError(f"unknown operator {op}")
        if not math.isfinite(r):
            raise EvalError("non-finite value")
        return float(r)
    raise EvalError(f"not an expression node: {expr!r}")


def _round_count(x: float) -> int:
    return max(0, int(math.floor(x + 0.5)))


def evaluate(ruleset: RuleSet, snapshot) -> ActionSet:
    """Evaluate every rule top-down against one metrics snapshot.

    ``snapshot`` is a MetricsSnapshot or any name -> number mapping. Firing
    rules write their actions in textual order, last writer wins per control;
    ``add_*`` actions build on the target so far, or on the observed value
    when no earlier action set one. Never raises: failures come back as an
    empty ActionSet carrying the message.
    """
    env: dict[str, Value] = dict(snapshot.as_dict() if hasattr(snapshot, "as_dict") else snapshot)
    where = ""
    try:
        for d in ruleset.defs:
            where = f"def {d.name}"
            env[d.name] = _eval(d.expr, env)
        base_servers = float(env.get("servers", 0.0)) + float(env.get("booting_servers", 0.0))
        base_dimmer = float(env.get("dimmer", 0.0))
        servers: Optional[float] = None
        dimmer: Optional[float] = None
        fired = []
        for i, rule in enumerate(ruleset.rules, start=1):
            where = f"rule {i} condition"
            if not _eval(rule.condition, env):
                continue
            fired.append(i)
            for j, action in enumerate(rule.actions, start=1):
                where = f"rule {i} action {j}"
                v = float(_eval(action.arg, env))
                if action.control == "servers":
                    servers = (servers if servers is not None else base_servers) + v if action.relative else v
                    if not math.isfinite(servers):
                        raise EvalError("non-finite value")
                else:
                    dimmer = (dimmer if dimmer is not None else base_dimmer) + v if action.relative else v
                    if not math.isfinite(dimmer):
                        raise EvalError("non-finite value")
    except EvalError as exc:
        return ActionSet(error=f"{exc} in {where}")
    except (TypeError, OverflowError, ValueError) as exc:
        return ActionSet(error=f"evaluation failed in {where}: {exc}")
    return ActionSet(
        servers=None if servers is None else _round_count(servers),
        dimmer=dimmer,
        fired=tuple(fired),
    )
