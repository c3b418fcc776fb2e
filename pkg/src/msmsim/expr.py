"""Linear predictors over covariate histories and their small expression grammar.

Expressions are ordinary arithmetic over variable references:

    expit(-2 + 0.1*B + 0.02*C - beta*cum(A, 1))
    400*(L[-1] + 0.2*B - 0.5*S[-1] - A[-1])

``L`` is the current value, ``L[-m]`` the value m steps back, ``cum(A)`` the
running sum of A up to the current step (``cum(A, s)`` starts the sum at step
s).  Products of references are allowed.  Named parameters are substituted as
constants at parse time.  An outermost ``expit(...)`` or ``exp(...)`` becomes
the link.
"""

from __future__ import annotations

import ast
import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import expit

LINKS = ("identity", "expit", "exp")
_CONST_FUNCS = {"log": math.log, "exp": math.exp, "sqrt": math.sqrt, "log1p": math.log1p}
_RESERVED = {"expit", "exp", "log", "sqrt", "log1p", "cum"}


class ExpressionError(ValueError):
    """Malformed or inadmissible expression."""


@dataclass(frozen=True)
class Ref:
    """Value of a variable ``lag`` steps before the current one."""

    name: str
    lag: int = 0

    @property
    def label(self) -> str:
        return self.name if self.lag == 0 else f"{self.name}[-{self.lag}]"


@dataclass(frozen=True)
class Cum:
    """Running sum of a variable from step ``start`` through the current step."""

    name: str
    start: int = 0

    @property
    def label(self) -> str:
        return f"cum({self.name})" if self.start == 0 else f"cum({self.name}, {self.start})"


Factor = Union[Ref, Cum]
Monomial = tuple  # sorted tuple of factors; () is the constant monomial


def _factor_key(f: Factor):
    return (0, f.name, f.lag) if isinstance(f, Ref) else (1, f.name, f.start)


def monomial_label(m: Monomial) -> str:
    return "*".join(f.label for f in m) if m else "1"


def _fmt(x: float) -> str:
    r = repr(float(x))
    return r[:-2] if r.endswith(".0") else r


@dataclass(frozen=True)
class LinearPredictor:
    intercept: float = 0.0
    terms: tuple = ()  # ((monomial, coefficient), ...)
    link: str = "identity"

    def __post_init__(self):
        if self.link not in LINKS:
            raise ExpressionError(f"unknown link {self.link!r}")

    @classmethod
    def constant(cls, value: float) -> "LinearPredictor":
        return cls(float(value))

    @property
    def is_constant(self) -> bool:
        return not self.terms

    def factors(self) -> set:
        return {f for m, _ in self.terms for f in m}

    def monomials(self) -> list:
        return [m for m, _ in self.terms]

    def linear_part(self, history):
        eta = self.intercept
        for mono, coef in self.terms:
            val = 1.0
            for f in mono:
                val = val * resolve(f, history)
            eta = eta + coef * np.asarray(val, dtype=float)
        return eta

    def evaluate(self, history):
        eta = self.linear_part(history)
        if self.link == "expit":
            return expit(eta)
        if self.link == "exp":
            return np.exp(eta)
        return eta

    def __str__(self) -> str:
        parts = []
        if self.intercept != 0.0 or not self.terms:
            parts.append(_fmt(self.intercept))
        for mono, coef in self.terms:
            body = monomial_label(mono)
            if coef == 1.0:
                txt = body
            elif coef == -1.0:
                txt = "-" + body
            else:
                txt = f"{_fmt(coef)}*{body}"
            if parts:
                txt = "- " + txt[1:] if txt.startswith("-") else "+ " + txt
            parts.append(txt)
        inner = " ".join(parts)
        return inner if self.link == "identity" else f"{self.link}({inner})"


def resolve(factor: Factor, history):
    """Look a factor up in a history (mapping keyed by label, or an object with ``lookup``)."""
    if isinstance(history, Mapping):
        key = factor.label
        if key in history:
            return history[key]
        if isinstance(factor, Ref) and factor.lag == 0 and factor.name in history:
            return history[factor.name]
        raise ExpressionError(f"unresolved reference {key!r}")
    return history.lookup(factor)


# --- parsing -----------------------------------------------------------------

def _const(poly: dict):
    if any(m for m in poly if m):
        return None
    return poly.get((), 0.0)


def _add(a: dict, b: dict, sign: float = 1.0) -> dict:
    out = dict(a)
    for m, c in b.items():
        out[m] = out.get(m, 0.0) + sign * c
    return out


def _mul(a: dict, b: dict) -> dict:
    out: dict = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            m = tuple(sorted(ma + mb, key=_factor_key))
            out[m] = out.get(m, 0.0) + ca * cb
    return out


class _Parser:
    def __init__(self, params: Mapping | None):
        self.params = dict(params or {})

    def poly(self, node) -> dict:
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return {(): float(node.value)}
        if isinstance(node, ast.Name):
            if node.id in self.params:
                return {(): float(self.params[node.id])}
            if node.id in _RESERVED:
                raise ExpressionError(f"{node.id!r} is a function, not a variable")
            return {(Ref(node.id),): 1.0}
        if isinstance(node, ast.Subscript):
            return {(self._lagged(node),): 1.0}
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            p = self.poly(node.operand)
            return {m: -c for m, c in p.items()} if isinstance(node.op, ast.USub) else p
        if isinstance(node, ast.BinOp):
            left, right = self.poly(node.left), self.poly(node.right)
            if isinstance(node.op, ast.Add):
                return _add(left, right)
            if isinstance(node.op, ast.Sub):
                return _add(left, right, -1.0)
            if isinstance(node.op, ast.Mult):
                return _mul(left, right)
            if isinstance(node.op, ast.Div):
                d = _const(right)
                if d is None:
                    raise ExpressionError("division only by constants")
                if d == 0.0:
                    raise ExpressionError("division by zero")
                return {m: c / d for m, c in left.items()}
            if isinstance(node.op, ast.Pow):
                base, ex = _const(left), _const(right)
                if base is None or ex is None:
                    raise ExpressionError("powers only of constants")
                return {(): float(base ** ex)}
            raise ExpressionError(f"unsupported operator {type(node.op).__name__}")
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            fname = node.func.id
            if node.keywords:
                raise ExpressionError(f"{fname}() takes positional arguments only")
            if fname == "cum":
                return {(self._cum(node),): 1.0}
            if fname in _CONST_FUNCS:
                if len(node.args) != 1:
                    raise ExpressionError(f"{fname}() takes one argument")
                c = _const(self.poly(node.args[0]))
                if c is None:
                    raise ExpressionError(f"{fname}() of a non-constant is only allowed as the outer link")
                try:
                    return {(): float(_CONST_FUNCS[fname](c))}
                except ValueError as exc:
                    raise ExpressionError(f"{fname}({c}) is undefined") from exc
            raise ExpressionError(f"unknown function {fname!r}")
        raise ExpressionError(f"unsupported syntax: {ast.unparse(node)!r}")

    def _lagged(self, node: ast.Subscript) -> Ref:
        if not isinstance(node.value, ast.Name):
            raise ExpressionError("only variables can be indexed")
        idx = node.slice
        try:
            offset = ast.literal_eval(idx)
        except ValueError:
            raise ExpressionError(f"index of {node.value.id} must be an integer literal") from None
        if not isinstance(offset, int) or isinstance(offset, bool):
            raise ExpressionError(f"index of {node.value.id} must be an integer literal")
        if offset > 0:
            raise ExpressionError(f"future reference {node.value.id}[{offset}]")
        return Ref(node.value.id, -offset)

    def _cum(self, node: ast.Call) -> Cum:
        if not 1 <= len(node.args) <= 2 or not isinstance(node.args[0], ast.Name):
            raise ExpressionError("cum() expects a variable name and an optional start step")
        start = 0
        if len(node.args) == 2:
            start = ast.literal_eval(node.args[1])
            if not isinstance(start, int) or start < 0:
                raise ExpressionError("cum() start must be a nonnegative integer")
        return Cum(node.args[0].id, start)


def _to_predictor(poly: dict, link: str) -> LinearPredictor:
    intercept = float(poly.get((), 0.0))
    terms = tuple(
        (m, float(c)) for m, c in sorted(((m, c) for m, c in poly.items() if m), key=lambda mc: [_factor_key(f) for f in mc[0]])
        if c != 0.0
    )
    return LinearPredictor(intercept, terms, link)


def parse_node(node, params: Mapping | None = None) -> LinearPredictor:
    p = _Parser(params)
    if (
        isinstance(node, ast.Call)
        and isinstance(node.func, ast.Name)
        and node.func.id in ("expit", "exp")
        and len(node.args) == 1
        and not node.keywords
    ):
        inner = p.poly(node.args[0])
        c = _const(inner)
        if node.func.id == "exp" and c is not None:
            return LinearPredictor.constant(math.exp(c))
        return _to_predictor(inner, node.func.id)
    return _to_predictor(p.poly(node), "identity")


def parse_expression(text: str, params: Mapping | None = None) -> LinearPredictor:
    """Parse an expression string into a LinearPredictor."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    return parse_node(tree.body, params)


def canonical_text(text: str) -> str:
    """Whitespace-normalized form of an expression, keeping parameter names."""
    try:
        return ast.unparse(ast.parse(text.strip(), mode="eval"))
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
