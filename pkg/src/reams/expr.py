"""Parser and evaluator for the answer-expression grammar.

The grammar covers what expected answers and candidate outputs actually use:
numbers, the constants pi and e, declared variables, the four arithmetic
operators plus ``^`` for powers, unary minus, and the functions sqrt, exp,
log, sin, cos, tan, abs, and factorial. See docs/grammar.md for the exact
token set.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Union

__all__ = ["Expr", "ExprError", "evaluate", "free_variables", "parse_expression"]


class ExprError(ValueError):
    """Raised when an expression fails to tokenize, parse, or respect arity."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Const:
    name: str  # pi | e


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * / ^
    left: "Expr"
    right: "Expr"


Expr = Union[Num, Const, Var, Call, Neg, BinOp]

CONSTANTS = {"pi": math.pi, "e": math.e}
FUNCTIONS = ("sqrt", "exp", "log", "sin", "cos", "tan", "abs", "factorial")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?|\.\d+)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()])"
    r")"
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens: list[tuple[str, str]] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            rest = text[pos:].lstrip()
            if not rest:
                break
            raise ExprError(f"unexpected character {rest[0]!r} at position {pos}")
        pos = m.end()
        if m.lastgroup == "number":
            tokens.append(("number", m.group("number")))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group("name")))
        elif m.group("op"):
            op = m.group("op")
            tokens.append(("op", "^" if op == "**" else op))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]], variables: frozenset[str]):
        self.tokens = tokens
        self.pos = 0
        self.variables = variables

    def peek(self) -> tuple[str, str] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise ExprError("unexpected end of expression")
        self.pos += 1
        return tok

    def expect(self, value: str) -> None:
        tok = self.next()
        if tok != ("op", value):
            raise ExprError(f"expected {value!r}, found {tok[1]!r}")

    def parse(self) -> Expr:
        node = self.expression()
        if self.peek() is not None:
            raise ExprError(f"trailing input starting at {self.peek()[1]!r}")
        return node

    def expression(self) -> Expr:
        node = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            op = self.next()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.peek() in (("op", "*"), ("op", "/")):
            op = self.next()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Expr:
        node = self.unary()
        if self.peek() == ("op", "^"):
            self.next()
            # right-associative: 2^3^2 == 2^(3^2)
            return BinOp("^", node, self.factor())
        return node

    def unary(self) -> Expr:
        if self.peek() == ("op", "-"):
            self.next()
            return Neg(self.unary())
        if self.peek() == ("op", "+"):
            self.next()
            return self.unary()
        return self.primary()

    def primary(self) -> Expr:
        kind, value = self.next()
        if kind == "number":
            return Num(float(value))
        if kind == "name":
            if self.peek() == ("op", "("):
                if value not in FUNCTIONS:
                    raise ExprError(f"unknown function {value!r}")
                self.next()
                arg = self.expression()
                self.expect(")")
                return Call(value, arg)
            if value in CONSTANTS:
                return Const(value)
            if value in self.variables:
                return Var(value)
            raise ExprError(f"unknown name {value!r}")
        if (kind, value) == ("op", "("):
            node = self.expression()
            self.expect(")")
            return node
        raise ExprError(f"unexpected token {value!r}")


def parse_expression(text: str, variables: Iterable[str] = ()) -> Expr:
    """Parse ``text`` into an expression tree.

    Names other than pi, e, the function names, and the declared
    ``variables`` are rejected.
    """
    if not text or not text.strip():
        raise ExprError("empty expression")
    tokens = _tokenize(text)
    if not tokens:
        raise ExprError("empty expression")
    return _Parser(tokens, frozenset(variables)).parse()


def free_variables(node: Expr) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Call):
        return free_variables(node.arg)
    if isinstance(node, Neg):
        return free_variables(node.operand)
    if isinstance(node, BinOp):
        return free_variables(node.left) | free_variables(node.right)
    return set()


def _apply(func: str, x: float) -> float:
    if func == "sqrt":
        return math.sqrt(x)
    if func == "exp":
        return math.exp(x)
    if func == "log":
        return math.log(x)
    if func == "sin":
        return math.sin(x)
    if func == "cos":
        return math.cos(x)
    if func == "tan":
        return math.tan(x)
    if func == "abs":
        return abs(x)
    # factorial, generalized through the gamma function so sampled
    # non-integer points stay evaluable; poles surface as non-finite.
    return math.gamma(x + 1.0)


def evaluate(node: Expr, env: dict[str, float] | None = None) -> float:
    """Evaluate an expression tree; domain errors come back as NaN.

    Returning NaN (rather than raising) lets equivalence sampling treat
    poles and out-of-domain points uniformly as "resample here". An unbound
    variable is a caller bug, not a domain error, and still raises.
    """
    env = env or {}
    try:
        return _eval(node, env)
    except ExprError:
        raise
    except (ValueError, ArithmeticError):
        return math.nan


def _eval(node: Expr, env: dict[str, float]) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Const):
        return CONSTANTS[node.name]
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise ExprError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, Call):
        return _apply(node.func, _eval(node.arg, env))
    left = _eval(node.left, env)
    right = _eval(node.right, env)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    if node.op == "/":
        return left / right
    # "^": real powers only; fractional powers of negatives are a domain error
    result = left ** right
    if isinstance(result, complex):
        raise ValueError("complex power")
    return result
