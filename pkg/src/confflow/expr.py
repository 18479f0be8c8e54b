"""A tiny expression language for coefficient data on [0, L].

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | 'x' | 'pi' | FUNC '(' expr ')' | '(' expr ')'

with FUNC one of sin, cos, exp, tanh, cosh, log.  Evaluation is vectorized
over numpy arrays and every node supports symbolic differentiation in x.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

FUNCTIONS = ("sin", "cos", "exp", "tanh", "cosh", "log")


class ExprError(ConfigError):
    """Parse or evaluation failure; ``column`` is 1-based when known."""

    def __init__(self, message, column=None):
        if column is not None:
            message = f"{message} (column {column})"
        super().__init__(message)
        self.column = column


class Node:
    __slots__ = ()

    def __call__(self, x):
        return evaluate(self, x)


@dataclass(frozen=True)
class Num(Node):
    value: float

    def __str__(self):
        return repr(float(self.value))


@dataclass(frozen=True)
class Var(Node):
    def __str__(self):
        return "x"


@dataclass(frozen=True)
class Neg(Node):
    arg: Node

    def __str__(self):
        return f"(-{self.arg})"


@dataclass(frozen=True)
class Bin(Node):
    op: str
    left: Node
    right: Node

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Call(Node):
    name: str
    arg: Node

    def __str__(self):
        return f"{self.name}({self.arg})"


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text):
    pos = 0
    out = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprError(f"unexpected character {text[pos + bad]!r}", pos + bad + 1)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    out.append(("end", "", len(text) + 1))
    return out


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, value=None):
        tok = self.tokens[self.i]
        if value is not None and tok[1] != value:
            found = tok[1] or "end of input"
            raise ExprError(f"expected {value!r}, found {found!r}", tok[2])
        self.i += 1
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExprError(f"unexpected token {tok[1]!r}", tok[2])
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        kind, value, col = self.peek()
        if kind == "num":
            self.take()
            return Num(float(value))
        if kind == "name":
            self.take()
            if value == "x":
                return Var()
            if value == "pi":
                return Num(math.pi)
            if value in FUNCTIONS:
                self.take("(")
                arg = self.expr()
                self.take(")")
                return Call(value, arg)
            raise ExprError(f"unknown name {value!r}", col)
        if value == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        raise ExprError(f"unexpected {value or 'end of input'!r}", col)


def parse(text: str) -> Node:
    """Parse ``text`` into an expression tree."""
    if not isinstance(text, str) or not text.strip():
        raise ExprError("empty expression")
    return _Parser(text).parse()


_NUMPY = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "cosh": np.cosh,
    "log": np.log,
}


def _eval(node, x):
    if isinstance(node, Num):
        return np.full_like(x, node.value)
    if isinstance(node, Var):
        return x
    if isinstance(node, Neg):
        return -_eval(node.arg, x)
    if isinstance(node, Call):
        arg = _eval(node.arg, x)
        if node.name == "log" and np.any(arg <= 0):
            raise ExprError("log of a non-positive value")
        return _NUMPY[node.name](arg)
    left = _eval(node.left, x)
    right = _eval(node.right, x)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    if node.op == "/":
        if np.any(right == 0):
            raise ExprError("division by zero")
        return left / right
    if np.any((left < 0) & (right != np.round(right))):
        raise ExprError("negative base raised to a non-integer power")
    if np.any((left == 0) & (right < 0)):
        raise ExprError("zero raised to a negative power")
    return np.power(left, right)


def evaluate(node: Node, x):
    """Evaluate ``node`` at ``x`` (scalar or array); domain errors raise."""
    arr = np.asarray(x, dtype=float)
    with np.errstate(all="ignore"):
        out = _eval(node, np.atleast_1d(arr).copy())
    if not np.all(np.isfinite(out)):
        raise ExprError("expression evaluates to a non-finite value")
    return out.reshape(arr.shape) if arr.ndim else float(out[0])


def _add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    if a == Num(0.0):
        return b
    if b == Num(0.0):
        return a
    return Bin("+", a, b)


def _sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    if b == Num(0.0):
        return a
    if a == Num(0.0):
        return Neg(b)
    return Bin("-", a, b)


def _mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    if Num(0.0) in (a, b):
        return Num(0.0)
    if a == Num(1.0):
        return b
    if b == Num(1.0):
        return a
    return Bin("*", a, b)


def _div(a, b):
    if a == Num(0.0):
        return a
    if b == Num(1.0):
        return a
    return Bin("/", a, b)


def _depends(node):
    if isinstance(node, Var):
        return True
    if isinstance(node, Num):
        return False
    if isinstance(node, (Neg, Call)):
        return _depends(node.arg)
    return _depends(node.left) or _depends(node.right)


def derivative(node: Node) -> Node:
    """Symbolic d/dx of ``node``."""
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0)
    if isinstance(node, Neg):
        d = derivative(node.arg)
        return d if d == Num(0.0) else Neg(d)
    if isinstance(node, Call):
        u = node.arg
        du = derivative(u)
        outer = {
            "sin": lambda: Call("cos", u),
            "cos": lambda: Neg(Call("sin", u)),
            "exp": lambda: Call("exp", u),
            "tanh": lambda: _sub(Num(1.0), Bin("^", Call("tanh", u), Num(2.0))),
            "cosh": lambda: Bin("/", _sub(Call("exp", u), Call("exp", Neg(u))), Num(2.0)),
            "log": lambda: _div(Num(1.0), u),
        }[node.name]()
        return _mul(outer, du)
    a, b = node.left, node.right
    da, db = derivative(a), derivative(b)
    if node.op == "+":
        return _add(da, db)
    if node.op == "-":
        return _sub(da, db)
    if node.op == "*":
        return _add(_mul(da, b), _mul(a, db))
    if node.op == "/":
        return _div(_sub(_mul(da, b), _mul(a, db)), Bin("^", b, Num(2.0)))
    # power rule: constant exponent keeps negative bases legal
    if not _depends(b):
        return _mul(_mul(b, Bin("^", a, _sub(b, Num(1.0)))), da)
    return _mul(node, _add(_mul(db, Call("log", a)), _div(_mul(b, da), a)))


def compile_expr(text: str):
    """Parse ``text`` and return ``(f, f', f'')`` as vectorized callables."""
    node = parse(text)
    d1 = derivative(node)
    d2 = derivative(d1)
    return node, d1, d2


__all__ = ["ExprError", "Node", "parse", "evaluate", "derivative", "compile_expr", "FUNCTIONS"]
