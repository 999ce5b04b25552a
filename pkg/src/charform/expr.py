"""Parsing and evaluation of scalar expressions over named variables.

Grammar, loosest to tightest binding::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | '+' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := number | name | name '(' expr ')' | '(' expr ')'

so ``-x^2`` is ``-(x^2)`` and ``2^-1`` is ``2^(-1)``.

Values may be floats, numpy arrays or :class:`~charform.dual.Dual` numbers;
evaluation over arrays is elementwise, which is how the solver evaluates a
whole ray fan in one call.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence, Union

import numpy as np

from charform import dual

FUNCTIONS = {
    "sin": dual.sin,
    "cos": dual.cos,
    "exp": dual.exp,
    "log": dual.log,
    "sqrt": dual.sqrt,
    "abs": dual.fabs,
}
CONSTANTS = {"pi": np.pi}


class ExpressionError(ValueError):
    pass


class ParseError(ExpressionError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnboundVariableError(ExpressionError, KeyError):
    def __init__(self, name: str):
        ExpressionError.__init__(self, f"unbound variable {name!r}")
        self.name = name

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Var, Neg, BinOp, Call]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            rest = text[pos:]
            stripped = rest.lstrip()
            if not stripped:
                break
            raise ParseError(f"unexpected character {stripped[0]!r}", pos + len(rest) - len(stripped))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, op: str):
        kind, val, pos = self.take()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {val!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, val, _ = self.peek()
        if kind == "op" and val in "+-":
            self.take()
            operand = self.unary()
            return Neg(operand) if val == "-" else operand
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", pos)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            if val in FUNCTIONS:
                raise ParseError(f"function {val!r} needs an argument", pos)
            if val in CONSTANTS:
                return Num(CONSTANTS[val])
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            raise ParseError("unexpected end of input", pos)
        raise ParseError(f"unexpected {val!r}", pos)


def _serialize(node: Node) -> str:
    if isinstance(node, Num):
        return repr(node.value) if np.isfinite(node.value) else "1e999"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{_serialize(node.operand)})"
    if isinstance(node, Call):
        return f"{node.func}({_serialize(node.arg)})"
    return f"({_serialize(node.left)} {node.op} {_serialize(node.right)})"


def _variables(node: Node, out: set) -> set:
    if isinstance(node, Var):
        out.add(node.name)
    elif isinstance(node, Neg):
        _variables(node.operand, out)
    elif isinstance(node, Call):
        _variables(node.arg, out)
    elif isinstance(node, BinOp):
        _variables(node.left, out)
        _variables(node.right, out)
    return out


def _rename(node: Node, mapping: Mapping[str, str]) -> Node:
    if isinstance(node, Var):
        return Var(mapping.get(node.name, node.name))
    if isinstance(node, Neg):
        return Neg(_rename(node.operand, mapping))
    if isinstance(node, Call):
        return Call(node.func, _rename(node.arg, mapping))
    if isinstance(node, BinOp):
        return BinOp(node.op, _rename(node.left, mapping), _rename(node.right, mapping))
    return node


def _eval(node: Node, env: Mapping[str, object]):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise UnboundVariableError(node.name) from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, Call):
        return FUNCTIONS[node.func](_eval(node.arg, env))
    a = _eval(node.left, env)
    b = _eval(node.right, env)
    op = node.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if not isinstance(a, dual.Dual) and not isinstance(b, dual.Dual):
            return np.true_divide(a, b)
        return a / b
    return dual.power(a, b)


class Evaluation(NamedTuple):
    value: object
    # True where the result is NaN or infinite (domain error or overflow).
    flagged: object


@dataclass(frozen=True)
class Expression:
    """Immutable parsed expression."""

    root: Node
    variables: frozenset

    @classmethod
    def from_node(cls, root: Node) -> "Expression":
        return cls(root, frozenset(_variables(root, set())))

    def __str__(self) -> str:
        return _serialize(self.root)

    def serialize(self) -> str:
        """Fully parenthesized infix text that parses back to the same tree."""
        return _serialize(self.root)

    def rename(self, mapping: Mapping[str, str]) -> "Expression":
        return Expression.from_node(_rename(self.root, mapping))

    def __call__(self, **bindings):
        return evaluate(self, bindings).value

    def raw(self, env: Mapping[str, object]):
        """Evaluate without checks; values may be arrays or duals."""
        with np.errstate(all="ignore"):
            return _eval(self.root, env)


def parse(text: str) -> Expression:
    if text is None or not text.strip():
        raise ParseError("empty expression", 0)
    return Expression.from_node(_Parser(text).parse())


def _as_expression(e) -> Expression:
    return e if isinstance(e, Expression) else parse(e)


def evaluate(e, bindings: Mapping[str, object]) -> Evaluation:
    """Evaluate ``e`` in IEEE double precision.

    Domain errors (``log(-1)``, ``(-8)^(1/3)``) give NaN rather than raising;
    ``flagged`` reports them.
    """
    e = _as_expression(e)
    val = e.raw(bindings)
    if np.ndim(val) == 0:
        val = float(val)
        return Evaluation(val, not np.isfinite(val))
    val = np.asarray(val, dtype=float)
    return Evaluation(val, ~np.isfinite(val))


def eval_with_gradient(e, bindings: Mapping[str, object], wrt: Sequence[str]):
    """Value and exact partial derivatives with respect to ``wrt``.

    All directions are seeded in one forward pass. For array bindings the
    gradient has shape ``(len(wrt),) + value.shape``.
    """
    e = _as_expression(e)
    for name in wrt:
        if name not in bindings:
            raise UnboundVariableError(name)
    names = [n for n in bindings if n in e.variables or n in wrt]
    shape = np.broadcast_shapes(*[np.shape(bindings[n]) for n in names])
    k = len(wrt)
    tag = dual.new_tag()
    env = dict(bindings)
    for j, name in enumerate(wrt):
        seed = np.zeros((k,) + (1,) * len(shape))
        seed[j] = 1.0
        env[name] = dual.Dual(bindings[name], seed, tag)
    out = e.raw(env)
    val = np.broadcast_to(np.asarray(dual.value(out), dtype=float), shape)
    grad = np.broadcast_to(np.asarray(dual.tangent(out, tag, 0.0), dtype=float), (k,) + shape)
    if shape == ():
        return float(val), np.array(grad)
    return np.array(val), np.array(grad)


def derivative(e, bindings: Mapping[str, object], name: str):
    """Single partial derivative; works with dual-valued bindings (nesting)."""
    e = _as_expression(e)
    tag = dual.new_tag()
    env = dict(bindings)
    if name not in env:
        raise UnboundVariableError(name)
    env[name] = dual.Dual(env[name], 1.0, tag)
    return dual.tangent(e.raw(env), tag, 0.0)
