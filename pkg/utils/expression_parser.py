"""
Expression language for potentials and gauge functions.

Grammar: decimal literals; variables x, y, t; binary + - * / ^ (power is
right-associative and binds tighter than unary minus); unary minus;
functions sin, cos, exp, tanh, sqrt; parentheses.

Parsing is precedence climbing over a token list with byte offsets, so every
syntax error can name where it happened and which tokens would have been
accepted. Evaluation is vectorised over numpy arrays.
"""
import math
import re
from dataclasses import dataclass
from typing import FrozenSet, List, Mapping, Optional, Union

import numpy as np

from models.errors import (
    EvaluationError,
    ExpressionSyntaxError,
    UnknownIdentifierError,
    UnsupportedConfigurationError,
)

VARIABLES = ("x", "y", "t")
FUNCTIONS = ("sin", "cos", "exp", "tanh", "sqrt")

# (precedence, associativity) of binary operators
BINARY_OPERATORS = {
    "+": (1, "left"),
    "-": (1, "left"),
    "*": (2, "left"),
    "/": (2, "left"),
    "^": (4, "right"),
}
UNARY_PRECEDENCE = 3
ATOM_PRECEDENCE = 5

_TOKEN_PATTERN = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),]))"
)


@dataclass(frozen=True)
class Token:
    kind: str  # number | name | op | end
    text: str
    offset: int


def tokenize(source: str) -> List[Token]:
    """Split source into tokens; the last token is always `end`."""
    tokens: List[Token] = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        match = _TOKEN_PATTERN.match(source, pos)
        if match is None or match.end() == pos:
            offset = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExpressionSyntaxError(f"Unexpected character {source[offset]!r}", offset)
        kind = match.lastgroup
        tokens.append(Token(kind, match.group(kind), match.start(kind)))
        pos = match.end()
    tokens.append(Token("end", "", len(source)))
    return tokens


# --- AST --------------------------------------------------------------------


@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Negate:
    operand: "Node"


@dataclass(frozen=True)
class BinaryOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Number, Variable, Negate, BinaryOp, Call]


class _Parser:
    """Precedence-climbing parser over a token list."""

    def __init__(self, source: str):
        self.source = source
        self.tokens = tokenize(source)
        self.pos = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, text: str) -> Token:
        token = self.current
        if token.kind != "op" or token.text != text:
            found = "end of input" if token.kind == "end" else repr(token.text)
            raise ExpressionSyntaxError(f"Expected {text!r} but found {found}", token.offset, [text])
        return self.advance()

    def parse(self) -> Node:
        node = self.expression(0)
        if self.current.kind != "end":
            raise ExpressionSyntaxError(
                f"Unexpected token {self.current.text!r}",
                self.current.offset,
                list(BINARY_OPERATORS) + ["end of input"],
            )
        return node

    def expression(self, min_prec: int) -> Node:
        left = self.unary()
        while self.current.kind == "op" and self.current.text in BINARY_OPERATORS:
            prec, assoc = BINARY_OPERATORS[self.current.text]
            if prec < min_prec:
                break
            op = self.advance().text
            right = self.expression(prec + 1 if assoc == "left" else prec)
            left = BinaryOp(op, left, right)
        return left

    def unary(self) -> Node:
        if self.current.kind == "op" and self.current.text == "-":
            self.advance()
            return Negate(self.expression(UNARY_PRECEDENCE))
        return self.primary()

    def primary(self) -> Node:
        token = self.current
        if token.kind == "number":
            self.advance()
            return Number(float(token.text))
        if token.kind == "name":
            self.advance()
            if token.text in FUNCTIONS:
                self.expect("(")
                arg = self.expression(0)
                self.expect(")")
                return Call(token.text, arg)
            if token.text in VARIABLES:
                return Variable(token.text)
            raise UnknownIdentifierError(token.text, token.offset)
        if token.kind == "op" and token.text == "(":
            self.advance()
            node = self.expression(0)
            self.expect(")")
            return node
        found = "end of input" if token.kind == "end" else repr(token.text)
        raise ExpressionSyntaxError(
            f"Expected an operand but found {found}",
            token.offset,
            ["number", "variable", "function", "(", "-"],
        )


# --- Printer ----------------------------------------------------------------


def _precedence(node: Node) -> int:
    if isinstance(node, BinaryOp):
        return BINARY_OPERATORS[node.op][0]
    if isinstance(node, Negate):
        return UNARY_PRECEDENCE
    if isinstance(node, Number) and (node.value < 0 or math.copysign(1.0, node.value) < 0):
        return UNARY_PRECEDENCE
    return ATOM_PRECEDENCE


def _wrap(node: Node, required: int) -> str:
    text = to_source(node)
    return f"({text})" if _precedence(node) < required else text


def to_source(node: Node) -> str:
    """Canonical text of an AST; parse(to_source(n)) prints back identically."""
    if isinstance(node, Number):
        return repr(float(node.value))
    if isinstance(node, Variable):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    if isinstance(node, Negate):
        return "-" + _wrap(node.operand, BINARY_OPERATORS["^"][0])
    prec, assoc = BINARY_OPERATORS[node.op]
    if assoc == "left":
        left, right = _wrap(node.left, prec), _wrap(node.right, prec + 1)
    else:
        left, right = _wrap(node.left, ATOM_PRECEDENCE), _wrap(node.right, prec)
    if node.op in "+-":
        return f"{left} {node.op} {right}"
    return f"{left}{node.op}{right}"


# --- Evaluation -------------------------------------------------------------

ArrayLike = Union[float, np.ndarray]


def _check_domain(condition, message: str) -> None:
    if np.any(condition):
        raise EvaluationError(message)


def evaluate(node: Node, env: Mapping[str, ArrayLike]) -> ArrayLike:
    """Evaluate an AST with numpy broadcasting over the variable arrays."""
    if isinstance(node, Number):
        return node.value
    if isinstance(node, Variable):
        if node.name not in env:
            raise EvaluationError(f"Variable '{node.name}' is not bound")
        return env[node.name]
    if isinstance(node, Negate):
        return -evaluate(node.operand, env)
    if isinstance(node, Call):
        arg = evaluate(node.arg, env)
        if node.func == "sqrt":
            _check_domain(np.asarray(arg) < 0, "sqrt of a negative number")
        with np.errstate(over="ignore"):
            return getattr(np, node.func)(arg)
    left = evaluate(node.left, env)
    right = evaluate(node.right, env)
    if node.op == "+":
        return left + right
    if node.op == "-":
        return left - right
    if node.op == "*":
        return left * right
    if node.op == "/":
        _check_domain(np.asarray(right) == 0, "division by zero")
        return np.true_divide(left, right)
    base, exponent = np.asarray(left, dtype=float), np.asarray(right, dtype=float)
    _check_domain((base == 0) & (exponent < 0), "zero raised to a negative power")
    _check_domain((base < 0) & (exponent != np.round(exponent)), "negative base with fractional exponent")
    with np.errstate(over="ignore"):
        result = np.power(base, exponent)
    return result if result.ndim else float(result)


# --- Symbolic differentiation -----------------------------------------------


def variables(node: Node) -> FrozenSet[str]:
    if isinstance(node, Variable):
        return frozenset([node.name])
    if isinstance(node, Number):
        return frozenset()
    if isinstance(node, (Negate,)):
        return variables(node.operand)
    if isinstance(node, Call):
        return variables(node.arg)
    return variables(node.left) | variables(node.right)


def _is_number(node: Node, value: Optional[float] = None) -> bool:
    return isinstance(node, Number) and (value is None or node.value == value)


def fold_add(a: Node, b: Node) -> Node:
    if _is_number(a, 0.0):
        return b
    if _is_number(b, 0.0):
        return a
    if _is_number(a) and _is_number(b):
        return Number(a.value + b.value)
    return BinaryOp("+", a, b)


def fold_sub(a: Node, b: Node) -> Node:
    if _is_number(b, 0.0):
        return a
    if _is_number(a, 0.0):
        return fold_neg(b)
    if _is_number(a) and _is_number(b):
        return Number(a.value - b.value)
    return BinaryOp("-", a, b)


def fold_mul(a: Node, b: Node) -> Node:
    if _is_number(a, 0.0) or _is_number(b, 0.0):
        return Number(0.0)
    if _is_number(a, 1.0):
        return b
    if _is_number(b, 1.0):
        return a
    if _is_number(a) and _is_number(b):
        return Number(a.value * b.value)
    return BinaryOp("*", a, b)


def fold_div(a: Node, b: Node) -> Node:
    if _is_number(a, 0.0):
        return Number(0.0)
    if _is_number(b, 1.0):
        return a
    return BinaryOp("/", a, b)


def fold_neg(a: Node) -> Node:
    if _is_number(a):
        return Number(-a.value)
    if isinstance(a, Negate):
        return a.operand
    return Negate(a)


def fold_pow(a: Node, b: Node) -> Node:
    if _is_number(b, 1.0):
        return a
    if _is_number(b, 0.0):
        return Number(1.0)
    return BinaryOp("^", a, b)


def differentiate(node: Node, var: str) -> Node:
    """∂node/∂var as a new AST, with zero/one folding."""
    if var not in VARIABLES:
        raise UnknownIdentifierError(var, 0)
    if var not in variables(node):
        return Number(0.0)
    if isinstance(node, Variable):
        return Number(1.0)
    if isinstance(node, Negate):
        return fold_neg(differentiate(node.operand, var))
    if isinstance(node, Call):
        u, du = node.arg, differentiate(node.arg, var)
        if node.func == "sin":
            outer = Call("cos", u)
        elif node.func == "cos":
            outer = fold_neg(Call("sin", u))
        elif node.func == "exp":
            outer = node
        elif node.func == "tanh":
            outer = fold_sub(Number(1.0), fold_pow(node, Number(2.0)))
        else:
            outer = fold_div(Number(1.0), fold_mul(Number(2.0), node))
        return fold_mul(outer, du)
    u, w = node.left, node.right
    du, dw = differentiate(u, var), differentiate(w, var)
    if node.op == "+":
        return fold_add(du, dw)
    if node.op == "-":
        return fold_sub(du, dw)
    if node.op == "*":
        return fold_add(fold_mul(du, w), fold_mul(u, dw))
    if node.op == "/":
        return fold_div(fold_sub(fold_mul(du, w), fold_mul(u, dw)), fold_pow(w, Number(2.0)))
    # power
    if var not in variables(w):
        return fold_mul(fold_mul(w, fold_pow(u, fold_sub(w, Number(1.0)))), du)
    if _is_number(u) and u.value > 0:
        return fold_mul(fold_mul(node, Number(math.log(u.value))), dw)
    raise UnsupportedConfigurationError(
        f"Cannot differentiate {to_source(node)}: exponent depends on {var} and base is not a positive constant"
    )


# --- Public wrapper ---------------------------------------------------------


class PotentialExpr:
    """A parsed expression together with its source text."""

    def __init__(self, source: str, ast: Node):
        self.source = source
        self.ast = ast

    def __repr__(self) -> str:
        return f"PotentialExpr({self.canonical!r})"

    def __str__(self) -> str:
        return self.canonical

    @property
    def canonical(self) -> str:
        return to_source(self.ast)

    @property
    def variables(self) -> FrozenSet[str]:
        return variables(self.ast)

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def is_zero(self) -> bool:
        return self.is_constant and evaluate(self.ast, {}) == 0.0

    def evaluate(self, **env: ArrayLike) -> ArrayLike:
        return evaluate(self.ast, env)

    def derivative(self, var: str) -> "PotentialExpr":
        ast = differentiate(self.ast, var)
        return PotentialExpr(to_source(ast), ast)

    @classmethod
    def from_ast(cls, ast: Node) -> "PotentialExpr":
        return cls(to_source(ast), ast)


def parse_expression(src: str) -> PotentialExpr:
    """Parse source text into a PotentialExpr."""
    return PotentialExpr(src, _Parser(src).parse())
