import math

import numpy as np
import pytest

from models.errors import (
    ConfigurationError,
    EvaluationError,
    ExpressionSyntaxError,
    UnknownIdentifierError,
    UnsupportedConfigurationError,
)
from utils.expression_parser import parse_expression, tokenize

ENV = {"x": 0.5, "y": 2.0, "t": 1.5}

# (source, value at x = 0.5, y = 2, t = 1.5)
CASES = [
    ("1", 1.0),
    ("2.5", 2.5),
    (".5", 0.5),
    ("1e3", 1000.0),
    ("2.5e-1", 0.25),
    ("x", 0.5),
    ("y", 2.0),
    ("t", 1.5),
    ("1 + 2 * 3", 7.0),
    ("(1 + 2) * 3", 9.0),
    ("1 - 2 - 3", -4.0),
    ("8 / 4 / 2", 1.0),
    ("2^3^2", 512.0),
    ("(2^3)^2", 64.0),
    ("2^-1", 0.5),
    ("-2^2", -4.0),
    ("(-2)^2", 4.0),
    ("--2", 2.0),
    ("-(1 + 2)", -3.0),
    ("2 * -3", -6.0),
    ("x^2", 0.25),
    ("-x^2", -0.25),
    ("x^2^0", 0.5),
    ("x * y", 1.0),
    ("x / y", 0.25),
    ("y^x", math.sqrt(2.0)),
    ("x + y * t", 3.5),
    ("(x + y) * t", 3.75),
    ("t - x - y", -1.0),
    ("sin(0)", 0.0),
    ("cos(0)", 1.0),
    ("exp(0)", 1.0),
    ("tanh(0)", 0.0),
    ("sqrt(16)", 4.0),
    ("sin(x)", math.sin(0.5)),
    ("cos(x)", math.cos(0.5)),
    ("exp(x)", math.exp(0.5)),
    ("tanh(y)", math.tanh(2.0)),
    ("sqrt(y)", math.sqrt(2.0)),
    ("sin(x)^2 + cos(x)^2", 1.0),
    ("exp(-x^2)", math.exp(-0.25)),
    ("sin(2 * x) - 2 * sin(x) * cos(x)", 0.0),
    ("sqrt(x^2 + y^2)", math.sqrt(4.25)),
    ("exp(x) * exp(y)", math.exp(2.5)),
    ("1 / (1 + x)", 1.0 / 1.5),
    ("sin(cos(t))", math.sin(math.cos(1.5))),
    ("2^0.5", math.sqrt(2.0)),
    ("-sin(x)", -math.sin(0.5)),
    ("tanh(x) * (1 - t)", -0.5 * math.tanh(0.5)),
    ("  x   +   1  ", 1.5),
]


@pytest.mark.parametrize("source,expected", CASES)
def test_evaluation_table(source, expected):
    assert parse_expression(source).evaluate(**ENV) == pytest.approx(expected, abs=1e-14)


def test_sin_at_half_pi():
    assert parse_expression("sin(x)").evaluate(x=math.pi / 2) == pytest.approx(1.0)


@pytest.mark.parametrize("source,_", CASES)
def test_canonical_printer_is_a_fixed_point(source, _):
    printed = parse_expression(source).canonical
    reparsed = parse_expression(printed)
    assert reparsed.canonical == printed
    assert reparsed.evaluate(**ENV) == pytest.approx(parse_expression(source).evaluate(**ENV), abs=1e-14)


def test_evaluation_is_vectorised():
    x = np.linspace(0.0, 1.0, 5)
    values = parse_expression("x^2 + t").evaluate(x=x, t=1.0)
    np.testing.assert_allclose(values, x**2 + 1.0)


def test_unbalanced_parenthesis_reports_offset_and_expected_token():
    with pytest.raises(ExpressionSyntaxError) as info:
        parse_expression("sin(x")
    assert info.value.offset == 5
    assert info.value.expected == [")"]


def test_dangling_operator():
    with pytest.raises(ExpressionSyntaxError) as info:
        parse_expression("1 +")
    assert info.value.offset == 3


def test_two_operands_in_a_row():
    with pytest.raises(ExpressionSyntaxError) as info:
        parse_expression("1 2")
    assert info.value.offset == 2


def test_unexpected_character():
    with pytest.raises(ExpressionSyntaxError) as info:
        parse_expression("2 $ 3")
    assert info.value.offset == 2


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifierError) as info:
        parse_expression("foo(x)")
    assert info.value.name == "foo"
    assert info.value.offset == 0


def test_parser_errors_are_configuration_errors():
    with pytest.raises(ConfigurationError):
        parse_expression("z + 1")


@pytest.mark.parametrize(
    "source,env",
    [
        ("sqrt(x)", {"x": -1.0}),
        ("1 / x", {"x": 0.0}),
        ("x^0.5", {"x": -4.0}),
        ("x^-1", {"x": 0.0}),
        ("x + y", {"x": 1.0}),
    ],
)
def test_domain_errors(source, env):
    with pytest.raises(EvaluationError):
        parse_expression(source).evaluate(**env)


def test_tokens_carry_offsets():
    tokens = tokenize("sin(x) + 2")
    assert [(tok.text, tok.offset) for tok in tokens] == [
        ("sin", 0), ("(", 3), ("x", 4), (")", 5), ("+", 7), ("2", 9), ("", 10)
    ]


@pytest.mark.parametrize(
    "source,var,expected",
    [
        ("sin(x)", "x", math.cos(0.5)),
        ("x^3", "x", 0.75),
        ("x * t", "t", 0.5),
        ("exp(2 * x)", "x", 2.0 * math.e),
        ("2^x", "x", math.log(2.0) * 2.0**0.5),
        ("tanh(x)", "x", 1.0 - math.tanh(0.5) ** 2),
        ("sqrt(y)", "y", 0.5 / math.sqrt(2.0)),
        ("x / y", "y", -0.125),
        ("cos(x * y)", "y", -0.5 * math.sin(1.0)),
        ("y", "x", 0.0),
    ],
)
def test_symbolic_derivatives(source, var, expected):
    derivative = parse_expression(source).derivative(var)
    assert derivative.evaluate(**ENV) == pytest.approx(expected, abs=1e-12)


def test_derivative_of_a_constant_is_zero():
    assert parse_expression("3 + y").derivative("x").is_zero()


def test_variable_exponent_with_variable_base_is_rejected():
    with pytest.raises(UnsupportedConfigurationError):
        parse_expression("x^x").derivative("x")


def test_variables_and_constants():
    expr = parse_expression("sin(x) * t")
    assert expr.variables == frozenset({"x", "t"})
    assert not expr.is_constant
    assert parse_expression("0").is_zero()
