import random

import pytest

from eqgym.expr import (
    Binary,
    Constant,
    ExpressionSyntaxError,
    NamedConstant,
    Unary,
    UnknownFunctionError,
    Variable,
    parse,
    render,
)
from gen import random_expression


def test_division_shape():
    assert parse("F / k") == Binary("div", Variable("F"), Variable("k"))


def test_full_formula_shape():
    got = parse("2*np.pi*np.sqrt(l/g)")
    want = Binary(
        "mul",
        Binary("mul", Constant(2.0), NamedConstant("pi")),
        Unary("sqrt", Binary("div", Variable("l"), Variable("g"))),
    )
    assert got == want


def test_named_constant_and_function_spellings():
    assert parse("np.pi") == NamedConstant("pi")
    assert parse("np.sqrt(x)") == parse("sqrt(x)") == Unary("sqrt", Variable("x"))
    assert parse("np.abs(x)") == Unary("abs", Variable("x"))


@pytest.mark.parametrize("text", ["math.sqrt(x)", "numpy.sqrt(x)", "np.exp2(x)",
                                  "np.linalg(x)", "foo(x)", "np.pi(x)"])
def test_unknown_functions_rejected(text):
    with pytest.raises(UnknownFunctionError):
        parse(text)


def test_power_binds_tighter_than_unary_minus():
    assert parse("-3**2") == Unary("neg", Binary("pow", Constant(3.0), Constant(2.0)))
    assert parse("2**-3") == Binary("pow", Constant(2.0), Constant(-3.0))
    assert parse("2 ** -x") == Binary("pow", Constant(2.0), Unary("neg", Variable("x")))


def test_power_right_associative():
    assert parse("2**3**2") == Binary(
        "pow", Constant(2.0), Binary("pow", Constant(3.0), Constant(2.0))
    )


def test_left_associativity():
    assert parse("a - b - c") == Binary(
        "sub", Binary("sub", Variable("a"), Variable("b")), Variable("c")
    )
    assert parse("a / b * c") == Binary(
        "mul", Binary("div", Variable("a"), Variable("b")), Variable("c")
    )


def test_precedence_mul_over_add():
    assert parse("a + b*c") == Binary(
        "add", Variable("a"), Binary("mul", Variable("b"), Variable("c"))
    )


def test_negative_literal_folds():
    assert parse("-3.5") == Constant(-3.5)
    assert parse("x + -2") == Binary("add", Variable("x"), Constant(-2.0))
    assert parse("(-2)**2") == Binary("pow", Constant(-2.0), Constant(2.0))


@pytest.mark.parametrize(
    "text,value",
    [("1e-06", 1e-06), ("2.5e3", 2500.0), (".5", 0.5), ("5.", 5.0), ("1E+2", 100.0)],
)
def test_scientific_literals(text, value):
    assert parse(text) == Constant(value)


def test_syntax_error_carries_byte_offset():
    with pytest.raises(ExpressionSyntaxError) as err:
        parse("a + * b")
    assert err.value.offset == 4
    assert err.value.expected


def test_byte_offset_counts_utf8_bytes():
    with pytest.raises(ExpressionSyntaxError) as err:
        parse("π + x")  # 2-byte character up front
    assert err.value.offset == 0
    with pytest.raises(ExpressionSyntaxError) as err:
        parse("x π")
    assert err.value.offset == 2


@pytest.mark.parametrize("text", ["", "(a", "a b", "a +", "()", "a ** ", "1e999", "x!"])
def test_malformed_inputs_rejected(text):
    with pytest.raises(ExpressionSyntaxError):
        parse(text)


def test_nesting_depth_capped():
    deep = "(" * 500 + "x" + ")" * 500
    with pytest.raises(ExpressionSyntaxError):
        parse(deep)


def test_node_validation():
    with pytest.raises(ValueError):
        Constant(float("inf"))
    with pytest.raises(ValueError):
        Constant(float("nan"))
    with pytest.raises(ValueError):
        Variable("2x")
    with pytest.raises(ValueError):
        Variable("np.pi")
    with pytest.raises(ValueError):
        Unary("foo", Constant(1.0))
    with pytest.raises(ValueError):
        Binary("mod", Constant(1.0), Constant(2.0))
    with pytest.raises(ValueError):
        NamedConstant("e")


def test_render_golden():
    assert render(parse("F / k")) == "(F / k)"
    assert render(Constant(-3.0)) == "(-3.0)"
    assert render(Unary("neg", Constant(3.0))) == "(-(3.0))"
    assert render(NamedConstant("pi")) == "np.pi"


def test_round_trip_seeded():
    rng = random.Random(20240817)
    names = ("x", "y", "z", "F", "k")
    for _ in range(400):
        expr = random_expression(rng, names, depth=5, tame=False)
        assert parse(render(expr)) == expr
