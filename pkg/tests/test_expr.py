import doctest

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import stopgame.expr
from stopgame.errors import ConfigurationError
from stopgame.expr import compile_expr


def test_doctest():
    assert doctest.testmod(stopgame.expr).failed == 0


def test_operators_and_functions():
    f = compile_expr("exp(log(x)) + sqrt(abs(-x)) - min(x, 1) * 2^2 / 4 + pi - e", ("x",))
    x = 2.25
    assert float(f(x)) == pytest.approx(x + 1.5 - 1.0 + np.pi - np.e, abs=1e-14)
    assert float(compile_expr("-x**2")(3.0)) == -9.0


def test_vectorized_broadcast():
    f = compile_expr("t + 0*x + 1", ("t", "x"))
    out = f(np.array([0.0, 1.0])[:, None], np.zeros(3))
    assert out.shape == (2, 3)
    assert np.array_equal(out[:, 0], [1.0, 2.0])


def test_numbers_accepted():
    assert float(compile_expr(0.5)(7.0)) == 0.5


@pytest.mark.parametrize("text", ["__import__('os')", "x.real", "y + 1", "exp(x, 2)", "[x]",
                                  "x if x else 1", "'a'", "x +", "lambda: 1", "x % 2", True])
def test_rejected(text):
    with pytest.raises(ConfigurationError):
        compile_expr(text, ("x",))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), x=st.floats(0.01, 10))
def test_agrees_with_python(a, b, x):
    f = compile_expr(f"{a!r}*x^2 + {b!r}*max(x, 1) - sqrt(x)", ("x",))
    assert float(f(x)) == pytest.approx(a * x * x + b * max(x, 1.0) - np.sqrt(x), rel=1e-12, abs=1e-12)
