import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msmsim.expr import Cum, ExpressionError, Ref, canonical_text, parse_expression


def test_linear_predictor_terms_and_link():
    lp = parse_expression("expit(-2 + 0.1*B + 0.02*C - beta*cum(A, 1))", {"beta": -0.5})
    assert lp.link == "expit"
    assert lp.intercept == -2
    assert dict(lp.terms)[(Cum("A", 1),)] == 0.5
    assert lp.factors() == {Ref("B"), Ref("C"), Cum("A", 1)}


def test_products_and_lags():
    lp = parse_expression("400*(L[-1] + 0.2*B) + A*S")
    assert dict(lp.terms)[(Ref("L", 1),)] == 400
    assert dict(lp.terms)[(Ref("B"),)] == pytest.approx(80)
    assert (Ref("A"), Ref("S")) in dict(lp.terms)


def test_future_reference_rejected():
    with pytest.raises(ExpressionError, match="future"):
        parse_expression("L[1] + 2")


def test_constant_functions_fold():
    lp = parse_expression("-log(1 - 0.035)/2")
    assert lp.is_constant and lp.intercept == pytest.approx(-np.log(0.965) / 2, abs=1e-17)


def test_str_round_trips():
    lp = parse_expression("expit(1.5 - 0.25*L[-2] + A*cum(A) - S)")
    assert parse_expression(str(lp)) == lp


@settings(max_examples=100, deadline=None)
@given(coefs=st.lists(st.floats(-100, 100, allow_nan=False).filter(lambda c: c != 0), min_size=1, max_size=4),
       intercept=st.floats(-100, 100, allow_nan=False))
def test_printed_predictor_reparses_identically(coefs, intercept):
    names = ["B", "L[-1]", "cum(A)", "A*S"]
    text = f"{intercept!r} + " + " + ".join(f"({c!r})*{n}" for c, n in zip(coefs, names))
    lp = parse_expression(text)
    assert parse_expression(str(lp)) == lp


def test_canonical_text_normalizes_spacing():
    assert canonical_text("Normal( L[-1]+0.5*A[-1] ,0.1 )") == "Normal(L[-1] + 0.5 * A[-1], 0.1)"
