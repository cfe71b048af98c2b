import pytest
from hypothesis import given, settings, strategies as st

from negpol.config import (
    ConfigType,
    ConfigTypeError,
    format_config_type,
    format_registry,
    is_formula_over,
    parse_config_type,
    parse_registry,
    prefix_params,
    same_terms,
)
from negpol.logic import TRUE, Var
from negpol.qe import is_satisfiable
from negpol.syntax import ParseError, parse_formula as P

STORAGE = "{capacity: decimal, price: decimal; capacity >= 0 && price >= 0}"


def test_parse_storage():
    ct = parse_config_type(STORAGE, "storage")
    assert ct.params == (Var("capacity"), Var("price"))
    assert ct.lang == {Var("capacity"), Var("price")}
    assert ct.label == "storage"


def test_trivial_type():
    ct = parse_config_type("{x: decimal; true}")
    assert ct.constraint == TRUE


@pytest.mark.parametrize("text, fragment", [
    ("{x: decimal; y > 0}", "non-parameters"),
    ("{x: decimal, x: decimal; true}", "duplicate"),
    ("{x: integer; true}", "basic type"),
    ("{x: decimal; x > 0", "expected"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ParseError) as err:
        parse_config_type(text)
    assert fragment in str(err.value)


def test_unsatisfiable_type_rejected():
    with pytest.raises(ConfigTypeError):
        parse_config_type("{x: decimal; x < 0 && x > 0}")


def test_empty_params_warns(caplog):
    parse_config_type("{; true}")
    assert "no parameters" in caplog.text


def test_constructor_checks():
    with pytest.raises(ConfigTypeError):
        ConfigType((Var("x"),), P("exists y. x < y"))


@pytest.mark.parametrize("formula, expected", [
    ("capacity = 2 && price <= 5", True),
    ("speed = 6", False),
    ("true", True),
])
def test_is_formula_over(formula, expected):
    assert is_formula_over(P(formula), parse_config_type(STORAGE)) is expected


def test_prefix_params():
    ct = parse_config_type(STORAGE)
    s1 = prefix_params(ct, "s1")
    assert s1.params == (Var("capacity", "s1"), Var("price", "s1"))
    assert s1.constraint == P("s1.capacity >= 0 && s1.price >= 0")
    assert not (s1.lang & prefix_params(ct, "s2").lang)
    assert prefix_params(parse_config_type("{; true}"), "s1").constraint == TRUE
    with pytest.raises(ConfigTypeError):
        prefix_params(s1, "s3")


def test_registry_roundtrip():
    text = f"# two types\nstorage = {STORAGE}\nnet = {{bw: decimal; bw > 0}};\n"
    reg = parse_registry(text)
    assert list(reg) == ["storage", "net"]
    assert parse_registry(format_registry(reg)) == reg


def test_registry_duplicate():
    with pytest.raises(ParseError):
        parse_registry(f"a = {STORAGE}\na = {STORAGE}")


def test_same_terms_ignores_names_and_syntax():
    a = parse_config_type(STORAGE, "storage")
    b = parse_config_type("{price: decimal, capacity: decimal; !(price < 0) && 0 <= capacity}")
    assert same_terms(a, b)
    assert not same_terms(a, parse_config_type("{capacity: decimal, price: decimal; true}"))


names = st.sampled_from(["a", "b", "c", "price", "s"])


@settings(max_examples=100, deadline=None)
@given(st.lists(names, unique=True, max_size=4), st.integers(-5, 5))
def test_config_roundtrip_and_prefix_sat(params, bound):
    body = " && ".join(f"{p} >= {bound}" for p in params) or "true"
    ct = parse_config_type(f"{{{', '.join(p + ': decimal' for p in params)}; {body}}}")
    assert parse_config_type(format_config_type(ct)) == ct
    assert is_satisfiable(prefix_params(ct, "srv").constraint) == is_satisfiable(ct.constraint)
