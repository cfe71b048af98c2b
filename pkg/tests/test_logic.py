from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from negpol.logic import (
    FALSE,
    TRUE,
    And,
    Atom,
    CaptureError,
    Constant,
    Exists,
    Forall,
    MissingVariableError,
    Not,
    NotQuantifierFreeError,
    Or,
    ResourceLimitError,
    Scale,
    Sum,
    Var,
    Variable,
    add_prefix,
    atom,
    bound_vars,
    dnf_clauses,
    evaluate,
    free_vars,
    fresh_var,
    is_quantifier_free,
    linearize,
    or_parts,
    rename,
    strip_prefix,
    substitute,
    to_dnf,
    to_nnf,
    v,
)
from negpol.syntax import ParseError, format_formula, format_term, parse_formula, parse_term

X, Y, Z = Var("x"), Var("y"), Var("z")
VARS = [X, Y, Z, Var("price", "s1"), Var("capacity", "s2")]

# -- strategies ---------------------------------------------------------------

rationals = st.fractions(min_value=-20, max_value=20, max_denominator=6)


def terms():
    leaves = st.one_of(st.sampled_from(VARS).map(Variable), rationals.map(Constant))
    return st.recursive(
        leaves,
        lambda t: st.one_of(
            st.tuples(t, t).map(lambda p: Sum(*p)),
            st.tuples(rationals.filter(lambda c: c not in (0, 1)), t).map(lambda p: Scale(*p)),
        ),
        max_leaves=4,
    )


atoms = st.builds(Atom, terms(), st.sampled_from(["=", "!=", "<", "<=", ">", ">="]), terms())


def formulas(quantifiers: bool = True):
    def extend(f):
        opts = [
            st.tuples(f, f).map(lambda p: And(*p)),
            f.map(Not),
            st.tuples(f, f).map(lambda p: Or(*p)),
        ]
        if quantifiers:
            opts.append(st.tuples(st.sampled_from(VARS), f).map(lambda p: Exists(*p)))
        return st.one_of(*opts)

    return st.recursive(st.one_of(atoms, st.just(TRUE), st.just(FALSE)), extend, max_leaves=6)


valuations = st.fixed_dictionaries({x: rationals for x in VARS})

# -- basics -------------------------------------------------------------------


def test_free_and_bound_vars():
    f = Exists(Y, And(atom(v("x"), "<", v("y")), atom(v("y"), "<", 5)))
    assert free_vars(f) == {X}
    assert bound_vars(f) == {Y}
    assert not is_quantifier_free(f)
    assert is_quantifier_free(f.body)


def test_linearize_collects_coefficients():
    t = parse_term("2*(3*x + y) - x + 4")
    coeffs, const = linearize(t)
    assert coeffs == {X: 5, Y: 2}
    assert const == 4


def test_linearize_drops_cancelled_variables():
    coeffs, const = linearize(parse_term("x - x + 1/2"))
    assert coeffs == {}
    assert const == Fraction(1, 2)


def test_evaluate_exact():
    f = parse_formula("x + 1/3*y = 1")
    assert evaluate(f, {X: Fraction(2, 3), Y: Fraction(1)})
    assert not evaluate(f, {X: Fraction(2, 3), Y: Fraction(1, 2)})


def test_evaluate_errors():
    with pytest.raises(MissingVariableError):
        evaluate(parse_formula("x < y"), {X: Fraction(1)})
    with pytest.raises(NotQuantifierFreeError):
        evaluate(parse_formula("exists y. x < y"), {X: Fraction(1)})


def test_substitute_avoids_capture():
    f = parse_formula("exists y. x < y")
    assert substitute(f, X, Constant(Fraction(3))) == parse_formula("exists y. 3 < y")
    # substituting into the bound variable's name is a no-op
    assert substitute(f, Y, Constant(Fraction(3))) == f
    with pytest.raises(CaptureError):
        substitute(f, X, Variable(Y))


def test_prefix_roundtrip():
    f = parse_formula("capacity >= 0 && price <= capacity")
    g = add_prefix(f, "s1")
    assert free_vars(g) == {Var("capacity", "s1"), Var("price", "s1")}
    assert strip_prefix(g, "s1") == f


def test_rename_and_fresh():
    f = parse_formula("x < y")
    assert rename(f, {X: Z}) == parse_formula("z < y")
    x2 = fresh_var(X, {X, Var("x'")})
    assert x2 not in {X, Var("x'")}


def test_or_encoding_is_recognized():
    a, b = parse_formula("x < 1"), parse_formula("y > 2")
    assert or_parts(Or(a, b)) == (a, b)
    assert or_parts(Not(a)) is None


def test_forall_encoding():
    f = Forall(X, parse_formula("x < y || x >= y"))
    assert free_vars(f) == {Y}


def test_dnf_splits_disequality():
    clauses = dnf_clauses(parse_formula("x != 3"))
    assert sorted(c[0].rel for c in clauses) == ["<", ">"]


def test_dnf_cap():
    big = parse_formula(" && ".join(f"(x{i} < 0 || x{i} > 1)" for i in range(8)))
    with pytest.raises(ResourceLimitError):
        dnf_clauses(big, cap=100)
    assert len(dnf_clauses(big, cap=1000)) == 256


# -- properties ---------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(formulas(quantifiers=False), valuations)
def test_nnf_and_dnf_preserve_truth(f, val):
    expected = evaluate(f, val)
    assert evaluate(to_nnf(f), val) == expected
    assert evaluate(to_dnf(f), val) == expected


@settings(max_examples=200, deadline=None)
@given(formulas(quantifiers=False))
def test_nnf_negates_atoms_only(f):
    def check(g):
        if isinstance(g, Atom):
            return
        if isinstance(g, And):
            check(g.left)
            check(g.right)
            return
        parts = or_parts(g)
        assert parts is not None, "Not survives only as the encoding of ||"
        check(parts[0])
        check(parts[1])

    check(to_nnf(f))


@settings(max_examples=300, deadline=None)
@given(formulas())
def test_print_parse_roundtrip(f):
    assert parse_formula(format_formula(f)) == f


@settings(max_examples=200, deadline=None)
@given(terms())
def test_term_roundtrip(t):
    assert parse_term(format_term(t)) == t


@settings(max_examples=100, deadline=None)
@given(formulas(quantifiers=False), valuations, rationals)
def test_substitution_matches_evaluation(f, val, c):
    g = substitute(f, X, Constant(c))
    assert evaluate(g, val) == evaluate(f, {**val, X: c})


# -- parser -------------------------------------------------------------------


@pytest.mark.parametrize("text, expected", [
    ("x < 5 && x > 0", And(atom(v("x"), "<", 5), atom(v("x"), ">", 0))),
    ("true", TRUE),
    ("!(x = 1)", Not(atom(v("x"), "=", 1))),
    ("s1.price <= 3.5", atom(v("s1.price"), "<=", Fraction(7, 2))),
])
def test_parse_examples(text, expected):
    assert parse_formula(text) == expected


def test_parse_precedence_and_implication():
    f = parse_formula("a < 1 || b < 1 && c < 1")
    assert or_parts(f)[0] == parse_formula("a < 1")
    imp = parse_formula("a < 1 -> b < 1")
    assert evaluate(imp, {Var("a"): Fraction(2), Var("b"): Fraction(2)})


def test_parse_parenthesized_term():
    f = parse_formula("(x + y) * 2 <= 4")
    coeffs, _ = linearize(f.lhs)
    assert coeffs == {X: 2, Y: 2}


def test_nested_scaling_is_flattened_semantically():
    f = parse_formula("2*(3*x) = 6")
    assert evaluate(f, {X: Fraction(1)})


def test_exists_with_prefixed_variable():
    f = parse_formula("exists s1.p. s1.p < x")
    assert isinstance(f, Exists) and f.var == Var("p", "s1")


@pytest.mark.parametrize("text", ["x <", "x < 5 &&", "(x < 1", "x * y < 1", "x < 1 )", "3 $ 4"])
def test_parse_errors_have_positions(text):
    with pytest.raises(ParseError) as err:
        parse_formula(text)
    assert err.value.line >= 1 and err.value.column >= 1
