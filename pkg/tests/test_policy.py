import pytest

from conftest import DATA
from negpol.config import parse_registry
from negpol.logic import TRUE, Var
from negpol.policy import (
    Compose,
    CoreRule,
    PolicyError,
    core_rules,
    format_policy,
    load_policy,
    parse_policy,
    preferences,
    to_core,
    validate,
)
from negpol.qe import equivalent
from negpol.syntax import ParseError, parse_formula as P

REGISTRY = parse_registry((DATA / "storage.types").read_text())
BROKERING = (DATA / "storage-brokering.policy").read_text()


def policy(body: str, header: str = "serves: storage") -> str:
    return f"policy p {{ {header} rules: [ {body} ] }}"


RULE = ("{ trigger: true, uses: [s1: storage, s2: storage], "
        "offer: {capacity := s1.capacity + s2.capacity, price := s1.price + s2.price}, "
        "constraint: %s }")


def test_parse_brokering():
    p = parse_policy(BROKERING)
    assert p.name == "storage-brokering"
    assert p.serves == "storage"
    assert len(p.rules) == 1
    assert [s for s, _ in p.rules[0].uses] == ["s1", "s2"]
    assert [x for x, _ in p.rules[0].offer] == ["capacity", "price"]


def test_brokering_validates():
    assert validate(parse_policy(BROKERING), REGISTRY) == []


def test_brokering_core_rule():
    _, core = load_policy(BROKERING, REGISTRY)
    assert isinstance(core, CoreRule)
    assert core.trigger == TRUE
    assert [s for s, _ in core.uses] == ["s1", "s2"]
    expected = P(
        "capacity = s1.capacity + s2.capacity && price = 11/10*(s1.price + s2.price)"
        " && capacity >= 0 && price >= 0 && s1.capacity >= 0 && s1.price >= 0"
        " && s2.capacity >= 0 && s2.price >= 0")
    assert equivalent(core.psi, expected)


def test_empty_rules_is_parse_error():
    with pytest.raises(ParseError):
        parse_policy("policy p { serves: storage rules: [] }")


def test_preferences_clause():
    p = parse_policy(policy(RULE % "true", "serves: storage minimize: [price]"))
    assert p.minimize == ["price"]
    assert preferences(p) == ((Var("price"), "minimize"),)


def test_two_rules_compose():
    text = policy(RULE % "s1.capacity = s2.capacity" + ", " + RULE % "true")
    core = to_core(parse_policy(text), REGISTRY)
    assert isinstance(core, Compose)
    rules = core_rules(core)
    assert len(rules) == 2
    assert equivalent(rules[0].psi, rules[0].psi & P("s1.capacity = s2.capacity"))


def test_inline_types_and_dashed_names():
    text = ("policy my-broker { serves: {bw: decimal; bw >= 0} rules: ["
            "{ trigger: bw > 1, uses: [n1: {bw: decimal; true}], offer: [bw := 2*n1.bw], constraint: true } ] }")
    p, core = load_policy(text, {})
    assert p.name == "my-broker"
    assert equivalent(core.psi, P("bw = 2*n1.bw && bw >= 0"))


@pytest.mark.parametrize("text, code", [
    (policy(RULE % "true").replace("trigger: true", "trigger: speed > 1"), "trigger-scope"),
    (policy(RULE % "s3.capacity = 1"), "constraint-scope"),
    (policy(RULE % "true").replace("s1.price + s2.price", "s3.price"), "assign-scope"),
    (policy(RULE % "true").replace("price :=", "capacity :="), "assign-duplicate"),
    (policy(RULE % "true").replace("price :=", "speed :="), "assign-target"),
    (policy(RULE % "true").replace("s2: storage", "s2: disk"), "unknown-type"),
    (policy(RULE % "true", "serves: disk"), "unknown-type"),
    (policy(RULE % "true").replace("s2: storage", "s1: storage"), "duplicate-server"),
    (policy(RULE % "true", "serves: storage minimize: [speed]"), "preference-param"),
    (policy(RULE % "true", "serves: storage minimize: [price] maximize: [price]"), "preference-conflict"),
])
def test_diagnostics(text, code):
    diags = validate(parse_policy(text), REGISTRY)
    assert code in [d.code for d in diags]
    assert all(d.line >= 1 for d in diags)
    with pytest.raises(PolicyError):
        to_core(parse_policy(text), REGISTRY)


def test_diagnostic_position_points_at_trigger():
    text = "policy p {\n serves: storage\n rules: [\n { trigger: speed > 1,\n uses: [], offer: {}, constraint: true } ] }"
    (d,) = validate(parse_policy(text), REGISTRY)
    assert (d.code, d.line) == ("trigger-scope", 4)


def test_empty_uses_rule():
    text = policy("{ trigger: true, uses: [], offer: {}, constraint: price <= 3 }")
    core = to_core(parse_policy(text), REGISTRY)
    assert equivalent(core.psi, P("price <= 3 && capacity >= 0 && price >= 0"))


@pytest.mark.parametrize("text", [
    BROKERING,
    policy(RULE % "s1.capacity = s2.capacity || s1.price < 3", "serves: storage minimize: [price]"),
    policy(RULE % "true" + ", " + RULE % "s1.price <= 2"),
])
def test_print_parse_roundtrip(text):
    p = parse_policy(text)
    assert parse_policy(format_policy(p)) == p


def test_rule_count_preserved():
    text = policy(", ".join([RULE % "true"] * 3))
    assert len(core_rules(to_core(parse_policy(text), REGISTRY))) == 3
