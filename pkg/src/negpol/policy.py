"""Negotiation policies: parsing, validation and compilation to core rules.

Concrete syntax::

    policy storage-brokering {
      serves: storage
      minimize: [price]
      rules: [
        { trigger: true,
          uses: [s1: storage, s2: storage],
          offer: { capacity := s1.capacity + s2.capacity,
                   price := 1.1*(s1.price + s2.price) },
          constraint: true },
      ]
    }

A type expression is either a registry name or an inline config type
``{x: decimal, ...; constraint}``.  Commas between clauses are optional and
trailing commas in lists are allowed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .config import ConfigParser, ConfigType, ConfigTypeError, format_config_type, prefix_params
from .logic import (
    TRUE,
    Atom,
    Formula,
    Term,
    Var,
    Variable,
    conj,
    free_vars,
    is_quantifier_free,
    term_vars,
)
from .qe import MAXIMIZE, MINIMIZE, qe
from .syntax import ParseError, format_formula, format_term

TypeExpr = Union[str, ConfigType]


@dataclass(frozen=True)
class Rule:
    trigger: Formula
    uses: tuple[tuple[str, TypeExpr], ...]
    offer: tuple[tuple[str, Term], ...]
    constraint: Formula
    # source positions of the rule and its clauses, for diagnostics
    positions: Mapping[str, tuple[int, int]] = field(default_factory=dict, compare=False, hash=False)

    def pos(self, part: str = "rule") -> tuple[int, int]:
        return self.positions.get(part, self.positions.get("rule", (0, 0)))


@dataclass(frozen=True)
class Policy:
    name: str
    serves: TypeExpr
    rules: tuple[Rule, ...]
    preferences: tuple[tuple[str, str], ...] = ()
    positions: Mapping[str, tuple[int, int]] = field(default_factory=dict, compare=False, hash=False)

    @property
    def minimize(self) -> list[str]:
        return [p for p, d in self.preferences if d == MINIMIZE]

    @property
    def maximize(self) -> list[str]:
        return [p for p, d in self.preferences if d == MAXIMIZE]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    line: int = 0
    column: int = 0

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.code}: {self.message}"

    def as_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "line": self.line, "column": self.column}


class PolicyError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


# -- core language ------------------------------------------------------------


@dataclass(frozen=True)
class CoreRule:
    ct: ConfigType
    trigger: Formula
    uses: tuple[tuple[str, ConfigType], ...]
    psi: Formula
    # the assignment part of psi, kept for extended-offer tokens
    assignment: Formula = TRUE
    label: str = ""

    @property
    def servers(self) -> list[str]:
        return [s for s, _ in self.uses]

    def sub_type(self, server: str) -> ConfigType:
        for s, ct in self.uses:
            if s == server:
                return ct
        raise KeyError(server)

    def sub_lang(self, server: str) -> frozenset[Var]:
        return frozenset(p.with_prefix(server) for p in self.sub_type(server).params)

    @property
    def all_vars(self) -> frozenset[Var]:
        out = set(self.ct.lang)
        for s, _ in self.uses:
            out |= self.sub_lang(s)
        return frozenset(out)


@dataclass(frozen=True)
class Compose:
    left: "CorePolicy"
    right: "CorePolicy"

    @property
    def ct(self) -> ConfigType:
        return self.left.ct


CorePolicy = Union[CoreRule, Compose]


def core_rules(p: CorePolicy) -> list[CoreRule]:
    if isinstance(p, CoreRule):
        return [p]
    return core_rules(p.left) + core_rules(p.right)


def core_servers(p: CorePolicy) -> dict[str, ConfigType]:
    out: dict[str, ConfigType] = {}
    for r in core_rules(p):
        for s, ct in r.uses:
            out.setdefault(s, ct)
    return out


# -- parsing ------------------------------------------------------------------


class PolicyParser(ConfigParser):
    def position(self, tok=None) -> tuple[int, int]:
        from .syntax import line_col
        return line_col(self.text, (tok or self.tok).pos)

    def dashed_name(self) -> str:
        first = self.expect_id("policy name")
        parts = [first.text]
        end = first.end
        while self.at("-") and self.tok.pos == end and self.peek().pos == self.tok.end:
            self.advance()
            nxt = self.advance()
            if nxt.kind not in ("ID", "NUM"):
                raise self.error("malformed policy name", nxt)
            parts.append(nxt.text)
            end = nxt.end
        return "-".join(parts)

    def keyword(self, word: str) -> tuple[int, int]:
        pos = self.position()
        if not (self.tok.kind == "ID" and self.tok.text == word):
            found = self.tok.text or "end of input"
            raise self.error(f"expected '{word}:', found {found!r}")
        self.advance()
        self.expect(":")
        return pos

    def type_expr(self) -> TypeExpr:
        if self.at("{"):
            return self.config_type()
        return self.expect_id("type name").text

    def id_list(self) -> list[str]:
        self.expect("[")
        out = []
        while not self.at("]"):
            out.append(self.expect_id("parameter name").text)
            if not self.accept(","):
                break
        self.expect("]")
        return out

    def policy(self) -> Policy:
        start = self.position()
        if not (self.tok.kind == "ID" and self.tok.text == "policy"):
            raise self.error("expected 'policy'")
        self.advance()
        name = self.dashed_name()
        self.expect("{")
        positions = {"policy": start}
        positions["serves"] = self.keyword("serves")
        serves = self.type_expr()
        self.accept(",")
        prefs: list[tuple[str, str]] = []
        seen_clauses = set()
        while self.tok.kind == "ID" and self.tok.text in (MINIMIZE, MAXIMIZE):
            direction = self.tok.text
            if direction in seen_clauses:
                raise self.error(f"repeated '{direction}' clause")
            seen_clauses.add(direction)
            positions[direction] = self.keyword(direction)
            prefs.extend((p, direction) for p in self.id_list())
            self.accept(",")
        positions["rules"] = self.keyword("rules")
        self.expect("[")
        rules = []
        while not self.at("]"):
            rules.append(self.rule())
            if not self.accept(","):
                break
        self.expect("]")
        self.accept(",")
        self.expect("}")
        if not rules:
            line, col = positions["rules"]
            raise ParseError("a policy needs at least one rule", line, col)
        return Policy(name, serves, tuple(rules), tuple(prefs), positions)

    def rule(self) -> Rule:
        positions = {"rule": self.position()}
        self.expect("{")
        positions["trigger"] = self.keyword("trigger")
        trigger = self.formula()
        self.accept(",")
        positions["uses"] = self.keyword("uses")
        self.expect("[")
        uses = []
        while not self.at("]"):
            server = self.expect_id("server name").text
            self.expect(":")
            uses.append((server, self.type_expr()))
            if not self.accept(","):
                break
        self.expect("]")
        self.accept(",")
        positions["offer"] = self.keyword("offer")
        close = {"{": "}", "[": "]"}.get(self.tok.text)
        if close is None:
            raise self.error("expected '{' or '[' after 'offer:'")
        self.advance()
        offer = []
        while not self.at(close):
            target = self.expect_id("parameter name").text
            self.expect(":=")
            offer.append((target, self.term()))
            if not self.accept(","):
                break
        self.expect(close)
        self.accept(",")
        positions["constraint"] = self.keyword("constraint")
        constraint = self.formula()
        self.accept(",")
        self.expect("}")
        return Rule(trigger, tuple(uses), tuple(offer), constraint, positions)


def parse_policy(text: str) -> Policy:
    p = PolicyParser(text)
    pol = p.policy()
    p.finish()
    return pol


# -- printing -----------------------------------------------------------------


def _format_type_expr(t: TypeExpr) -> str:
    return t if isinstance(t, str) else format_config_type(t)


def format_policy(p: Policy) -> str:
    lines = [f"policy {p.name} {{", f"  serves: {_format_type_expr(p.serves)}"]
    for direction in dict.fromkeys(d for _, d in p.preferences):
        names = ", ".join(x for x, d in p.preferences if d == direction)
        lines.append(f"  {direction}: [{names}]")
    lines.append("  rules: [")
    for r in p.rules:
        uses = ", ".join(f"{s}: {_format_type_expr(t)}" for s, t in r.uses)
        offer = ",\n             ".join(f"{x} := {format_term(t)}" for x, t in r.offer)
        lines.append(f"    {{ trigger: {format_formula(r.trigger)},")
        lines.append(f"      uses: [{uses}],")
        lines.append(f"      offer: {{ {offer} }},")
        lines.append(f"      constraint: {format_formula(r.constraint)} }},")
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


# -- validation ---------------------------------------------------------------


def _resolve(t: TypeExpr, registry: Mapping[str, ConfigType]) -> Optional[ConfigType]:
    if isinstance(t, ConfigType):
        return t
    return registry.get(t)


def _names(vs) -> str:
    return ", ".join(sorted(str(x) for x in vs))


def validate(p: Policy, registry: Mapping[str, ConfigType]) -> list[Diagnostic]:
    diags: list[Diagnostic] = []

    def add(code: str, message: str, pos: tuple[int, int]) -> None:
        diags.append(Diagnostic(code, message, pos[0], pos[1]))

    ct = _resolve(p.serves, registry)
    serves_pos = p.positions.get("serves", (0, 0))
    if ct is None:
        add("unknown-type", f"served type {p.serves!r} is not defined", serves_pos)
    elif isinstance(p.serves, ConfigType):
        try:
            p.serves.check_satisfiable()
        except ConfigTypeError as exc:
            add("invalid-type", str(exc), serves_pos)

    if not p.rules:
        add("no-rules", "a policy needs at least one rule", p.positions.get("rules", (0, 0)))

    seen_prefs: dict[str, str] = {}
    for param, direction in p.preferences:
        pos = p.positions.get(direction, (0, 0))
        if param in seen_prefs:
            code = "preference-conflict" if seen_prefs[param] != direction else "preference-duplicate"
            add(code, f"parameter {param!r} listed more than once in preferences", pos)
        seen_prefs[param] = direction
        if ct is not None and Var(param) not in ct.lang:
            add("preference-param", f"{param!r} is not a parameter of the served type", pos)

    for r in p.rules:
        diags.extend(_validate_rule(r, ct, registry))
    return diags


def _validate_rule(r: Rule, ct: Optional[ConfigType], registry) -> list[Diagnostic]:
    diags: list[Diagnostic] = []

    def add(code: str, message: str, part: str) -> None:
        line, col = r.pos(part)
        diags.append(Diagnostic(code, message, line, col))

    sub_vars: set[Var] = set()
    servers: set[str] = set()
    for server, t in r.uses:
        if server in servers:
            add("duplicate-server", f"server {server!r} is used twice", "uses")
        servers.add(server)
        sub = _resolve(t, registry)
        if sub is None:
            add("unknown-type", f"type {t!r} of server {server!r} is not defined", "uses")
            continue
        if isinstance(t, ConfigType):
            try:
                t.check_satisfiable()
            except ConfigTypeError as exc:
                add("invalid-type", str(exc), "uses")
        sub_vars |= {x.with_prefix(server) for x in sub.params}

    if ct is not None:
        stray = free_vars(r.trigger) - ct.lang
        if stray:
            add("trigger-scope", f"trigger mentions {_names(stray)}, not parameters of the served type",
                "trigger")
        stray = free_vars(r.constraint) - ct.lang - sub_vars
        known_servers = servers
        if stray:
            unknown = [x for x in stray if x.prefix is not None and x.prefix not in known_servers]
            detail = f" (server {_names({x.prefix for x in unknown})} not in uses)" if unknown else ""
            add("constraint-scope", f"constraint mentions {_names(stray)}{detail}", "constraint")

    targets: set[str] = set()
    for target, t in r.offer:
        if target in targets:
            add("assign-duplicate", f"parameter {target!r} assigned more than once", "offer")
        targets.add(target)
        if ct is not None and Var(target) not in ct.lang:
            add("assign-target", f"{target!r} is not a parameter of the served type", "offer")
        stray = term_vars(t) - sub_vars
        if stray:
            add("assign-scope",
                f"assignment to {target!r} mentions {_names(stray)}, not parameters of used servers",
                "offer")
    return diags


# -- compilation --------------------------------------------------------------


def _qf(f: Formula) -> Formula:
    return f if is_quantifier_free(f) else qe(f)


def compile_rule(r: Rule, ct: ConfigType, registry: Mapping[str, ConfigType], label: str = "") -> CoreRule:
    uses = []
    sub_constraints = []
    for server, t in r.uses:
        sub = _resolve(t, registry)
        if sub is None:
            raise PolicyError([Diagnostic("unknown-type", f"type {t!r} is not defined", *r.pos("uses"))])
        uses.append((server, sub))
        sub_constraints.append(prefix_params(sub, server).constraint)
    assignment = conj(Atom(Variable(Var(x)), "=", t) for x, t in r.offer)
    parts = [_qf(r.constraint), assignment, ct.constraint, *sub_constraints]
    psi = conj(f for f in parts if f != TRUE)
    return CoreRule(ct, _qf(r.trigger), tuple(uses), psi, assignment, label)


def to_core(p: Policy, registry: Mapping[str, ConfigType]) -> CorePolicy:
    """Translate a validated policy into right-nested compositions of core rules."""
    diags = validate(p, registry)
    if diags:
        raise PolicyError(diags)
    ct = _resolve(p.serves, registry)
    assert ct is not None
    rules = [compile_rule(r, ct, registry, f"{p.name}#{k + 1}") for k, r in enumerate(p.rules)]
    core: CorePolicy = rules[-1]
    for r in reversed(rules[:-1]):
        core = Compose(r, core)
    return core


def preferences(p: Policy) -> tuple[tuple[Var, str], ...]:
    return tuple((Var(x), d) for x, d in p.preferences)


def load_policy(text: str, registry: Mapping[str, ConfigType]) -> tuple[Policy, CorePolicy]:
    pol = parse_policy(text)
    return pol, to_core(pol, registry)
