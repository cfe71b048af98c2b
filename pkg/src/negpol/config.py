"""Configuration types: negotiable parameters plus a constraint on them."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

from .logic import TRUE, Formula, LogicError, Var, add_prefix, free_vars, is_quantifier_free
from .qe import equivalent, is_satisfiable
from .syntax import Parser, format_formula

log = logging.getLogger(__name__)

BASIC_TYPES = ("decimal",)


class ConfigTypeError(LogicError):
    pass


@dataclass(frozen=True)
class ConfigType:
    params: tuple[Var, ...]
    constraint: Formula = TRUE
    name: Optional[str] = None

    def __post_init__(self):
        seen = set()
        for p in self.params:
            if p in seen:
                raise ConfigTypeError(f"duplicate parameter {p}")
            seen.add(p)
        if not is_quantifier_free(self.constraint):
            raise ConfigTypeError("config type constraint must be quantifier-free")
        stray = free_vars(self.constraint) - seen
        if stray:
            names = ", ".join(sorted(str(x) for x in stray))
            raise ConfigTypeError(f"constraint mentions non-parameters: {names}")

    @property
    def lang(self) -> frozenset[Var]:
        return frozenset(self.params)

    @property
    def label(self) -> str:
        return self.name or format_config_type(self)

    def check_satisfiable(self) -> None:
        if not is_satisfiable(self.constraint):
            raise ConfigTypeError(f"config type {self.label} has an unsatisfiable constraint")
        if not self.params:
            log.warning("config type %s has no parameters", self.label)

    def named(self, name: Optional[str]) -> "ConfigType":
        return ConfigType(self.params, self.constraint, name)


def lang(ct: ConfigType) -> frozenset[Var]:
    return ct.lang


def is_formula_over(f: Formula, ct: ConfigType) -> bool:
    return free_vars(f) <= ct.lang


def prefix_params(ct: ConfigType, server: str) -> ConfigType:
    if any(p.prefix is not None for p in ct.params):
        raise ConfigTypeError(f"config type {ct.label} is already prefixed")
    params = tuple(p.with_prefix(server) for p in ct.params)
    return ConfigType(params, add_prefix(ct.constraint, server), ct.name)


def same_terms(a: ConfigType, b: ConfigType) -> bool:
    """Same parameters and logically equivalent constraints (names ignored)."""
    return a.lang == b.lang and equivalent(a.constraint, b.constraint)


class ConfigParser(Parser):
    def config_type(self, name: Optional[str] = None) -> ConfigType:
        start = self.expect("{")
        params: list[Var] = []
        while not self.at(";"):
            ident = self.expect_id("parameter name")
            var = Var(ident.text)
            if self.at(".") and self.tok.pos == ident.end and self.peek().kind == "ID":
                self.advance()
                var = Var(self.advance().text, ident.text)
            self.expect(":")
            bt = self.expect_id("basic type")
            if bt.text not in BASIC_TYPES:
                raise self.error(f"unknown basic type {bt.text!r}", bt)
            if var in params:
                raise self.error(f"duplicate parameter {ident.text!r}", ident)
            params.append(var)
            if not self.accept(","):
                break
        self.expect(";")
        body_tok = self.tok
        constraint = self.formula()
        self.expect("}")
        try:
            return ConfigType(tuple(params), constraint, name)
        except ConfigTypeError as exc:
            raise self.error(str(exc), body_tok if "constraint" in str(exc) else start) from None


def parse_config_type(text: str, name: Optional[str] = None, check: bool = True) -> ConfigType:
    p = ConfigParser(text)
    ct = p.config_type(name)
    p.finish()
    if check:
        ct.check_satisfiable()
    return ct


def parse_registry(text: str) -> dict[str, ConfigType]:
    """Parse ``id = {params; constraint}`` definitions (``#`` starts a comment)."""
    p = ConfigParser(text)
    out: dict[str, ConfigType] = {}
    while p.tok.kind != "EOF":
        ident = p.expect_id("type name")
        if ident.text in out:
            raise p.error(f"duplicate type {ident.text!r}", ident)
        p.expect("=")
        out[ident.text] = p.config_type(ident.text)
        p.accept(";")
    for ct in out.values():
        ct.check_satisfiable()
    return out


def format_config_type(ct: ConfigType) -> str:
    params = ", ".join(f"{p}: decimal" for p in ct.params)
    return f"{{{params}; {format_formula(ct.constraint)}}}"


def format_registry(registry: Mapping[str, ConfigType]) -> str:
    return "".join(f"{name} = {format_config_type(ct)}\n" for name, ct in registry.items())

