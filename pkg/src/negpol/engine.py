"""Negotiators: executing core policies against bound sub-negotiators.

A rule answers a query ``q`` by querying its sub-servers in order.  The query
for server ``i`` is the projection of ``q and psi and r_1 .. r_{i-1}`` onto
that server's parameters; the final offer is the projection of
``psi and r_1 .. r_n`` onto the served parameters.  A composition of rules
answers with the disjunction of its branches' offers.
"""
from __future__ import annotations

import logging
import threading
import uuid
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence

from .config import ConfigType, format_config_type, is_formula_over, same_terms
from .logic import (
    FALSE,
    Atom,
    Constant,
    Formula,
    Var,
    Variable,
    add_prefix,
    conj,
    disj,
    free_vars,
    is_quantifier_free,
    strip_prefix,
)
from .policy import CorePolicy, CoreRule, core_rules
from .qe import (
    apply_preference,
    entails,
    equivalent,
    exists_qe,
    find_model,
    fixed_value,
    is_satisfiable,
    simplify,
)
from .syntax import format_formula, format_rational
from .tokens import (
    ExtendedOffer,
    Opaque,
    PolicySum,
    RuleOffer,
    SubOffer,
    TokenSigner,
    default_signer,
    false_offer,
)

log = logging.getLogger(__name__)


class NegotiationFailure(Exception):
    """A sub-negotiator could not produce an offer (unreachable, timed out, ...)."""


class ScriptExhaustedError(NegotiationFailure):
    pass


class BindingMismatchError(Exception):
    pass


class QueryError(ValueError):
    pass


class AcceptanceError(Exception):
    pass


class NotEntailingError(AcceptanceError):
    pass


class UnderSpecifiedError(AcceptanceError):
    pass


class UnknownTokenError(AcceptanceError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    kind: str  # "query" or "offer"
    sender: str
    receiver: str
    formula: Formula
    note: str = ""

    def __str__(self) -> str:
        note = f"  [{self.note}]" if self.note else ""
        return f"{self.sender} -> {self.receiver}: {self.kind} {format_formula(self.formula)}{note}"


Tracer = Callable[[TraceEvent], None]


@dataclass
class Invoice:
    session_id: str
    accepted: Formula
    token: bytes
    values: dict[Var, Fraction]
    sub_acceptances: dict[str, Formula] = field(default_factory=dict)
    sub_invoices: dict[str, dict] = field(default_factory=dict)
    sub_failures: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "session": self.session_id,
            "accepted": format_formula(self.accepted),
            "token": self.token.hex(),
            "values": {str(x): format_rational(v) for x, v in sorted(self.values.items())},
            "sub_acceptances": {s: format_formula(f) for s, f in self.sub_acceptances.items()},
            "sub_invoices": self.sub_invoices,
            "sub_failures": self.sub_failures,
        }


def _point(values: Mapping[Var, Fraction]) -> Formula:
    return conj(Atom(Variable(x), "=", Constant(v)) for x, v in sorted(values.items()))


class Negotiator:
    """Something that answers queries over its config type with offers."""

    issued_limit = 10000

    def __init__(self, ct: Optional[ConfigType], name: str = "", signer: Optional[TokenSigner] = None):
        self._ct = ct
        self.name = name or self.__class__.__name__.lower()
        self.signer = signer or default_signer()
        self._issued: OrderedDict[bytes, ExtendedOffer] = OrderedDict()
        self._issued_lock = threading.Lock()

    @property
    def ct(self) -> ConfigType:
        return self._ct

    def query(self, q: Formula) -> ExtendedOffer:
        raise NotImplementedError

    def check_query(self, q: Formula) -> None:
        if not is_quantifier_free(q):
            raise QueryError("queries must be quantifier-free")
        if not is_formula_over(q, self.ct):
            stray = ", ".join(sorted(str(x) for x in free_vars(q) - self.ct.lang))
            raise QueryError(f"query mentions {stray}, not parameters of {self.ct.label}")

    def issue(self, eo: ExtendedOffer) -> ExtendedOffer:
        blob = self.signer.blob(eo)
        with self._issued_lock:
            self._issued[blob] = eo
            while len(self._issued) > self.issued_limit:
                self._issued.popitem(last=False)
        return eo

    def token_blob(self, eo: ExtendedOffer) -> bytes:
        return self.signer.blob(eo)

    def lookup(self, blob: bytes) -> ExtendedOffer:
        with self._issued_lock:
            eo = self._issued.get(blob)
        if eo is None:
            raise UnknownTokenError("offer was not issued by this negotiator")
        return eo

    def accept(self, offer: ExtendedOffer, acceptance: Formula, session_id: str = "") -> Invoice:
        blob = self.token_blob(offer)
        offer = self.lookup(blob)
        if not is_quantifier_free(acceptance) or not is_formula_over(acceptance, self.ct):
            raise NotEntailingError("acceptance must be a quantifier-free formula over the config type")
        if not is_satisfiable(acceptance):
            raise UnderSpecifiedError("acceptance is unsatisfiable")
        if not entails(acceptance, offer.formula):
            raise NotEntailingError("acceptance does not entail the offer")
        values = {}
        for x in self.ct.params:
            val = fixed_value(acceptance, x)
            if val is None:
                raise UnderSpecifiedError(f"acceptance does not fix a value for {x}")
            values[x] = val
        invoice = Invoice(session_id or uuid.uuid4().hex, acceptance, blob, values)
        self.accept_subs(offer, values, invoice)
        return invoice

    def accept_subs(self, offer: ExtendedOffer, values: dict[Var, Fraction], invoice: Invoice) -> None:
        """Hook for negotiators that hold sub-offers."""


class LeafNegotiator(Negotiator):
    """A base case: answers from a fixed capability without sub-negotiators."""

    def __init__(self, ct: ConfigType, capability: Formula, name: str = "leaf", **kw):
        super().__init__(ct, name, **kw)
        if not is_quantifier_free(capability) or not is_formula_over(capability, ct):
            raise QueryError("capability must be a quantifier-free formula over the config type")
        self.capability = capability

    def query(self, q: Formula) -> ExtendedOffer:
        self.check_query(q)
        both = q & self.capability
        formula = simplify(both) if is_satisfiable(both) else FALSE
        return self.issue(ExtendedOffer(formula, Opaque(uuid.uuid4().bytes)))


class ScriptedNegotiator(Negotiator):
    """Returns pre-recorded offers in order, whatever the query."""

    def __init__(self, ct: ConfigType, script: Sequence[Formula], name: str = "scripted", **kw):
        super().__init__(ct, name, **kw)
        for f in script:
            if not is_formula_over(f, ct):
                raise QueryError(f"scripted offer {format_formula(f)} is not over {ct.label}")
        self.script = list(script)
        self._next = 0
        self._lock = threading.Lock()

    def query(self, q: Formula) -> ExtendedOffer:
        with self._lock:
            if self._next >= len(self.script):
                raise ScriptExhaustedError(f"{self.name}: script exhausted")
            formula = self.script[self._next]
            self._next += 1
        return self.issue(ExtendedOffer(formula, Opaque(uuid.uuid4().bytes)))


def leaf_negotiator(ct: ConfigType, capability: Formula, name: str = "leaf") -> LeafNegotiator:
    return LeafNegotiator(ct, capability, name)


def scripted_negotiator(ct: ConfigType, script: Sequence[Formula], name: str = "scripted") -> ScriptedNegotiator:
    return ScriptedNegotiator(ct, script, name)


# -- rule semantics -----------------------------------------------------------


def trigger_applicable(rule: CoreRule, q: Formula) -> bool:
    return is_satisfiable(q & rule.trigger)


def _subquery(rule: CoreRule, q: Formula, priors: Sequence[Formula], server: str) -> Formula:
    body = conj([q, rule.psi, *priors])
    keep = rule.sub_lang(server)
    return exists_qe((free_vars(body) | rule.all_vars) - keep, body)


def subquery(rule: CoreRule, q: Formula, prior_offers: Sequence[Formula], i: int) -> Formula:
    """Query for the ``i``-th used server (1-based), over its prefixed parameters."""
    if not 1 <= i <= len(rule.uses):
        raise IndexError(f"rule uses {len(rule.uses)} servers; no server {i}")
    if len(prior_offers) != i - 1:
        raise ValueError(f"expected {i - 1} prior offers, got {len(prior_offers)}")
    return _subquery(rule, q, prior_offers, rule.uses[i - 1][0])


def final_offer(rule: CoreRule, offers: Sequence[Formula]) -> Formula:
    """Projection of ``psi`` and the (prefixed) sub-offers onto the served type."""
    body = conj([rule.psi, *offers])
    return exists_qe((free_vars(body) | rule.all_vars) - rule.ct.lang, body)


def _ask(sub: Negotiator, server: str, ct: ConfigType, q: Formula,
         me: str, tracer: Optional[Tracer]) -> ExtendedOffer:
    if tracer:
        tracer(TraceEvent("query", me, server, q))
    try:
        eo = sub.query(q)
    except NegotiationFailure as exc:
        log.warning("sub-negotiator %s failed: %s", server, exc)
        eo = false_offer(f"failure: {exc}")
        if tracer:
            tracer(TraceEvent("offer", server, me, eo.formula, note=f"failure: {exc}"))
        return eo
    if not is_quantifier_free(eo.formula) or not is_formula_over(eo.formula, ct):
        log.warning("sub-negotiator %s returned an offer outside its type", server)
        eo = false_offer("ill-typed offer")
    if tracer:
        tracer(TraceEvent("offer", server, me, eo.formula))
    return eo


def _run_group(rule: CoreRule, q: Formula, group: Sequence[str], subs: Mapping[str, Negotiator],
               me: str, tracer: Optional[Tracer]) -> tuple[list[SubOffer], bool]:
    """Sequentially negotiate with ``group``; returns sub-offers and a failure flag."""
    records: list[SubOffer] = []
    priors: list[Formula] = []
    for server in group:
        ct = rule.sub_type(server)
        qi = strip_prefix(_subquery(rule, q, priors, server), server)
        eo = _ask(subs[server], server, ct, qi, me, tracer)
        records.append(SubOffer(server, ct, eo))
        r = add_prefix(eo.formula, server)
        if not is_satisfiable(r):
            return records, True
        priors.append(r)
    return records, False


def run_rule_offer(rule: CoreRule, q: Formula, subs: Mapping[str, Negotiator], *,
                   parallel: bool = False, me: str = "negotiator",
                   tracer: Optional[Tracer] = None) -> RuleOffer:
    if not trigger_applicable(rule, q):
        return RuleOffer(FALSE, rule.psi, (), fired=False, label=rule.label)
    groups = analyze_parallel(rule) if parallel else [rule.servers]
    groups = [g for g in groups if g]
    if parallel and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=len(groups)) as pool:
            futures = [pool.submit(_run_group, rule, q, g, subs, me, tracer) for g in groups]
            results = [f.result() for f in futures]
    else:
        results = []
        for g in groups:
            res = _run_group(rule, q, g, subs, me, tracer)
            results.append(res)
            if res[1]:
                break
    by_server = {rec.server: rec for recs, _ in results for rec in recs}
    records = tuple(by_server[s] for s in rule.servers if s in by_server)
    if any(failed for _, failed in results):
        return RuleOffer(FALSE, rule.psi, records, label=rule.label)
    offers = [add_prefix(rec.offer.formula, rec.server) for rec in records]
    return RuleOffer(final_offer(rule, offers), rule.psi, records, label=rule.label)


def run_rule(rule: CoreRule, q: Formula, subs: Mapping[str, Negotiator], **kw) -> Formula:
    return run_rule_offer(rule, q, subs, **kw).formula


def run_policy(p: CorePolicy, q: Formula, subs: Mapping[str, Negotiator],
               preferences: Sequence[tuple[Var, str]] = (), **kw) -> ExtendedOffer:
    branches = tuple(run_rule_offer(r, q, subs, **kw) for r in core_rules(p))
    formula = simplify(disj(b.formula for b in branches))
    for x, direction in preferences:
        formula = apply_preference(formula, x, direction)
    return ExtendedOffer(formula, PolicySum(branches, tuple(preferences)))


# -- closing a policy ---------------------------------------------------------


class PolicyNegotiator(Negotiator):
    """A core policy closed over concrete sub-negotiators."""

    def __init__(self, core: CorePolicy, bindings: Mapping[str, Negotiator],
                 preferences: Sequence[tuple[Var, str]] = (), name: str = "negotiator",
                 parallel: bool = False, tracer: Optional[Tracer] = None, **kw):
        super().__init__(core.ct, name, **kw)
        self.core = core
        self.bindings = dict(bindings)
        self.preferences = tuple(preferences)
        self.parallel = parallel
        self.tracer = tracer

    def query(self, q: Formula) -> ExtendedOffer:
        self.check_query(q)
        eo = run_policy(self.core, q, self.bindings, self.preferences,
                        parallel=self.parallel, me=self.name, tracer=self.tracer)
        return self.issue(eo)

    def accept_subs(self, offer: ExtendedOffer, values: dict[Var, Fraction], invoice: Invoice) -> None:
        token = offer.token
        if not isinstance(token, PolicySum):
            return
        point = _point(values)
        for ro in token.offers:
            if not ro.fired or not is_satisfiable(point & ro.formula):
                continue
            body = conj([ro.assignment, point,
                         *(add_prefix(s.offer.formula, s.server) for s in ro.subs)])
            model = find_model(body)
            if model is None:
                continue
            for s in ro.subs:
                sub_vals = {p: model.get(p.with_prefix(s.server), Fraction(0)) for p in s.ct.params}
                acc = _point(sub_vals)
                invoice.sub_acceptances[s.server] = acc
                sub = self.bindings.get(s.server)
                if sub is None:
                    continue
                try:
                    inv = sub.accept(s.offer, acc)
                    invoice.sub_invoices[s.server] = inv.to_json()
                except (AcceptanceError, NegotiationFailure) as exc:
                    invoice.sub_failures[s.server] = str(exc)
            return


def close(p: CorePolicy, bindings: Mapping[str, Negotiator],
          preferences: Sequence[tuple[Var, str]] = (), **kw) -> PolicyNegotiator:
    for rule in core_rules(p):
        for server, ct in rule.uses:
            if server not in bindings:
                raise BindingMismatchError(f"no negotiator bound for server {server!r}")
            try:
                bound_ct = bindings[server].ct
            except NegotiationFailure as exc:
                log.warning("cannot check terms of %s yet: %s", server, exc)
                continue
            if not same_terms(bound_ct, ct):
                raise BindingMismatchError(
                    f"server {server!r} negotiates {format_config_type(bound_ct)}, "
                    f"rule expects {format_config_type(ct)}")
    return PolicyNegotiator(p, bindings, preferences, **kw)


# -- extended-offer validation ------------------------------------------------


def validate_token(eo: ExtendedOffer) -> bool:
    token = eo.token
    if isinstance(token, Opaque):
        return True
    combined = disj(ro.formula for ro in token.offers)
    for x, direction in token.preferences:
        combined = apply_preference(simplify(combined), x, direction)
    if not equivalent(eo.formula, combined):
        return False
    return all(_valid_rule_offer(ro) for ro in token.offers)


def _valid_rule_offer(ro: RuleOffer) -> bool:
    if not ro.fired:
        return not is_satisfiable(ro.formula)
    body = conj([ro.assignment, *(add_prefix(s.offer.formula, s.server) for s in ro.subs)])
    sub_vars = {x for x in free_vars(body) if x.prefix is not None}
    if not equivalent(ro.formula, exists_qe(sub_vars, body)):
        return False
    return all(validate_token(s.offer) for s in ro.subs)


# -- parallel analysis --------------------------------------------------------


def _factors(f: Formula, blocks: Sequence[frozenset[Var]]) -> bool:
    """Whether ``f`` is the conjunction of its projections onto ``blocks``."""
    everything = frozenset().union(*blocks) | free_vars(f)
    parts = [exists_qe(everything - b, f) for b in blocks]
    return equivalent(f, conj(parts))


@lru_cache(maxsize=256)
def analyze_parallel(rule: CoreRule) -> list[list[str]]:
    """Partition the used servers into groups that can be queried concurrently.

    Two servers are independent when the rule condition, projected onto their
    parameters and the served parameters, splits into a served part and one
    part per server.  Groups are the connected components of the dependency
    relation; the grouping is accepted only if the whole condition factors
    along it, otherwise all servers form one group.
    """
    servers = rule.servers
    if len(servers) <= 1:
        return [list(servers)]
    top = rule.ct.lang
    langs = {s: rule.sub_lang(s) for s in servers}
    everything = rule.all_vars | free_vars(rule.psi)
    parent = {s: s for s in servers}

    def find(s: str) -> str:
        while parent[s] != s:
            parent[s] = parent[parent[s]]
            s = parent[s]
        return s

    for i, a in enumerate(servers):
        for b in servers[i + 1:]:
            if find(a) == find(b):
                continue
            keep = top | langs[a] | langs[b]
            proj = exists_qe(everything - keep, rule.psi)
            if not _factors(proj, [top, langs[a], langs[b]]):
                parent[find(b)] = find(a)

    groups: dict[str, list[str]] = {}
    for s in servers:
        groups.setdefault(find(s), []).append(s)
    result = list(groups.values())
    if len(result) > 1:
        blocks = [top] + [frozenset().union(*(langs[s] for s in g)) for g in result]
        if not _factors(rule.psi, blocks):
            return [list(servers)]
    return result
