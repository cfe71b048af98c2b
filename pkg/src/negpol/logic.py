"""Terms and formulas of the linear-constraint logic.

Formulas are built from four core constructors (``Atom``, ``And``, ``Not``,
``Exists``).  Disjunction, implication, universal quantification and the
constants true/false are derived and expand into the core four when built,
so every function here only has to handle four cases.

Coefficients and constants are exact rationals (``fractions.Fraction``).
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Union

Rational = Fraction

RELATIONS = ("=", "!=", "<=", ">=", "<", ">")

NEGATED_REL = {"=": "!=", "!=": "=", "<=": ">", ">": "<=", ">=": "<", "<": ">="}


class LogicError(Exception):
    pass


class CaptureError(LogicError):
    """Substituted term mentions a variable bound in the target formula."""


class MissingVariableError(LogicError, KeyError):
    pass


class NotQuantifierFreeError(LogicError):
    pass


class ResourceLimitError(LogicError):
    """Raised when a normal form exceeds the configured disjunct cap."""


class _Limits:
    dnf_cap: int = 4096


limits = _Limits()


def set_dnf_cap(n: int) -> None:
    if n < 1:
        raise ValueError("DNF cap must be positive")
    limits.dnf_cap = n


def rational(value: Union[int, str, Fraction]) -> Fraction:
    """Exact conversion; strings accept ``p/q`` and decimal notation."""
    if isinstance(value, float):
        raise TypeError("floats are not accepted; pass a string or Fraction")
    return Fraction(value)


# -- variables and terms ------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str
    prefix: Optional[str] = None

    def __str__(self) -> str:
        return self.name if self.prefix is None else f"{self.prefix}.{self.name}"

    def sort_key(self) -> tuple[str, str]:
        return (self.prefix or "", self.name)

    def __lt__(self, other: "Var") -> bool:
        return self.sort_key() < other.sort_key()

    def with_prefix(self, prefix: Optional[str]) -> "Var":
        return Var(self.name, prefix)


class Term:
    __slots__ = ()

    def __add__(self, other: "Term") -> "Term":
        return Sum(self, as_term(other))

    def __radd__(self, other) -> "Term":
        return Sum(as_term(other), self)

    def __mul__(self, c) -> "Term":
        return Scale(rational(c), self)

    __rmul__ = __mul__


@dataclass(frozen=True)
class Variable(Term):
    var: Var


@dataclass(frozen=True)
class Constant(Term):
    value: Fraction


@dataclass(frozen=True)
class Sum(Term):
    left: Term
    right: Term


@dataclass(frozen=True)
class Scale(Term):
    coeff: Fraction
    term: Term


def as_term(x) -> Term:
    if isinstance(x, Term):
        return x
    if isinstance(x, Var):
        return Variable(x)
    return Constant(rational(x))


def v(name: str, prefix: Optional[str] = None) -> Variable:
    """Shorthand for a variable term; ``v("s1.price")`` splits the prefix."""
    if prefix is None and "." in name:
        prefix, name = name.split(".", 1)
    return Variable(Var(name, prefix))


def term_vars(t: Term) -> frozenset[Var]:
    if isinstance(t, Variable):
        return frozenset([t.var])
    if isinstance(t, Constant):
        return frozenset()
    if isinstance(t, Sum):
        return term_vars(t.left) | term_vars(t.right)
    return term_vars(t.term)


def linearize(t: Term) -> tuple[dict[Var, Fraction], Fraction]:
    """Flatten a term to ``(coefficients, constant)``; zero coefficients dropped."""
    coeffs: dict[Var, Fraction] = {}
    const = Fraction(0)
    stack: list[tuple[Term, Fraction]] = [(t, Fraction(1))]
    while stack:
        node, k = stack.pop()
        if isinstance(node, Variable):
            coeffs[node.var] = coeffs.get(node.var, Fraction(0)) + k
        elif isinstance(node, Constant):
            const += k * node.value
        elif isinstance(node, Sum):
            stack.append((node.left, k))
            stack.append((node.right, k))
        elif isinstance(node, Scale):
            stack.append((node.term, k * node.coeff))
        else:
            raise LogicError(f"not a linear term: {node!r}")
    return {x: c for x, c in coeffs.items() if c != 0}, const


def eval_term(t: Term, valuation: Mapping[Var, Fraction]) -> Fraction:
    coeffs, const = linearize(t)
    total = const
    for x, c in coeffs.items():
        try:
            total += c * valuation[x]
        except KeyError:
            raise MissingVariableError(f"no value for {x}") from None
    return total


def subst_term(t: Term, x: Var, s: Term) -> Term:
    if isinstance(t, Variable):
        return s if t.var == x else t
    if isinstance(t, Constant):
        return t
    if isinstance(t, Sum):
        return Sum(subst_term(t.left, x, s), subst_term(t.right, x, s))
    return Scale(t.coeff, subst_term(t.term, x, s))


# -- formulas -----------------------------------------------------------------


class Formula:
    __slots__ = ()

    def __and__(self, other: "Formula") -> "Formula":
        return And(self, other)

    def __or__(self, other: "Formula") -> "Formula":
        return Or(self, other)

    def __invert__(self) -> "Formula":
        return Not(self)


@dataclass(frozen=True)
class Atom(Formula):
    lhs: Term
    rel: str
    rhs: Term

    def __post_init__(self):
        if self.rel not in RELATIONS:
            raise LogicError(f"unknown relation {self.rel!r}")


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Not(Formula):
    body: Formula


@dataclass(frozen=True)
class Exists(Formula):
    var: Var
    body: Formula


ZERO = Constant(Fraction(0))
ONE = Constant(Fraction(1))
TRUE = Atom(ZERO, "=", ZERO)
FALSE = Atom(ZERO, "=", ONE)


def Or(a: Formula, b: Formula) -> Formula:
    return Not(And(Not(a), Not(b)))


def Implies(a: Formula, b: Formula) -> Formula:
    return Not(And(a, Not(b)))


def Forall(x: Var, body: Formula) -> Formula:
    return Not(Exists(x, Not(body)))


def atom(lhs, rel: str, rhs) -> Atom:
    return Atom(as_term(lhs), rel, as_term(rhs))


def conj(parts: Iterable[Formula]) -> Formula:
    """Left-nested conjunction; the empty conjunction is TRUE."""
    result: Optional[Formula] = None
    for p in parts:
        result = p if result is None else And(result, p)
    return TRUE if result is None else result


def disj(parts: Iterable[Formula]) -> Formula:
    """Left-nested disjunction; the empty disjunction is FALSE."""
    result: Optional[Formula] = None
    for p in parts:
        result = p if result is None else Or(result, p)
    return FALSE if result is None else result


def exists_all(xs: Iterable[Var], body: Formula) -> Formula:
    for x in sorted(set(xs), reverse=True):
        body = Exists(x, body)
    return body


def or_parts(f: Formula) -> Optional[tuple[Formula, Formula]]:
    """Return ``(a, b)`` when ``f`` is the encoding of ``a || b``."""
    if isinstance(f, Not) and isinstance(f.body, And):
        inner = f.body
        if isinstance(inner.left, Not) and isinstance(inner.right, Not):
            return inner.left.body, inner.right.body
    return None


def free_vars(f: Formula) -> frozenset[Var]:
    if isinstance(f, Atom):
        return term_vars(f.lhs) | term_vars(f.rhs)
    if isinstance(f, And):
        return free_vars(f.left) | free_vars(f.right)
    if isinstance(f, Not):
        return free_vars(f.body)
    if isinstance(f, Exists):
        return free_vars(f.body) - {f.var}
    raise LogicError(f"not a formula: {f!r}")


def bound_vars(f: Formula) -> frozenset[Var]:
    if isinstance(f, Atom):
        return frozenset()
    if isinstance(f, And):
        return bound_vars(f.left) | bound_vars(f.right)
    if isinstance(f, Not):
        return bound_vars(f.body)
    return bound_vars(f.body) | {f.var}


def all_vars(f: Formula) -> frozenset[Var]:
    return free_vars(f) | bound_vars(f)


def is_quantifier_free(f: Formula) -> bool:
    if isinstance(f, Atom):
        return True
    if isinstance(f, And):
        return is_quantifier_free(f.left) and is_quantifier_free(f.right)
    if isinstance(f, Not):
        return is_quantifier_free(f.body)
    return False


def substitute(f: Formula, x: Var, t: Term) -> Formula:
    """Replace the free occurrences of ``x`` in ``f`` by ``t``."""
    captured = term_vars(t) & bound_vars(f)
    if captured:
        names = ", ".join(sorted(str(c) for c in captured))
        raise CaptureError(f"substitution would capture {names}")
    return _subst(f, x, t)


def _subst(f: Formula, x: Var, t: Term) -> Formula:
    if isinstance(f, Atom):
        return Atom(subst_term(f.lhs, x, t), f.rel, subst_term(f.rhs, x, t))
    if isinstance(f, And):
        return And(_subst(f.left, x, t), _subst(f.right, x, t))
    if isinstance(f, Not):
        return Not(_subst(f.body, x, t))
    if f.var == x:
        return f
    return Exists(f.var, _subst(f.body, x, t))


def rename(f: Formula, mapping: Mapping[Var, Var]) -> Formula:
    """Simultaneous renaming of free variables (no capture check)."""
    if isinstance(f, Atom):
        return Atom(_rename_term(f.lhs, mapping), f.rel, _rename_term(f.rhs, mapping))
    if isinstance(f, And):
        return And(rename(f.left, mapping), rename(f.right, mapping))
    if isinstance(f, Not):
        return Not(rename(f.body, mapping))
    inner = {k: w for k, w in mapping.items() if k != f.var}
    return Exists(f.var, rename(f.body, inner))


def _rename_term(t: Term, mapping: Mapping[Var, Var]) -> Term:
    if isinstance(t, Variable):
        return Variable(mapping.get(t.var, t.var))
    if isinstance(t, Constant):
        return t
    if isinstance(t, Sum):
        return Sum(_rename_term(t.left, mapping), _rename_term(t.right, mapping))
    return Scale(t.coeff, _rename_term(t.term, mapping))


def add_prefix(f: Formula, prefix: Optional[str], names: Optional[Iterable[Var]] = None) -> Formula:
    """Set the server prefix on the free variables of ``f`` (or only on ``names``)."""
    targets = free_vars(f) if names is None else set(names) & free_vars(f)
    return rename(f, {x: x.with_prefix(prefix) for x in targets})


def strip_prefix(f: Formula, prefix: str) -> Formula:
    """Drop ``prefix`` from every free variable carrying it."""
    return rename(f, {x: x.with_prefix(None) for x in free_vars(f) if x.prefix == prefix})


def fresh_var(base: Var, avoid: Iterable[Var]) -> Var:
    taken = set(avoid)
    k = 0
    while True:
        cand = Var(f"{base.name}_{k}", base.prefix)
        if cand not in taken:
            return cand
        k += 1


def compare(lhs: Fraction, rel: str, rhs: Fraction) -> bool:
    if rel == "=":
        return lhs == rhs
    if rel == "!=":
        return lhs != rhs
    if rel == "<=":
        return lhs <= rhs
    if rel == ">=":
        return lhs >= rhs
    if rel == "<":
        return lhs < rhs
    return lhs > rhs


def evaluate(f: Formula, valuation: Mapping[Var, Fraction]) -> bool:
    if isinstance(f, Atom):
        return compare(eval_term(f.lhs, valuation), f.rel, eval_term(f.rhs, valuation))
    if isinstance(f, And):
        return evaluate(f.left, valuation) and evaluate(f.right, valuation)
    if isinstance(f, Not):
        return not evaluate(f.body, valuation)
    raise NotQuantifierFreeError("evaluate needs a quantifier-free formula")


def is_ground_atom(a: Atom) -> bool:
    return not (term_vars(a.lhs) or term_vars(a.rhs))


def negate_atom(a: Atom) -> Atom:
    return Atom(a.lhs, NEGATED_REL[a.rel], a.rhs)


# -- normal forms -------------------------------------------------------------


def to_nnf(f: Formula) -> Formula:
    """Push negations into the atoms by flipping relations.

    The result has no ``Not`` except the ones that encode disjunction.
    """
    return _nnf(f, True)


def _nnf(f: Formula, positive: bool) -> Formula:
    if isinstance(f, Atom):
        return f if positive else negate_atom(f)
    if isinstance(f, And):
        a, b = _nnf(f.left, positive), _nnf(f.right, positive)
        return And(a, b) if positive else Or(a, b)
    if isinstance(f, Not):
        parts = or_parts(f)
        if parts is not None:
            a, b = _nnf(parts[0], positive), _nnf(parts[1], positive)
            return Or(a, b) if positive else And(a, b)
        return _nnf(f.body, not positive)
    raise NotQuantifierFreeError("to_nnf needs a quantifier-free formula")


def dnf_clauses(f: Formula, cap: Optional[int] = None) -> list[tuple[Atom, ...]]:
    """Disjunctive normal form as a list of conjunctions of atoms.

    ``!=`` atoms are split into ``<`` or ``>``, so the clauses only use
    ``=``, ``<=``, ``>=``, ``<`` and ``>``.
    """
    cap = limits.dnf_cap if cap is None else cap
    return _dnf(f, True, cap)


def _split_atom(a: Atom) -> list[tuple[Atom, ...]]:
    if a.rel == "!=":
        return [(Atom(a.lhs, "<", a.rhs),), (Atom(a.lhs, ">", a.rhs),)]
    return [(a,)]


def _dnf(f: Formula, positive: bool, cap: int) -> list[tuple[Atom, ...]]:
    if isinstance(f, Atom):
        return _split_atom(f if positive else negate_atom(f))
    if isinstance(f, Not):
        return _dnf(f.body, not positive, cap)
    if isinstance(f, And):
        left = _dnf(f.left, positive, cap)
        right = _dnf(f.right, positive, cap)
        if positive:
            if len(left) * len(right) > cap:
                raise ResourceLimitError(
                    f"DNF would have {len(left) * len(right)} disjuncts (cap {cap})")
            return [a + b for a in left for b in right]
        out = left + right
        if len(out) > cap:
            raise ResourceLimitError(f"DNF would have {len(out)} disjuncts (cap {cap})")
        return out
    raise NotQuantifierFreeError("normal forms need a quantifier-free formula")


def to_dnf(f: Formula) -> Formula:
    return disj(conj(clause) for clause in dnf_clauses(f))
