"""Quantifier elimination and decision procedures over the rationals.

Existential quantifiers are removed with Fourier-Motzkin elimination: the
body is put in disjunctive normal form, each disjunct becomes a system of
linear constraints ``sum(c_i * x_i) <op> bound`` with ``<op>`` one of
``<=``, ``<`` or ``=``, the variable is projected out, and the systems are
turned back into a formula.  Strict inequalities are tracked exactly, so
the projection is exact over any dense ordered field.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from math import floor, gcd
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from .logic import (
    FALSE,
    TRUE,
    And,
    Atom,
    Constant,
    Exists,
    Formula,
    LogicError,
    Not,
    NotQuantifierFreeError,
    Scale,
    Sum,
    Term,
    Var,
    Variable,
    all_vars,
    conj,
    disj,
    dnf_clauses,
    free_vars,
    fresh_var,
    is_quantifier_free,
    linearize,
    substitute,
)

log = logging.getLogger(__name__)

LE, LT, EQ = "<=", "<", "="


class NonlinearError(LogicError):
    pass


@dataclass(frozen=True)
class LinearConstraint:
    """``sum(coeffs[x] * x) kind bound``, stored in a canonical scaling.

    Inequalities are scaled so the leading coefficient has magnitude one;
    equalities so that it is exactly one.  Two constraints describing the same
    half-space (or hyperplane) therefore compare equal.
    """

    coeffs: tuple[tuple[Var, Fraction], ...]
    bound: Fraction
    kind: str

    @staticmethod
    def make(coeffs: Mapping[Var, Fraction], bound: Fraction, kind: str) -> "LinearConstraint":
        items = sorted(((x, Fraction(c)) for x, c in coeffs.items() if c != 0),
                       key=lambda kv: kv[0].sort_key())
        bound = Fraction(bound)
        if items:
            lead = items[0][1]
            k = 1 / lead if kind == EQ else 1 / abs(lead)
            items = [(x, c * k) for x, c in items]
            bound *= k
        return LinearConstraint(tuple(items), bound, kind)

    @property
    def vars(self) -> frozenset[Var]:
        return frozenset(x for x, _ in self.coeffs)

    def coeff(self, x: Var) -> Fraction:
        for y, c in self.coeffs:
            if y == x:
                return c
        return Fraction(0)

    def as_dict(self) -> dict[Var, Fraction]:
        return dict(self.coeffs)

    @property
    def is_ground(self) -> bool:
        return not self.coeffs

    def ground_truth(self) -> bool:
        if self.kind == LE:
            return 0 <= self.bound
        if self.kind == LT:
            return 0 < self.bound
        return self.bound == 0

    def holds(self, valuation: Mapping[Var, Fraction]) -> bool:
        lhs = sum((c * valuation[x] for x, c in self.coeffs), Fraction(0))
        if self.kind == LE:
            return lhs <= self.bound
        if self.kind == LT:
            return lhs < self.bound
        return lhs == self.bound

    def negations(self) -> list["LinearConstraint"]:
        """Constraints whose disjunction is the complement of this one."""
        neg = {x: -c for x, c in self.coeffs}
        if self.kind == LE:
            return [LinearConstraint.make(neg, -self.bound, LT)]
        if self.kind == LT:
            return [LinearConstraint.make(neg, -self.bound, LE)]
        return [LinearConstraint.make(self.as_dict(), self.bound, LT),
                LinearConstraint.make(neg, -self.bound, LT)]

    def substitute(self, x: Var, value: Fraction) -> "LinearConstraint":
        c = self.coeff(x)
        if c == 0:
            return self
        rest = {y: d for y, d in self.coeffs if y != x}
        return LinearConstraint.make(rest, self.bound - c * value, self.kind)

    def __str__(self) -> str:
        from .syntax import format_formula
        return format_formula(constraint_to_atom(self))


FALSE_CONSTRAINT = LinearConstraint((), Fraction(-1), LE)


@dataclass(frozen=True)
class ConstraintSystem:
    """A conjunction of linear constraints (one DNF disjunct)."""

    constraints: tuple[LinearConstraint, ...]

    @property
    def vars(self) -> frozenset[Var]:
        out: frozenset[Var] = frozenset()
        for c in self.constraints:
            out |= c.vars
        return out

    @property
    def is_false(self) -> bool:
        return any(c.is_ground and not c.ground_truth() for c in self.constraints)

    def __iter__(self) -> Iterator[LinearConstraint]:
        return iter(self.constraints)

    def __len__(self) -> int:
        return len(self.constraints)


UNSAT_SYSTEM = ConstraintSystem((FALSE_CONSTRAINT,))


def atom_constraints(a: Atom) -> list[LinearConstraint]:
    lc, kl = linearize(a.lhs)
    rc, kr = linearize(a.rhs)
    coeffs = dict(lc)
    for x, c in rc.items():
        coeffs[x] = coeffs.get(x, Fraction(0)) - c
    bound = kr - kl
    if a.rel in (LE, LT, EQ):
        return [LinearConstraint.make(coeffs, bound, a.rel)]
    if a.rel in (">=", ">"):
        neg = {x: -c for x, c in coeffs.items()}
        return [LinearConstraint.make(neg, -bound, LE if a.rel == ">=" else LT)]
    raise LogicError("'!=' atoms must be split before conversion")


def atoms_to_system(conjunct: Formula | Sequence[Atom]) -> ConstraintSystem:
    """Linearize a conjunction of atoms into a normalized constraint system."""
    if isinstance(conjunct, Formula):
        atoms = list(_conjunct_atoms(conjunct))
    else:
        atoms = list(conjunct)
    out: list[LinearConstraint] = []
    for a in atoms:
        out.extend(atom_constraints(a))
    reduced = reduce_constraints(out)
    return UNSAT_SYSTEM if reduced is None else ConstraintSystem(tuple(reduced))


def _conjunct_atoms(f: Formula) -> Iterator[Atom]:
    if isinstance(f, Atom):
        yield f
    elif isinstance(f, And):
        yield from _conjunct_atoms(f.left)
        yield from _conjunct_atoms(f.right)
    else:
        raise LogicError("expected a conjunction of atoms")


# -- cheap normalization ------------------------------------------------------


def _direction_key(c: LinearConstraint) -> tuple[tuple, bool]:
    """Orientation-free key for the hyperplane direction and the sign flip."""
    lead = c.coeffs[0][1]
    if lead > 0:
        return c.coeffs, False
    return tuple((x, -k) for x, k in c.coeffs), True


def reduce_constraints(cs: Iterable[LinearConstraint]) -> Optional[list[LinearConstraint]]:
    """Merge constraints sharing a direction; ``None`` if contradictory.

    For each direction ``d`` the constraints bound ``d.x`` from above and/or
    below, so they collapse to at most one lower and one upper bound, or an
    equality when the two bounds meet.  Ground constraints are evaluated.
    """
    groups: dict[tuple, dict] = {}
    order: list[tuple] = []
    for c in cs:
        if c.is_ground:
            if not c.ground_truth():
                return None
            continue
        key, flipped = _direction_key(c)
        g = groups.get(key)
        if g is None:
            g = groups[key] = {"lo": None, "lo_strict": False, "hi": None, "hi_strict": False, "eq": None}
            order.append(key)
        if c.kind == EQ:
            val = c.bound  # equalities are stored with leading coefficient 1
            if g["eq"] is not None and g["eq"] != val:
                return None
            g["eq"] = val
            continue
        strict = c.kind == LT
        if not flipped:
            if g["hi"] is None or c.bound < g["hi"] or (c.bound == g["hi"] and strict):
                g["hi"], g["hi_strict"] = c.bound, strict
        else:
            lo = -c.bound
            if g["lo"] is None or lo > g["lo"] or (lo == g["lo"] and strict):
                g["lo"], g["lo_strict"] = lo, strict

    out: list[LinearConstraint] = []
    for key in order:
        g = groups[key]
        coeffs = dict(key)
        lo, hi, eq = g["lo"], g["hi"], g["eq"]
        if eq is not None:
            if lo is not None and (eq < lo or (eq == lo and g["lo_strict"])):
                return None
            if hi is not None and (eq > hi or (eq == hi and g["hi_strict"])):
                return None
            out.append(LinearConstraint.make(coeffs, eq, EQ))
            continue
        if lo is not None and hi is not None:
            if lo > hi or (lo == hi and (g["lo_strict"] or g["hi_strict"])):
                return None
            if lo == hi:
                out.append(LinearConstraint.make(coeffs, lo, EQ))
                continue
        if lo is not None:
            neg = {x: -k for x, k in coeffs.items()}
            out.append(LinearConstraint.make(neg, -lo, LT if g["lo_strict"] else LE))
        if hi is not None:
            out.append(LinearConstraint.make(coeffs, hi, LT if g["hi_strict"] else LE))
    return out


# -- Fourier-Motzkin ----------------------------------------------------------


def _eliminate(cs: list[LinearConstraint], x: Var) -> Optional[list[LinearConstraint]]:
    eqs = [c for c in cs if c.kind == EQ and c.coeff(x) != 0]
    if eqs:
        pivot = min(eqs, key=lambda c: (len(c.coeffs), c.coeffs[0][0].sort_key()))
        px = pivot.coeff(x)
        pd = pivot.as_dict()
        out = []
        for c in cs:
            if c is pivot:
                continue
            k = c.coeff(x)
            if k == 0:
                out.append(c)
                continue
            r = k / px
            coeffs = c.as_dict()
            for y, d in pd.items():
                coeffs[y] = coeffs.get(y, Fraction(0)) - r * d
            coeffs.pop(x, None)
            out.append(LinearConstraint.make(coeffs, c.bound - r * pivot.bound, c.kind))
        return reduce_constraints(out)

    lower, upper, rest = [], [], []
    for c in cs:
        k = c.coeff(x)
        if k > 0:
            upper.append(c)
        elif k < 0:
            lower.append(c)
        else:
            rest.append(c)
    for lo in lower:
        a = lo.coeff(x)
        lo_d = lo.as_dict()
        for up in upper:
            b = up.coeff(x)
            coeffs = {y: b * d for y, d in lo_d.items()}
            for y, d in up.coeffs:
                coeffs[y] = coeffs.get(y, Fraction(0)) - a * d
            coeffs.pop(x, None)
            kind = LT if LT in (lo.kind, up.kind) else LE
            rest.append(LinearConstraint.make(coeffs, b * lo.bound - a * up.bound, kind))
    return reduce_constraints(rest)


def eliminate_var(s: ConstraintSystem, x: Var) -> ConstraintSystem:
    """Project ``s`` along ``x``; the result never mentions ``x``."""
    if s.is_false:
        return UNSAT_SYSTEM
    out = _eliminate(list(s.constraints), x)
    return UNSAT_SYSTEM if out is None else ConstraintSystem(tuple(out))


def _pick_next(cs: list[LinearConstraint], xs: set[Var]) -> Var:
    counts: dict[Var, list] = {}
    for c in cs:
        for y, _ in c.coeffs:
            if y in xs:
                entry = counts.setdefault(y, [1, 0])
                entry[1] += 1
                if c.kind == EQ:
                    entry[0] = 0
    return min(counts, key=lambda y: (counts[y][0], counts[y][1], y.sort_key()))


def project(s: ConstraintSystem, xs: Iterable[Var]) -> ConstraintSystem:
    """Eliminate every variable of ``xs``, lowest occurrence count first."""
    if s.is_false:
        return UNSAT_SYSTEM
    cs: Optional[list[LinearConstraint]] = list(s.constraints)
    todo = set(xs)
    while cs is not None:
        todo &= set().union(*(c.vars for c in cs)) if cs else set()
        if not todo:
            break
        x = _pick_next(cs, todo)
        cs = _eliminate(cs, x)
        todo.discard(x)
    return UNSAT_SYSTEM if cs is None else ConstraintSystem(tuple(cs))


def system_satisfiable(cs: Iterable[LinearConstraint]) -> bool:
    reduced = reduce_constraints(cs)
    if reduced is None:
        return False
    s = ConstraintSystem(tuple(reduced))
    return not project(s, s.vars).is_false


# -- back to formulas ---------------------------------------------------------


def constraint_to_atom(c: LinearConstraint) -> Atom:
    if c.is_ground:
        return TRUE if c.ground_truth() else FALSE
    if len(c.coeffs) == 1:
        (x, a), = c.coeffs
        rel = c.kind
        if a < 0 and rel != EQ:
            rel = {LE: ">=", LT: ">"}[rel]
        return Atom(Variable(x), rel, Constant(c.bound / a))
    # integer coefficients with gcd 1, leading coefficient positive
    den = 1
    for _, k in c.coeffs:
        den = den * k.denominator // gcd(den, k.denominator)
    ints = [(x, int(k * den)) for x, k in c.coeffs]
    g = 0
    for _, k in ints:
        g = gcd(g, abs(k))
    scale = Fraction(den, g)
    rel = c.kind
    if ints[0][1] < 0:
        scale = -scale
        if rel != EQ:
            rel = {LE: ">=", LT: ">"}[rel]
    lhs: Optional[Term] = None
    for x, k in c.coeffs:
        coeff = k * scale
        piece: Term = Variable(x) if coeff == 1 else Scale(coeff, Variable(x))
        lhs = piece if lhs is None else Sum(lhs, piece)
    return Atom(lhs, rel, Constant(c.bound * scale))


def _atom_order(c: LinearConstraint) -> tuple:
    upper = c.kind == EQ or c.coeffs[0][1] > 0
    return (c.kind != EQ, len(c.coeffs) > 1,
            tuple(x.sort_key() for x, _ in c.coeffs), not upper, c.bound)


def system_to_formula(s: ConstraintSystem | Iterable[LinearConstraint]) -> Formula:
    cs = list(s)
    if any(c.is_ground and not c.ground_truth() for c in cs):
        return FALSE
    cs = [c for c in cs if not c.is_ground]
    return conj(constraint_to_atom(c) for c in sorted(cs, key=_atom_order))


def systems_to_formula(systems: Iterable[ConstraintSystem]) -> Formula:
    live = [s for s in systems if not s.is_false]
    return disj(system_to_formula(s) for s in live)


# -- quantifier elimination ---------------------------------------------------


def _clause_systems(f: Formula) -> list[ConstraintSystem]:
    out = []
    for clause in dnf_clauses(f):
        s = atoms_to_system(clause)
        if not s.is_false:
            out.append(s)
    return out


def _project_formula(f: Formula, xs: Sequence[Var]) -> Formula:
    systems = []
    for s in _clause_systems(f):
        p = project(s, xs)
        if not p.is_false:
            systems.append(p)
    return systems_to_formula(systems)


def _qe(f: Formula) -> Formula:
    if isinstance(f, Atom):
        return f
    if isinstance(f, And):
        return And(_qe(f.left), _qe(f.right))
    if isinstance(f, Not):
        return Not(_qe(f.body))
    xs = []
    while isinstance(f, Exists):
        xs.append(f.var)
        f = f.body
    return _project_formula(_qe(f), xs)


def qe(f: Formula) -> Formula:
    """Equivalent quantifier-free formula, simplified."""
    return simplify(_qe(f))


def exists_qe(xs: Iterable[Var], f: Formula) -> Formula:
    """``qe(exists xs. f)`` without building the quantifier prefix."""
    body = f if is_quantifier_free(f) else _qe(f)
    return simplify(_project_formula(body, sorted(set(xs))))


# -- satisfiability and entailment --------------------------------------------


def is_satisfiable(f: Formula) -> bool:
    if not is_quantifier_free(f):
        f = _qe(f)
    return any(system_satisfiable(s) for s in _clause_systems(f))


def _sat_search(base: list[LinearConstraint], alternatives: list[list[list[LinearConstraint]]]) -> bool:
    """Satisfiability of ``base`` and, for each group, one of its alternatives."""
    if not system_satisfiable(base):
        return False
    if not alternatives:
        return True
    first, rest = alternatives[0], alternatives[1:]
    return any(_sat_search(base + alt, rest) for alt in first)


def _negated_alternatives(g: Formula) -> list[list[list[LinearConstraint]]]:
    """``not g`` as groups of alternatives, one group per disjunct of ``g``."""
    groups = []
    for s in _clause_systems(g):
        alts = []
        for c in s:
            for n in c.negations():
                alts.append([n])
        groups.append(alts)
    return groups


def _require_qf(*fs: Formula) -> None:
    for f in fs:
        if not is_quantifier_free(f):
            raise NotQuantifierFreeError("expected a quantifier-free formula")


def entails(f: Formula, g: Formula) -> bool:
    """True iff every model of ``f`` is a model of ``g``."""
    _require_qf(f, g)
    neg = _negated_alternatives(g)
    for s in _clause_systems(f):
        if _sat_search(list(s), neg):
            return False
    return True


def equivalent(f: Formula, g: Formula) -> bool:
    return entails(f, g) and entails(g, f)


def is_valid(f: Formula) -> bool:
    return entails(TRUE, f)


# -- simplification -----------------------------------------------------------


def _implied(base: list[LinearConstraint], c: LinearConstraint) -> bool:
    return not any(system_satisfiable(base + [n]) for n in c.negations())


def prune_system(s: ConstraintSystem) -> ConstraintSystem:
    """Drop every constraint implied by the remaining ones."""
    if s.is_false or not system_satisfiable(s):
        return UNSAT_SYSTEM
    kept = list(s.constraints)
    for c in sorted(s.constraints, key=lambda c: (c.kind == EQ, -len(c.coeffs))):
        others = [d for d in kept if d is not c]
        if _implied(others, c):
            kept = others
    return ConstraintSystem(tuple(kept))


def _system_entails(a: ConstraintSystem, b: ConstraintSystem) -> bool:
    base = list(a)
    return all(_implied(base, c) for c in b)


def simplify_systems(systems: Iterable[ConstraintSystem]) -> list[ConstraintSystem]:
    pruned: list[ConstraintSystem] = []
    seen = set()
    for s in systems:
        p = prune_system(s)
        if p.is_false:
            continue
        key = frozenset(p.constraints)
        if key in seen:
            continue
        seen.add(key)
        pruned.append(p)
    # drop disjuncts subsumed by another disjunct
    out: list[ConstraintSystem] = []
    for i, s in enumerate(pruned):
        subsumed = False
        for j, t in enumerate(pruned):
            if i == j:
                continue
            if _system_entails(s, t) and (not _system_entails(t, s) or j < i):
                subsumed = True
                break
        if not subsumed:
            out.append(s)
    return out


def simplify(f: Formula) -> Formula:
    """Equivalent formula in a reduced disjunctive normal form."""
    _require_qf(f)
    systems = simplify_systems(_clause_systems(f))
    if any(len(s) == 0 for s in systems):
        return TRUE
    return systems_to_formula(systems)


# -- preferences --------------------------------------------------------------


MINIMIZE, MAXIMIZE = "minimize", "maximize"


def apply_preference(f: Formula, x: Var, direction: str) -> Formula:
    """Keep only the points of ``f`` where ``x`` is optimal.

    Builds ``f and not exists x'. (f[x'/x] and x' < x)`` for minimization
    (``x' > x`` for maximization) and eliminates the quantifier.  When the
    optimum is not attained (an open bound) the result is false.
    """
    if direction not in (MINIMIZE, MAXIMIZE):
        raise ValueError(f"unknown preference direction {direction!r}")
    _require_qf(f)
    if x not in free_vars(f):
        log.warning("preference on %s ignored: variable not free in offer", x)
        return f
    other = fresh_var(x, all_vars(f))
    better = Atom(Variable(other), "<" if direction == MINIMIZE else ">", Variable(x))
    shifted = substitute(f, x, Variable(other))
    dominated = _project_formula(And(shifted, better), [other])
    return simplify(And(f, Not(dominated)))


# -- models -------------------------------------------------------------------


def _pick_in_interval(lo, lo_strict, hi, hi_strict) -> Fraction:
    def ok(v: Fraction) -> bool:
        if lo is not None and (v < lo or (v == lo and lo_strict)):
            return False
        if hi is not None and (v > hi or (v == hi and hi_strict)):
            return False
        return True

    zero = Fraction(0)
    if ok(zero):
        return zero
    if lo is not None and (lo > 0 or (lo == 0 and lo_strict)):
        if not lo_strict:
            return lo
        cand = Fraction(floor(lo) + 1)
        return cand if ok(cand) else (lo + hi) / 2
    # interval lies strictly below zero
    if not hi_strict:
        return hi
    cand = Fraction(-floor(-hi) - 1)
    return cand if ok(cand) else (lo + hi) / 2


def _bounds_on(cs: list[LinearConstraint], x: Var):
    lo = hi = None
    lo_strict = hi_strict = False
    for c in cs:
        if c.is_ground:
            continue
        (y, a), = c.coeffs
        assert y == x
        val = c.bound / a
        if c.kind == EQ:
            return val, False, val, False
        strict = c.kind == LT
        if a > 0:
            if hi is None or val < hi or (val == hi and strict):
                hi, hi_strict = val, strict
        else:
            if lo is None or val > lo or (val == lo and strict):
                lo, lo_strict = val, strict
    return lo, lo_strict, hi, hi_strict


def system_model(s: ConstraintSystem, order: Optional[Sequence[Var]] = None) -> Optional[dict[Var, Fraction]]:
    if s.is_false or not system_satisfiable(s):
        return None
    names = list(order) if order is not None else sorted(s.vars)
    names += sorted(s.vars - set(names))
    cs = list(s.constraints)
    model: dict[Var, Fraction] = {}
    for k, x in enumerate(names):
        others = [y for y in names[k + 1:]]
        proj = project(ConstraintSystem(tuple(cs)), others)
        value = _pick_in_interval(*_bounds_on(list(proj), x))
        model[x] = value
        cs = [c.substitute(x, value) for c in cs]
    return model


def find_model(f: Formula, order: Optional[Sequence[Var]] = None) -> Optional[dict[Var, Fraction]]:
    """A rational valuation of the free variables satisfying ``f``, if any."""
    if not is_quantifier_free(f):
        f = _qe(f)
    fv = free_vars(f)
    for s in _clause_systems(f):
        m = system_model(s, order)
        if m is not None:
            for x in fv:
                m.setdefault(x, Fraction(0))
            return m
    return None


def fixed_value(f: Formula, x: Var) -> Optional[Fraction]:
    """The unique value ``f`` allows for ``x``, or ``None`` if not unique."""
    m = find_model(f)
    if m is None:
        return None
    value = m.get(x, Fraction(0))
    pin = Atom(Variable(x), "=", Constant(value))
    return value if entails(f, pin) else None
