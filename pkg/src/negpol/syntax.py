"""Concrete text syntax for formulas, and the shared tokenizer/parser base.

Formula grammar (lowest to highest precedence)::

    formula  := implies
    implies  := or ('->' implies)?
    or       := and ('||' and)*
    and      := unary ('&&' unary)*
    unary    := '!' unary | 'exists' vars '.' formula | 'forall' vars '.' formula
              | '(' formula ')' | 'true' | 'false' | term REL term
    term     := product (('+' | '-') product)*
    product  := factor ('*' factor)*
    factor   := NUMBER | var | '(' term ')' | '-' factor

Numbers are integers, decimals (``1.1`` is exactly 11/10) or ``p/q``.
The printer emits text that parses back to a structurally equal AST.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .logic import (
    FALSE,
    TRUE,
    And,
    Atom,
    Constant,
    Exists,
    Forall,
    Formula,
    Implies,
    LogicError,
    Not,
    Or,
    RELATIONS,
    Scale,
    Sum,
    Term,
    Var,
    Variable,
    or_parts,
)


class ParseError(LogicError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{line}:{column}: {message}" if line else message)
        self.message = message
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Token:
    kind: str  # NUM, ID, OP, EOF
    text: str
    pos: int
    end: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<NUM>\d+(?:\.\d+)?(?:/\d+)?)
  | (?P<ID>[A-Za-z_][A-Za-z0-9_']*)
  | (?P<OP>:=|&&|\|\||->|<=|>=|!=|==|[-+*<>=!(){}\[\],:;.])
    """,
    re.VERBOSE,
)

KEYWORDS = {"true", "false", "exists", "forall"}


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            line, col = line_col(text, pos)
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        if kind != "ws":
            tok_text = m.group()
            if tok_text == "==":
                tok_text = "="
            tokens.append(Token(kind, tok_text, m.start(), m.end()))
        pos = m.end()
    tokens.append(Token("EOF", "", len(text), len(text)))
    return tokens


def line_col(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


class Parser:
    """Recursive-descent parser over a token list; subclassed for policies."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    # token helpers

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def at(self, text: str, kind: Optional[str] = None) -> bool:
        t = self.tok
        return t.text == text and (kind is None or t.kind == kind) and t.kind != "EOF"

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "EOF":
            self.i += 1
        return t

    def error(self, message: str, tok: Optional[Token] = None) -> ParseError:
        tok = tok or self.tok
        line, col = line_col(self.text, tok.pos)
        return ParseError(message, line, col)

    def expect(self, text: str) -> Token:
        if not self.at(text):
            found = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")
        return self.advance()

    def expect_id(self, what: str = "identifier") -> Token:
        if self.tok.kind != "ID":
            found = self.tok.text or "end of input"
            raise self.error(f"expected {what}, found {found!r}")
        return self.advance()

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.advance()
            return True
        return False

    def finish(self) -> None:
        if self.tok.kind != "EOF":
            raise self.error(f"unexpected {self.tok.text!r}")

    # formulas

    def formula(self) -> Formula:
        left = self._or()
        if self.accept("->"):
            return Implies(left, self.formula())
        return left

    def _or(self) -> Formula:
        f = self._and()
        while self.accept("||"):
            f = Or(f, self._and())
        return f

    def _and(self) -> Formula:
        f = self._unary()
        while self.accept("&&"):
            f = And(f, self._unary())
        return f

    def _quantified_vars(self) -> list[Var]:
        names = [self._bound_var()]
        while self.accept(","):
            names.append(self._bound_var())
        self.expect(".")
        return names

    def _bound_var(self) -> Var:
        first = self.expect_id("variable")
        # `exists s1.price. body` binds a prefixed variable
        if (self.at(".") and self.peek().kind == "ID" and self.peek(2).text == "."
                and self.tok.pos == first.end and self.peek().pos == self.tok.end):
            self.advance()
            name = self.advance()
            return Var(name.text, first.text)
        return Var(first.text)

    def _unary(self) -> Formula:
        t = self.tok
        if self.accept("!"):
            return Not(self._unary())
        if t.kind == "ID" and t.text in ("exists", "forall"):
            self.advance()
            xs = self._quantified_vars()
            body = self.formula()
            for x in reversed(xs):
                body = Exists(x, body) if t.text == "exists" else Forall(x, body)
            return body
        if t.kind == "ID" and t.text in ("true", "false"):
            self.advance()
            return TRUE if t.text == "true" else FALSE
        if t.text == "(":
            # a parenthesis opens either a formula or the left term of an atom
            save = self.i
            self.advance()
            try:
                f = self.formula()
                self.expect(")")
            except ParseError:
                self.i = save
            else:
                if self.tok.text not in RELATIONS + ("+", "-", "*"):
                    return f
                self.i = save
        return self._atom()

    def _atom(self) -> Formula:
        lhs = self.term()
        if self.tok.kind != "OP" or self.tok.text not in RELATIONS:
            found = self.tok.text or "end of input"
            raise self.error(f"expected a relation, found {found!r}")
        rel = self.advance().text
        rhs = self.term()
        return Atom(lhs, rel, rhs)

    # terms

    def term(self) -> Term:
        t = self._product()
        while self.tok.text in ("+", "-") and self.tok.kind == "OP":
            op = self.advance().text
            rhs = self._product()
            t = Sum(t, rhs if op == "+" else _negate(rhs))
        return t

    def _product(self) -> Term:
        t = self._factor()
        while self.at("*"):
            star = self.advance()
            rhs = self._factor()
            if isinstance(t, Constant):
                t = Scale(t.value, rhs)
            elif isinstance(rhs, Constant):
                t = Scale(rhs.value, t)
            else:
                raise self.error("product of two non-constant terms is not linear", star)
        return t

    def _factor(self) -> Term:
        t = self.tok
        if t.kind == "NUM":
            self.advance()
            return Constant(Fraction(t.text))
        if self.accept("-"):
            return _negate(self._factor())
        if self.accept("("):
            inner = self.term()
            self.expect(")")
            return inner
        if t.kind == "ID":
            if t.text in KEYWORDS:
                raise self.error(f"keyword {t.text!r} cannot be a variable")
            self.advance()
            if (self.at(".") and self.tok.pos == t.end
                    and self.peek().kind == "ID" and self.peek().pos == self.tok.end):
                self.advance()
                name = self.advance()
                return Variable(Var(name.text, t.text))
            return Variable(Var(t.text))
        found = t.text or "end of input"
        raise self.error(f"expected a term, found {found!r}")


def _negate(t: Term) -> Term:
    if isinstance(t, Constant):
        return Constant(-t.value)
    if isinstance(t, Scale):
        return Scale(-t.coeff, t.term)
    return Scale(Fraction(-1), t)


def parse_formula(text: str) -> Formula:
    p = Parser(text)
    f = p.formula()
    p.finish()
    return f


def parse_term(text: str) -> Term:
    p = Parser(text)
    t = p.term()
    p.finish()
    return t


# -- printing -----------------------------------------------------------------


def format_rational(q: Fraction) -> str:
    return str(q.numerator) if q.denominator == 1 else f"{q.numerator}/{q.denominator}"


def format_term(t: Term) -> str:
    if isinstance(t, Variable):
        return str(t.var)
    if isinstance(t, Constant):
        return format_rational(t.value)
    if isinstance(t, Scale):
        return f"{format_rational(t.coeff)}*{_scaled(t.term)}"
    left = format_term(t.left)
    r = t.right
    if isinstance(r, Constant) and r.value < 0:
        return f"{left} - {format_rational(-r.value)}"
    if isinstance(r, Scale) and r.coeff < 0:
        if r.coeff == -1 and isinstance(r.term, (Variable, Sum)):
            return f"{left} - {_paren_sum(r.term)}"
        return f"{left} - {format_rational(-r.coeff)}*{_scaled(r.term)}"
    return f"{left} + {_paren_sum(r)}"


def _paren_sum(t: Term) -> str:
    return f"({format_term(t)})" if isinstance(t, Sum) else format_term(t)


def _scaled(t: Term) -> str:
    if isinstance(t, Variable):
        return str(t.var)
    return f"({format_term(t)})"


_PREC_IMPLIES, _PREC_OR, _PREC_AND, _PREC_UNARY = 0, 1, 2, 3


def format_formula(f: Formula) -> str:
    return _fmt(f, _PREC_IMPLIES)


def _fmt(f: Formula, ctx: int) -> str:
    if isinstance(f, Atom):
        if f == TRUE:
            return "true"
        if f == FALSE:
            return "false"
        return f"{format_term(f.lhs)} {f.rel} {format_term(f.rhs)}"
    parts = or_parts(f)
    if parts is not None:
        s = f"{_fmt(parts[0], _PREC_OR)} || {_fmt(parts[1], _PREC_AND)}"
        return f"({s})" if ctx > _PREC_OR else s
    if isinstance(f, And):
        s = f"{_fmt(f.left, _PREC_AND)} && {_fmt(f.right, _PREC_UNARY)}"
        return f"({s})" if ctx > _PREC_AND else s
    if isinstance(f, Not):
        if isinstance(f.body, Not) and or_parts(f.body) is None:
            return f"!{_fmt(f.body, _PREC_UNARY)}"
        return f"!({_fmt(f.body, _PREC_IMPLIES)})"
    if isinstance(f, Exists):
        s = f"exists {f.var}. {_fmt(f.body, _PREC_IMPLIES)}"
        return f"({s})" if ctx > _PREC_IMPLIES else s
    raise LogicError(f"not a formula: {f!r}")
