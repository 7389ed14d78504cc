"""PCTL formulas: AST, parser and canonical printer.

Concrete syntax (PRISM-like)::

    state := disj
    disj  := conj ('|' conj)*          # only between atomic propositions
    conj  := unary ('&' unary)*
    unary := '!' atom | primary
    primary := 'true' | NAME | '(' state ')' | 'P' CMP NUMBER '[' path ']'
    path  := 'X' state | state 'U' ['<=' INT] state

A disjunction of atoms such as ``(a | b)`` is kept as a single derived
proposition whose label set is the union of its members.
"""

import re
from dataclasses import dataclass


class PctlSyntaxError(ValueError):
    def __init__(self, message, position=None):
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


@dataclass(frozen=True)
class TrueFormula:
    def __str__(self):
        return "true"


@dataclass(frozen=True)
class Atom:
    """One proposition, or a disjunction of propositions when ``names`` has several."""

    names: tuple

    def __str__(self):
        if len(self.names) == 1:
            return self.names[0]
        return "(" + " | ".join(self.names) + ")"


@dataclass(frozen=True)
class Not:
    arg: Atom

    def __str__(self):
        return f"!{self.arg}"


@dataclass(frozen=True)
class And:
    left: object
    right: object

    def __str__(self):
        right = f"({self.right})" if isinstance(self.right, And) else str(self.right)
        return f"{self.left} & {right}"


@dataclass(frozen=True)
class Prob:
    op: str
    bound: float
    path: object

    def __str__(self):
        return f"P{self.op}{self.bound!r} [ {self.path} ]"


@dataclass(frozen=True)
class Next:
    arg: object

    def __str__(self):
        return f"X {_operand(self.arg)}"


@dataclass(frozen=True)
class Until:
    left: object
    right: object
    bound: int = None

    @property
    def bounded(self):
        return self.bound is not None

    def __str__(self):
        op = "U" if self.bound is None else f"U<={self.bound}"
        return f"{_operand(self.left)} {op} {_operand(self.right)}"


STATE_TYPES = (TrueFormula, Atom, Not, And, Prob)
PATH_TYPES = (Next, Until)


def _operand(f):
    return f"({f})" if isinstance(f, (And, Not)) else str(f)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<cmp><=|>=|<|>)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<sym>[!&|()\[\]]))"
)
_KEYWORDS = {"true", "P", "X", "U"}


def _tokenize(text):
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise PctlSyntaxError(f"unexpected character {text[pos:].lstrip()[:1]!r}", pos)
        kind = m.lastgroup
        value = m.group(kind)
        tokens.append((kind, value, m.start(kind)))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self, k=0):
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok = self.take()
        if tok[1] != value:
            raise PctlSyntaxError(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok[2])
        return tok

    def at(self, value):
        return self.peek()[1] == value and self.peek()[0] != "eof"

    # state formulas
    def state(self):
        start = self.peek()[2]
        first = self.conj()
        if not self.at("|"):
            return first
        parts = [first]
        while self.at("|"):
            self.take()
            parts.append(self.conj())
        names = []
        for part in parts:
            if not isinstance(part, Atom):
                raise PctlSyntaxError("disjunction is only supported between atomic propositions", start)
            names.extend(part.names)
        return Atom(tuple(names))

    def conj(self):
        left = self.unary()
        while self.at("&"):
            self.take()
            left = And(left, self.unary())
        return left

    def unary(self):
        if self.at("!"):
            pos = self.take()[2]
            arg = self.primary()
            if not isinstance(arg, Atom):
                raise PctlSyntaxError("negation applies to atomic propositions only", pos)
            return Not(arg)
        return self.primary()

    def primary(self):
        kind, value, pos = self.peek()
        if kind == "name" and value == "true":
            self.take()
            return TrueFormula()
        if kind == "name" and value == "P":
            return self.prob()
        if kind == "name" and value not in _KEYWORDS:
            self.take()
            return Atom((value,))
        if value == "(":
            self.take()
            inner = self.state()
            self.expect(")")
            return inner
        raise PctlSyntaxError(f"expected a state formula, found {value or 'end of input'!r}", pos)

    def prob(self):
        self.expect("P")
        kind, op, pos = self.take()
        if kind != "cmp":
            raise PctlSyntaxError("expected a comparison after 'P'", pos)
        kind, num, pos = self.take()
        if kind != "num":
            raise PctlSyntaxError("expected a probability bound", pos)
        bound = float(num)
        if not 0.0 <= bound <= 1.0:
            raise PctlSyntaxError(f"probability bound {bound} outside [0, 1]", pos)
        self.expect("[")
        path = self.path()
        self.expect("]")
        return Prob(op, bound, path)

    def path(self):
        if self.at("X"):
            self.take()
            return Next(self.state())
        left = self.state()
        kind, value, pos = self.take()
        if value != "U":
            raise PctlSyntaxError("expected 'U' or 'X' in path formula", pos)
        bound = None
        if self.peek()[1] == "<=":
            self.take()
            kind, num, pos = self.take()
            if kind != "num" or not num.isdigit():
                raise PctlSyntaxError("step bound must be a non-negative integer", pos)
            bound = int(num)
        return Until(left, self.state(), bound)

    def formula(self):
        if self.at("X"):
            f = self.path()
        else:
            f = self.state()
            if self.at("U"):
                self.take()
                bound = None
                if self.peek()[1] == "<=":
                    self.take()
                    kind, num, pos = self.take()
                    if kind != "num" or not num.isdigit():
                        raise PctlSyntaxError("step bound must be a non-negative integer", pos)
                    bound = int(num)
                f = Until(f, self.state(), bound)
        kind, value, pos = self.peek()
        if kind != "eof":
            raise PctlSyntaxError(f"unexpected trailing input {value!r}", pos)
        return f


def parse_formula(text):
    """Parse a state or path formula."""
    return _Parser(text).formula()


def atoms_of(formula):
    """All proposition names occurring in ``formula``."""
    if isinstance(formula, Atom):
        return set(formula.names)
    if isinstance(formula, TrueFormula):
        return set()
    if isinstance(formula, Not):
        return atoms_of(formula.arg)
    if isinstance(formula, Next):
        return atoms_of(formula.arg)
    if isinstance(formula, (And, Until)):
        return atoms_of(formula.left) | atoms_of(formula.right)
    if isinstance(formula, Prob):
        return atoms_of(formula.path)
    raise TypeError(f"not a formula: {formula!r}")


def prob_subformulas(formula):
    """Probabilistic subformulas, innermost first."""
    out = []

    def walk(f):
        if isinstance(f, Prob):
            walk(f.path)
            out.append(f)
        elif isinstance(f, (And, Until)):
            walk(f.left)
            walk(f.right)
        elif isinstance(f, (Not, Next)):
            walk(f.arg)

    walk(formula)
    return out


def top_level_probs(formula):
    """``P`` subformulas not nested inside another ``P``, left to right."""
    if isinstance(formula, Prob):
        return [formula]
    if isinstance(formula, And):
        return top_level_probs(formula.left) + top_level_probs(formula.right)
    return []
