"""A small analytic expression language.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' exponent)?          # right associative
    atom   := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'

so ``-x^2`` is ``-(x^2)`` and ``2^3^2`` is ``2^(3^2)``.  Exponents must fold
to a constant.  Functions: sin, cos, exp, log, sqrt, abs.  The constant ``pi``
is predefined.  Variables default to ``x`` and ``y``; other variable sets
(for instance ``x1, x2, y1, y2``) can be requested at parse time.

Trees are immutable.  :func:`differentiate` is exact and only folds
constants; it refuses ``abs`` rather than produce a wrong derivative at kinks.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationDomainError

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs")
CONSTANTS = {"pi": math.pi}
DEFAULT_VARIABLES = ("x", "y")


class ParseError(ValueError):
    """Syntax error at byte offset ``position`` of the source."""

    code = "parse-error"

    def __init__(self, message, position):
        super().__init__(f"{message} (at offset {position})")
        self.message = message
        self.position = position
        self.location = (position,)

    def to_dict(self):
        return {"code": self.code, "message": self.message, "location": [self.position]}


# ---------------------------------------------------------------------------
# tree


class Expr:
    __slots__ = ()

    def __str__(self):
        return to_string(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Unary(Expr):
    op: str  # "neg" or a function name
    arg: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str  # + - * / ^
    left: Expr
    right: Expr


ExprAst = Expr


# smart constructors: constant folding and the 0/1 identities, nothing else

def const(v):
    return Const(float(v))


def _is(e, v):
    return isinstance(e, Const) and e.value == v


def neg(a):
    if isinstance(a, Const):
        return const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def add(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value + b.value)
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    return Binary("+", a, b)


def sub(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value - b.value)
    if _is(b, 0):
        return a
    if _is(a, 0):
        return neg(b)
    return Binary("-", a, b)


def mul(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return const(a.value * b.value)
    if _is(a, 0) or _is(b, 0):
        return const(0)
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    return Binary("*", a, b)


def div(a, b):
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0:
        return const(a.value / b.value)
    if _is(a, 0):
        return const(0)
    if _is(b, 1):
        return a
    return Binary("/", a, b)


def power(a, p: float):
    if p == 0:
        return const(1)
    if p == 1:
        return a
    if isinstance(a, Const):
        try:
            return const(a.value**p)
        except (OverflowError, ZeroDivisionError, ValueError):
            pass
    return Binary("^", a, const(p))


def func(name, a):
    if isinstance(a, Const):
        fn = {"sin": math.sin, "cos": math.cos, "exp": math.exp, "abs": abs}.get(name)
        if fn is not None:
            return const(fn(a.value))
        if name == "log" and a.value > 0:
            return const(math.log(a.value))
        if name == "sqrt" and a.value >= 0:
            return const(math.sqrt(a.value))
    return Unary(name, a)


# ---------------------------------------------------------------------------
# parser

_TOKEN = re.compile(r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))")


def _tokenize(src):
    pos = 0
    toks = []
    n = len(src)
    while pos < n:
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if not m or m.end() == pos:
            bad = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise ParseError(f"unexpected character {src[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append((kind, m.group(kind), start))
        pos = m.end()
    toks.append(("end", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src, variables):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0
        self.variables = tuple(variables)

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, value):
        t = self.take()
        if t[1] != value:
            what = "end of input" if t[0] == "end" else repr(t[1])
            raise ParseError(f"expected {value!r}, found {what}", t[2])
        return t

    def parse(self):
        e = self.expr()
        t = self.peek()
        if t[0] != "end":
            raise ParseError(f"trailing token {t[1]!r}", t[2])
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            r = self.term()
            e = Binary(op, e, r)
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            r = self.unary()
            e = Binary(op, e, r)
        return e

    def unary(self):
        t = self.peek()
        if t[0] == "op" and t[1] == "-":
            self.take()
            return Unary("neg", self.unary())
        if t[0] == "op" and t[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        t = self.peek()
        if t[0] == "op" and t[1] == "^":
            self.take()
            pos = self.peek()[2]
            expo = self.exponent()
            folded = fold(expo)
            if not isinstance(folded, Const):
                raise ParseError("exponent must be a constant", pos)
            return Binary("^", base, folded)
        return base

    def exponent(self):
        t = self.peek()
        if t[0] == "op" and t[1] in ("-", "+"):
            self.take()
            e = self.exponent()
            return Unary("neg", e) if t[1] == "-" else e
        return self.power()

    def atom(self):
        t = self.take()
        kind, val, pos = t
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Unary(val, arg)
            if val in self.variables:
                return Var(val)
            if val in CONSTANTS:
                return Const(CONSTANTS[val])
            raise ParseError(f"unknown identifier {val!r}", pos)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        what = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"unexpected {what}", pos)


def parse(src: str, variables=DEFAULT_VARIABLES) -> Expr:
    """Parse ``src`` into an expression tree; raises :class:`ParseError`."""
    return _Parser(src, variables).parse()


def fold(e: Expr) -> Expr:
    """Constant folding pass."""
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Unary):
        a = fold(e.arg)
        return neg(a) if e.op == "neg" else func(e.op, a)
    a, b = fold(e.left), fold(e.right)
    if e.op == "^":
        return power(a, b.value) if isinstance(b, Const) else Binary("^", a, b)
    return {"+": add, "-": sub, "*": mul, "/": div}[e.op](a, b)


# ---------------------------------------------------------------------------
# printing


def to_string(e: Expr) -> str:
    """Fully parenthesised text that :func:`parse` reads back to an equal value."""
    if isinstance(e, Const):
        r = repr(float(e.value))
        return f"({r})" if e.value < 0 or "e" in r or "inf" in r else r
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{to_string(e.arg)})"
        return f"{e.op}({to_string(e.arg)})"
    if e.op == "^":
        return f"({to_string(e.left)}^{to_string(e.right)})"
    return f"({to_string(e.left)} {e.op} {to_string(e.right)})"


def variables_of(e: Expr) -> set:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Const):
        return set()
    if isinstance(e, Unary):
        return variables_of(e.arg)
    return variables_of(e.left) | variables_of(e.right)


# ---------------------------------------------------------------------------
# evaluation


class _DomainFail(Exception):
    def __init__(self, what, mask):
        self.what = what
        self.mask = mask


def _ev(e, env, shape):
    if isinstance(e, Const):
        return np.full(shape, e.value)
    if isinstance(e, Var):
        return env[e.name]
    if isinstance(e, Unary):
        a = _ev(e.arg, env, shape)
        if e.op == "neg":
            return -a
        if e.op == "log":
            bad = ~(a > 0)
            if bad.any():
                raise _DomainFail("log of a nonpositive value", bad)
            return np.log(a)
        if e.op == "sqrt":
            bad = ~(a >= 0)
            if bad.any():
                raise _DomainFail("sqrt of a negative value", bad)
            return np.sqrt(a)
        if e.op == "exp":
            with np.errstate(over="ignore"):
                out = np.exp(a)
            bad = ~np.isfinite(out)
            if bad.any():
                raise _DomainFail("exp overflow", bad)
            return out
        return {"sin": np.sin, "cos": np.cos, "abs": np.abs}[e.op](a)
    a = _ev(e.left, env, shape)
    b = _ev(e.right, env, shape)
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    if e.op == "*":
        return a * b
    if e.op == "/":
        bad = b == 0
        if bad.any():
            raise _DomainFail("division by zero", bad)
        return a / b
    p = float(e.right.value) if isinstance(e.right, Const) else None
    if p is not None and p.is_integer():
        if p < 0:
            bad = a == 0
            if bad.any():
                raise _DomainFail("zero raised to a negative power", bad)
        return a ** int(p) if p >= 0 else 1.0 / a ** int(-p)
    bad = (a < 0) | ((a == 0) & (b < 0))
    if bad.any():
        raise _DomainFail("negative base with non-integer exponent", bad)
    return a**b


def evaluate(e: Expr, **env):
    """Evaluate on numpy arrays (or scalars) bound to the variable names.

    Raises :class:`EvaluationDomainError` with the flat index of the first
    offending point in ``location``.
    """
    arrs = {k: np.asarray(v, dtype=float) for k, v in env.items()}
    missing = variables_of(e) - set(arrs)
    if missing:
        raise EvaluationDomainError(f"unbound variables {sorted(missing)}")
    shape = np.broadcast_shapes(*(a.shape for a in arrs.values())) if arrs else ()
    arrs = {k: np.broadcast_to(v, shape) for k, v in arrs.items()}
    try:
        out = _ev(e, arrs, shape)
    except _DomainFail as fail:
        idx = np.argwhere(np.broadcast_to(fail.mask, shape))
        first = tuple(int(i) for i in idx[0]) if idx.size else ()
        raise EvaluationDomainError(fail.what, location=first) from None
    return np.broadcast_to(out, shape).astype(float) if shape else float(out)


def eval_grid(e: Expr, grid):
    """Sample an expression in ``x, y`` at the nodes of ``grid``.

    Domain errors report the node coordinates.
    """
    from .fields import ScalarField

    X, Y = grid.mesh()
    try:
        vals = evaluate(e, x=X, y=Y)
    except EvaluationDomainError as err:
        i, j = err.location
        x, y = grid.coords(i, j)
        raise EvaluationDomainError(f"{err.message} at node ({i}, {j}) = ({x:.6g}, {y:.6g})",
                                    location=(x, y)) from None
    return ScalarField(grid, np.array(vals, dtype=float))


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expr, var: str) -> Expr:
    """Exact symbolic derivative with respect to ``var``."""
    if isinstance(e, Const):
        return const(0)
    if isinstance(e, Var):
        return const(1 if e.name == var else 0)
    if isinstance(e, Unary):
        a = e.arg
        da = differentiate(a, var)
        if e.op == "neg":
            return neg(da)
        if e.op == "abs":
            raise ValueError("abs is not differentiable symbolically")
        if _is(da, 0):
            return const(0)
        outer = {
            "sin": lambda: func("cos", a),
            "cos": lambda: neg(func("sin", a)),
            "exp": lambda: func("exp", a),
            "log": lambda: div(const(1), a),
            "sqrt": lambda: div(const(0.5), func("sqrt", a)),
        }[e.op]()
        return mul(outer, da)
    a, b = e.left, e.right
    if e.op == "+":
        return add(differentiate(a, var), differentiate(b, var))
    if e.op == "-":
        return sub(differentiate(a, var), differentiate(b, var))
    if e.op == "*":
        return add(mul(differentiate(a, var), b), mul(a, differentiate(b, var)))
    if e.op == "/":
        num = sub(mul(differentiate(a, var), b), mul(a, differentiate(b, var)))
        return div(num, power(b, 2))
    p = b.value
    da = differentiate(a, var)
    if _is(da, 0):
        return const(0)
    return mul(mul(const(p), power(a, p - 1)), da)


def derivative_fn(e: Expr, *vars_):
    """Repeated derivative, e.g. ``derivative_fn(e, 'x', 'y')``."""
    for v in vars_:
        e = differentiate(e, v)
    return e
