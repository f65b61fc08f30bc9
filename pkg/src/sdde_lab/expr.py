"""Arithmetic expression language for drift, diffusion and step-size entries.

Grammar (EBNF), whitespace between tokens is ignored::

    expr    = term , { ("+" | "-") , term } ;
    term    = unary , { ("*" | "/") , unary } ;
    unary   = ("-" | "+") , unary | power ;
    power   = atom , [ "^" , unary ] ;           (* right associative *)
    atom    = number | variable | call | "(" , expr , ")" ;
    call    = func , "(" , expr , { "," , expr } , ")" ;
    number  = digits , [ "." , [ digits ] ] , [ exponent ]
            | "." , digits , [ exponent ] ;
    exponent= ("e" | "E") , [ "+" | "-" ] , digits ;
    variable= ("x" | "y") , index ;              (* x1..xm, y1..ym *)
    func    = "sin" | "cos" | "exp" | "abs" | "sqrt" | "min" | "max" ;

``^`` binds tighter than unary minus, so ``-x1^2`` is ``-(x1^2)`` while the
exponent itself may carry a sign (``2^-1``).  ``min`` and ``max`` take two
arguments, every other function takes one.

Evaluation is IEEE double precision with numpy semantics: division by zero
and domain errors produce ``inf``/``nan`` rather than raising.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "BinOp", "Call",
    "ExprError", "ExprSyntaxError", "UnknownIdentifier", "IndexOutOfRange",
    "FUNCTIONS", "parse", "evaluate", "to_text", "to_source", "variables",
]

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "abs": 1, "sqrt": 1, "min": 2, "max": 2}


class ExprError(ValueError):
    """Base class for expression rejections; always carries a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ExprSyntaxError(ExprError):
    def __init__(self, offset: int, expected: str, found: str = ""):
        found_txt = f", found {found!r}" if found else ""
        super().__init__(f"expected {expected}{found_txt}", offset)
        self.expected = expected


class UnknownIdentifier(ExprError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r}", offset)
        self.name = name


class IndexOutOfRange(ExprError):
    def __init__(self, var: str, offset: int, state_dim: int):
        super().__init__(f"variable {var!r} out of range for state dimension {state_dim}", offset)
        self.var = var


# -- AST ---------------------------------------------------------------------

class Expr:
    """Base class of AST nodes.  Nodes are immutable and compare structurally."""

    def evaluate(self, x, y=None, env: Mapping[str, float] | None = None):
        return evaluate(self, x, y, env)

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True, eq=True)
class Num(Expr):
    value: float


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str

    @property
    def index(self) -> int:
        """Zero-based component index for x/y variables."""
        return int(self.name[1:]) - 1


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    operand: Expr


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True, eq=True)
class Call(Expr):
    func: str
    args: tuple


# -- tokenizer ---------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)
_VAR_RE = re.compile(r"([xy])(\d+)")


@dataclass(frozen=True)
class _Tok:
    kind: str  # "num" | "ident" | "op" | "end"
    text: str
    offset: int  # byte offset


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    byte = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(byte, "a number, identifier or operator", text[pos])
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), byte))
        byte += len(m.group().encode("utf-8"))
        pos = m.end()
    toks.append(_Tok("end", "", byte))
    return toks


class _Parser:
    def __init__(self, text: str, state_dim: int, allow_y: bool, extra: frozenset):
        self.toks = _tokenize(text)
        self.i = 0
        self.m = state_dim
        self.allow_y = allow_y
        self.extra = extra

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def _expect(self, text: str) -> None:
        if not self._accept(text):
            raise ExprSyntaxError(self.tok.offset, repr(text), self.tok.text)

    def parse(self) -> Expr:
        node = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(self.tok.offset, "an operator or end of input", self.tok.text)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self._accept("-"):
            return Neg(self.unary())
        if self._accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self._accept("^"):
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "ident":
            self.i += 1
            if tok.text in FUNCTIONS:
                return self._call(tok)
            return self._variable(tok)
        if self._accept("("):
            node = self.expr()
            self._expect(")")
            return node
        raise ExprSyntaxError(tok.offset, "a number, variable, function call or '('",
                              tok.text or "end of input")

    def _call(self, tok: _Tok) -> Expr:
        self._expect("(")
        args = [self.expr()]
        while self._accept(","):
            args.append(self.expr())
        arity = FUNCTIONS[tok.text]
        if len(args) != arity:
            raise ExprSyntaxError(self.tok.offset, f"{arity} argument(s) to {tok.text}",
                                  f"{len(args)} argument(s)")
        self._expect(")")
        return Call(tok.text, tuple(args))

    def _variable(self, tok: _Tok) -> Expr:
        name = tok.text
        if name in self.extra:
            return Var(name)
        m = _VAR_RE.fullmatch(name)
        if m is None or (m.group(1) == "y" and not self.allow_y):
            raise UnknownIdentifier(name, tok.offset)
        idx = int(m.group(2))
        if idx < 1 or idx > self.m:
            raise IndexOutOfRange(name, tok.offset, self.m)
        return Var(f"{m.group(1)}{idx}")


def parse(text: str, state_dim: int = 1, *, allow_y: bool = True,
          extra: Iterable[str] = ()) -> Expr:
    """Parse `text` into an AST.

    Parameters
    ----------
    text : str
        Expression source.
    state_dim : int
        Dimension ``m``; variables ``x1..xm`` and ``y1..ym`` are accepted.
    allow_y : bool
        Reject delayed-state variables when False (step-size functions).
    extra : iterable of str
        Additional scalar variable names, e.g. ``"theta"`` for initial segments.
    """
    if not isinstance(text, str):
        raise TypeError("expression text must be a str")
    if not text.strip():
        raise ExprSyntaxError(0, "a nonempty expression")
    parser = _Parser(text, state_dim, allow_y, frozenset(extra))
    try:
        return parser.parse()
    except RecursionError:
        raise ExprSyntaxError(parser.tok.offset, "shallower nesting") from None


# -- evaluation --------------------------------------------------------------

_NP_FUNCS = {
    "sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs, "sqrt": np.sqrt,
    "min": np.minimum, "max": np.maximum,
}
_NP_OPS = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide, "^": np.power}


def _lookup(node: Var, x, y, env):
    if env and node.name in env:
        return np.asarray(env[node.name], dtype=np.float64)
    arr = x if node.name[0] == "x" else y
    if arr is None:
        raise ValueError(f"no value supplied for {node.name}")
    return arr[..., node.index]


def _eval(node: Expr, x, y, env):
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        return _lookup(node, x, y, env)
    if isinstance(node, Neg):
        return np.negative(_eval(node.operand, x, y, env))
    if isinstance(node, BinOp):
        return _NP_OPS[node.op](_eval(node.left, x, y, env), _eval(node.right, x, y, env))
    if isinstance(node, Call):
        return _NP_FUNCS[node.func](*(_eval(a, x, y, env) for a in node.args))
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(e: Expr, x, y=None, env: Mapping[str, float] | None = None):
    """Evaluate `e` at current state `x` and delayed state `y`.

    `x` and `y` may carry leading batch dimensions (shape ``(..., m)``); the
    result then has the batch shape.  Non-finite results are returned, never
    raised.
    """
    x = None if x is None else np.asarray(x, dtype=np.float64)
    y = None if y is None else np.asarray(y, dtype=np.float64)
    with np.errstate(all="ignore"):
        return _eval(e, x, y, env)


def variables(e: Expr) -> set[str]:
    """Names of all variables referenced by `e`."""
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return variables(e.operand)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    if isinstance(e, Call):
        out: set[str] = set()
        for a in e.args:
            out |= variables(a)
        return out
    return set()


# -- printing ----------------------------------------------------------------

_ADD, _MUL, _UNARY, _POW, _ATOM = 1, 2, 3, 4, 5


def _show(node: Expr) -> tuple[str, int]:
    if isinstance(node, Num):
        return repr(float(node.value)), _ATOM
    if isinstance(node, Var):
        return node.name, _ATOM
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_text(a) for a in node.args)})", _ATOM
    if isinstance(node, Neg):
        s, lvl = _show(node.operand)
        return "-" + (s if lvl >= _UNARY else f"({s})"), _UNARY
    if isinstance(node, BinOp):
        ls, ll = _show(node.left)
        rs, rl = _show(node.right)
        if node.op == "^":
            ls = ls if ll >= _ATOM else f"({ls})"
            rs = rs if rl >= _UNARY else f"({rs})"
            return f"{ls}^{rs}", _POW
        lvl = _ADD if node.op in "+-" else _MUL
        ls = ls if ll >= lvl else f"({ls})"
        rs = rs if rl > lvl else f"({rs})"
        return f"{ls} {node.op} {rs}", lvl
    raise TypeError(f"not an expression node: {node!r}")


def to_text(e: Expr) -> str:
    """Render `e` with the minimal parentheses needed to parse back to `e`."""
    return _show(e)[0]


# -- code generation ---------------------------------------------------------

def to_source(e: Expr, target: str = "numpy", names: Mapping[str, str] | None = None) -> str:
    """Render `e` as a Python expression string.

    ``target="numpy"`` indexes ``x[..., i]`` and uses numpy ufuncs (works on
    batches); ``target="scalar"`` indexes ``x[i]`` and is suitable for numba.
    `names` maps extra variable names to source identifiers.
    """
    names = dict(names or {})
    vec = target == "numpy"

    def rec(node: Expr) -> str:
        if isinstance(node, Num):
            return f"np.float64({float(node.value)!r})" if vec else repr(float(node.value))
        if isinstance(node, Var):
            if node.name in names:
                return names[node.name]
            idx = f"..., {node.index}" if vec else str(node.index)
            return f"{node.name[0]}[{idx}]"
        if isinstance(node, Neg):
            return f"(-{rec(node.operand)})"
        if isinstance(node, BinOp):
            if node.op == "^":
                return f"np.power({rec(node.left)}, {rec(node.right)})"
            return f"({rec(node.left)} {node.op} {rec(node.right)})"
        if isinstance(node, Call):
            args = ", ".join(rec(a) for a in node.args)
            if node.func in ("min", "max"):
                return f"np.{node.func}imum({args})"
            return f"np.{node.func}({args})"
        raise TypeError(f"not an expression node: {node!r}")

    return rec(e)


def compile_numpy(exprs: Sequence[Expr], shape: tuple[int, ...], args: str = "x, y"):
    """Build a vectorized python function returning an array of ``batch + shape``.

    `exprs` are laid out in C order over `shape`.
    """
    lines = [f"def _fn({args}):"]
    first = args.split(",")[0].strip()
    lines.append(f"    {first} = np.asarray({first}, dtype=np.float64)")
    if "y" in args:
        lines.append("    y = np.asarray(y, dtype=np.float64)")
        lines.append("    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])")
    else:
        lines.append(f"    batch = {first}.shape[:-1]")
    lines.append(f"    out = np.empty(batch + {tuple(shape)!r})")
    lines.append("    with np.errstate(all='ignore'):")
    for flat, e in enumerate(exprs):
        idx = ", ".join(str(i) for i in np.unravel_index(flat, shape))
        lines.append(f"        out[..., {idx}] = {to_source(e, 'numpy')}")
    lines.append("    return out")
    ns: dict = {"np": np}
    exec("\n".join(lines), ns)
    return ns["_fn"]
