"""Guard-condition language: tokenizer, typed parser, evaluator, printer.

Grammar (EBNF, also in docs/grammar.md)::

    condition  = disjunct ;
    disjunct   = conjunct , { "or" , conjunct } ;
    conjunct   = negation , { "and" , negation } ;
    negation   = "not" , negation | atom ;
    atom       = "(" , condition , ")" | operand , [ comparator , operand ] ;
    comparator = "==" | "!=" | "<" | "<=" | ">" | ">=" ;
    operand    = literal | path ;
    path       = ( "self" | "old" | "input" ) , "." , identifier ;
    literal    = string | integer | decimal | "true" | "false" | "null" ;

A bare operand is only a condition when it is bool-typed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal
from typing import Mapping, Union

from .errors import ConditionTypeError, MissingBinding, SchemaSyntaxError, ScopeError, ValidationError
from .values import INT_MAX, INT_MIN, QUANTUM, Timestamp, TwinId

CONTEXTS = {
    "invariant": ("self",),
    "pre": ("self", "input"),
    "post": ("self", "old", "input"),
}
COMPARATORS = ("==", "!=", "<", "<=", ">", ">=")
ORDERING = ("<", "<=", ">", ">=")
KEYWORDS = {"and", "or", "not", "true", "false", "null"}
ROOTS = ("self", "old", "input")
_UNORDERED_TYPES = ("bool", "dt_ref")


@dataclass(frozen=True)
class Literal:
    value: object
    type: str  # a value type or "null"


@dataclass(frozen=True)
class Path:
    root: str
    key: str
    type: str


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Operand"
    right: "Operand"


@dataclass(frozen=True)
class And:
    operands: tuple


@dataclass(frozen=True)
class Or:
    operands: tuple


@dataclass(frozen=True)
class Not:
    operand: "Expr"


Operand = Union[Literal, Path]
Expr = Union[Literal, Path, Compare, And, Or, Not]


# --- tokenizer ------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<number>-?\d+(?:\.\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<punct>[().])
    """,
    re.VERBOSE,
)
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", '"': '"', "'": "'"}


def _unescape(body: str, pos: int) -> str:
    out, i = [], 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            nxt = body[i + 1]
            if nxt not in _ESCAPES:
                raise SchemaSyntaxError(f"unknown escape \\{nxt}", f"col {pos + i + 1}")
            out.append(_ESCAPES[nxt])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise SchemaSyntaxError(f"unexpected character {text[pos]!r}", f"col {pos}")
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


# --- parser ---------------------------------------------------------------


class _Parser:
    def __init__(self, text, context, attributes, inputs):
        if context not in CONTEXTS:
            raise ValueError(f"unknown condition context {context!r}")
        self.text = text
        self.context = context
        self.attributes = attributes
        self.inputs = inputs
        self.tokens = tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind == "string":
            raise SchemaSyntaxError(f"expected {value!r}, found {text or 'end of input'!r}", f"col {pos}")

    def parse(self) -> Expr:
        expr = self.disjunct()
        kind, text, pos = self.peek()
        if kind != "eof":
            raise SchemaSyntaxError(f"unexpected {text!r}", f"col {pos}")
        return expr

    def _is_word(self, word):
        kind, text, _ = self.peek()
        return kind == "ident" and text == word

    def disjunct(self):
        items = [self.conjunct()]
        while self._is_word("or"):
            self.take()
            items.append(self.conjunct())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def conjunct(self):
        items = [self.negation()]
        while self._is_word("and"):
            self.take()
            items.append(self.negation())
        return items[0] if len(items) == 1 else And(tuple(items))

    def negation(self):
        if self._is_word("not"):
            self.take()
            return Not(self.negation())
        return self.atom()

    def atom(self):
        kind, text, pos = self.peek()
        if kind == "punct" and text == "(":
            self.take()
            inner = self.disjunct()
            self.expect(")")
            return inner
        left = self.operand()
        kind, text, pos = self.peek()
        if kind == "op":
            self.take()
            right = self.operand()
            return _typed_compare(text, left, right, pos)
        if _operand_type(left) != "bool":
            raise ConditionTypeError(f"operand at col {pos} is not a boolean condition")
        return left

    def operand(self) -> Operand:
        kind, text, pos = self.take()
        loc = f"col {pos}"
        if kind == "string":
            return Literal(_unescape(text[1:-1], pos), "string")
        if kind == "number":
            if "." in text:
                value = Decimal(text)
                if value != value.quantize(QUANTUM):
                    raise SchemaSyntaxError("decimal literal has more than 4 fractional digits", loc)
                return Literal(value.quantize(QUANTUM), "decimal")
            value = int(text)
            if not INT_MIN <= value <= INT_MAX:
                raise SchemaSyntaxError("integer literal out of 64-bit range", loc)
            return Literal(value, "int")
        if kind == "ident":
            if text in ("true", "false"):
                return Literal(text == "true", "bool")
            if text == "null":
                return Literal(None, "null")
            if text in ROOTS:
                self.expect(".")
                kkind, key, kpos = self.take()
                if kkind != "ident":
                    raise SchemaSyntaxError(f"expected a name after '{text}.'", f"col {kpos}")
                return self.resolve(text, key, loc)
            raise SchemaSyntaxError(f"unknown name {text!r}; paths start with self/old/input", loc)
        raise SchemaSyntaxError(f"expected an operand, found {text or 'end of input'!r}", loc)

    def resolve(self, root, key, loc) -> Path:
        if root not in CONTEXTS[self.context]:
            raise ScopeError(f"'{root}' may not appear in a {self.context} condition", loc)
        if root == "input":
            if key not in self.inputs:
                raise ValidationError(f"undeclared input {key!r}", loc)
            return Path(root, key, self.inputs[key])
        if key not in self.attributes:
            raise ValidationError(f"undeclared attribute {key!r}", loc)
        return Path(root, key, self.attributes[key])


def _operand_type(operand) -> str | None:
    return operand.type if isinstance(operand, (Literal, Path)) else None


def _coerce_literal(lit: Literal, target: str) -> Literal:
    """Give an untyped-looking literal the type of the path it meets."""
    if target == "timestamp" and lit.type == "int" and lit.value >= 0:
        return Literal(Timestamp(lit.value), "timestamp")
    if target == "dt_ref" and lit.type == "string":
        try:
            return Literal(TwinId.parse(lit.value), "dt_ref")
        except ValueError:
            raise ConditionTypeError(f"{lit.value!r} is not a twin reference") from None
    return lit


def _compatible(a: str, b: str) -> bool:
    return a == b or {a, b} <= {"int", "decimal"}


def _typed_compare(op, left, right, pos) -> Compare:
    if isinstance(left, Literal) and isinstance(right, Path):
        left = _coerce_literal(left, right.type)
    if isinstance(right, Literal) and isinstance(left, Path):
        right = _coerce_literal(right, left.type)
    lt, rt = left.type, right.type
    if "null" in (lt, rt):
        if op in ORDERING:
            raise ConditionTypeError(f"'{op}' at col {pos} cannot order null")
        return Compare(op, left, right)
    if not _compatible(lt, rt):
        raise ConditionTypeError(f"cannot compare {lt} with {rt} (col {pos})")
    if op in ORDERING and lt in _UNORDERED_TYPES:
        raise ConditionTypeError(f"'{op}' is not defined on {lt} (col {pos})")
    return Compare(op, left, right)


def parse_condition(text: str, context: str, defn, inputs: Mapping[str, str] | None = None) -> Expr:
    """Parse ``text`` into a typed AST legal in ``context``.

    ``defn`` is a TwinDefinition or a plain ``{key: value_type}`` mapping;
    ``inputs`` maps input names to value types.
    """
    attributes = defn.attribute_types if hasattr(defn, "attribute_types") else dict(defn)
    return _Parser(text, context, attributes, dict(inputs or {})).parse()


# --- evaluation -----------------------------------------------------------


def _kind(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, (int, Decimal)):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, TwinId):
        return "dt_ref"
    raise ConditionTypeError(f"unsupported runtime value {value!r}")


def _lookup(path: Path, env):
    try:
        scope = env[path.root]
        return scope[path.key]
    except KeyError:
        raise MissingBinding(f"no binding for {path.root}.{path.key}") from None


def _value(operand, env):
    if isinstance(operand, Literal):
        return operand.value
    return _lookup(operand, env)


def _compare(op, a, b):
    if a is None or b is None:
        if op in ORDERING:
            raise ConditionTypeError(f"'{op}' applied to null")
        same = a is None and b is None
        return same if op == "==" else not same
    ka, kb = _kind(a), _kind(b)
    if ka != kb:
        raise ConditionTypeError(f"cannot compare {ka} with {kb}")
    if op in ORDERING and ka in ("bool", "dt_ref"):
        raise ConditionTypeError(f"'{op}' is not defined on {ka}")
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def evaluate_condition(expr: Expr, env: Mapping[str, Mapping]) -> bool:
    """Evaluate ``expr`` against ``env = {"self": ..., "old": ..., "input": ...}``."""
    if isinstance(expr, Compare):
        return _compare(expr.op, _value(expr.left, env), _value(expr.right, env))
    if isinstance(expr, And):
        return all(evaluate_condition(e, env) for e in expr.operands)
    if isinstance(expr, Or):
        return any(evaluate_condition(e, env) for e in expr.operands)
    if isinstance(expr, Not):
        return not evaluate_condition(expr.operand, env)
    value = _value(expr, env)
    if not isinstance(value, bool):
        raise ConditionTypeError(f"{value!r} is not a boolean")
    return value


def paths(expr: Expr) -> list[Path]:
    """All paths in ``expr`` in source order."""
    if isinstance(expr, Path):
        return [expr]
    if isinstance(expr, Compare):
        return paths(expr.left) + paths(expr.right)
    if isinstance(expr, (And, Or)):
        return [p for e in expr.operands for p in paths(e)]
    if isinstance(expr, Not):
        return paths(expr.operand)
    return []


# --- printing -------------------------------------------------------------


def _literal_source(lit: Literal) -> str:
    v = lit.value
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Decimal):
        return format(v, "f")
    if isinstance(v, int):
        return str(int(v))
    text = str(v)
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r") + '"'


def to_source(expr: Expr) -> str:
    """Render ``expr`` back to condition text; fully parenthesises nested connectives."""
    if isinstance(expr, Literal):
        return _literal_source(expr)
    if isinstance(expr, Path):
        return f"{expr.root}.{expr.key}"
    if isinstance(expr, Compare):
        return f"{to_source(expr.left)} {expr.op} {to_source(expr.right)}"
    if isinstance(expr, Not):
        inner = to_source(expr.operand)
        return f"not {inner}" if isinstance(expr.operand, (Not, Compare, Literal, Path)) else f"not ({inner})"
    word = " and " if isinstance(expr, And) else " or "
    parts = []
    for e in expr.operands:
        s = to_source(e)
        parts.append(f"({s})" if isinstance(e, (And, Or)) else s)
    return word.join(parts)
