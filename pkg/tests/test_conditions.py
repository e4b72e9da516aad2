from __future__ import annotations

import copy
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtwin.conditions import (
    And, Compare, Literal, Not, Or, Path, evaluate_condition, parse_condition, paths, to_source,
)
from dtwin.errors import ConditionTypeError, DtwinError, MissingBinding, ScopeError, ValidationError
from dtwin.values import Timestamp, TwinId

ATTRS = {
    "name": "string", "year": "int", "price": "decimal", "organic": "bool",
    "bottled_at": "timestamp", "owner_ref": "dt_ref",
}
INPUTS = {"code": "string", "qty": "int"}


def test_pre_condition_compares_two_string_paths(product_def):
    expr = parse_condition(
        "input.consumption_code == self.consumption_code", "pre", product_def, {"consumption_code": "string"}
    )
    assert expr == Compare(
        "==", Path("input", "consumption_code", "string"), Path("self", "consumption_code", "string")
    )


def test_old_is_illegal_in_invariants(product_def):
    with pytest.raises(ScopeError):
        parse_condition("old.year == self.year", "invariant", product_def)


@pytest.mark.parametrize("context,text", [("invariant", "input.qty > 1"), ("pre", "old.year > 1")])
def test_context_roots(context, text):
    with pytest.raises(ScopeError):
        parse_condition(text, context, ATTRS, INPUTS)


def test_connectives_match_hand_built_ast(product_def):
    # hand-built fixture, compared structurally
    expected = And((
        Compare(">=", Path("self", "year", "int"), Literal(1900, "int")),
        Not(Compare("==", Path("self", "consumed_by", "dt_ref"), Literal(None, "null"))),
    ))
    got = parse_condition("self.year >= 1900 and not self.consumed_by == null", "invariant", product_def)
    assert got == expected


def test_precedence_not_and_or():
    got = parse_condition("self.organic or not self.organic and self.year > 1", "invariant", ATTRS)
    organic = Path("self", "organic", "bool")
    assert got == Or((organic, And((Not(organic), Compare(">", Path("self", "year", "int"), Literal(1, "int"))))))


def test_undeclared_attribute_is_named():
    with pytest.raises(ValidationError, match="color"):
        parse_condition("self.color == \"red\"", "pre", ATTRS)


@pytest.mark.parametrize("text", [
    'self.year == "2018"',
    "self.organic < true",
    "self.owner_ref > self.owner_ref",
    "self.year < null",
    "self.name",
    "self.price == self.name",
])
def test_ill_typed_conditions_are_rejected(text):
    with pytest.raises(ConditionTypeError):
        parse_condition(text, "invariant", ATTRS)


def test_int_and_decimal_compare():
    expr = parse_condition("self.price > 10", "invariant", ATTRS)
    assert evaluate_condition(expr, {"self": {"price": Decimal("10.5")}}) is True


def test_literal_coercion_for_timestamps_and_refs():
    expr = parse_condition('self.bottled_at >= 1530403200 and self.owner_ref == "USR:alice"', "invariant", ATTRS)
    env = {"self": {"bottled_at": Timestamp(1530403200), "owner_ref": TwinId.parse("USR:alice")}}
    assert evaluate_condition(expr, env) is True
    with pytest.raises(ConditionTypeError):
        parse_condition('self.owner_ref == "not a ref"', "invariant", ATTRS)


def test_consumption_code_equality(product_def):
    expr = parse_condition(
        "input.consumption_code == self.consumption_code", "pre", product_def, {"consumption_code": "string"}
    )
    env = {"self": {"consumption_code": "XK42-99"}, "input": {"consumption_code": "XK42-99"}}
    assert evaluate_condition(expr, env) is True
    env["input"]["consumption_code"] = "XK42-98"
    assert evaluate_condition(expr, env) is False


def test_null_rules():
    eq = parse_condition("self.owner_ref == null", "invariant", ATTRS)
    assert evaluate_condition(eq, {"self": {"owner_ref": None}}) is True
    assert evaluate_condition(eq, {"self": {"owner_ref": TwinId.parse("USR:a")}}) is False
    both = parse_condition("self.year == self.year", "invariant", ATTRS)
    assert evaluate_condition(both, {"self": {"year": None}}) is True
    ordered = parse_condition("self.year < 5", "invariant", ATTRS)
    with pytest.raises(ConditionTypeError):
        evaluate_condition(ordered, {"self": {"year": None}})


def test_missing_binding():
    expr = parse_condition("self.year > 1", "invariant", ATTRS)
    with pytest.raises(MissingBinding):
        evaluate_condition(expr, {"self": {}})


def test_string_escapes_round_trip():
    expr = parse_condition(r'self.name == "a\"b\\c\nd"', "invariant", ATTRS)
    assert expr.right == Literal('a"b\\c\nd', "string")
    assert parse_condition(to_source(expr), "invariant", ATTRS) == expr


def test_paths_in_source_order():
    expr = parse_condition("input.qty > self.year or self.name == input.code", "pre", ATTRS, INPUTS)
    assert [f"{p.root}.{p.key}" for p in paths(expr)] == ["input.qty", "self.year", "self.name", "input.code"]


# --- generated expressions -------------------------------------------------

_VALUES = {
    "string": st.text(alphabet="ab\"\\\n\t xé", max_size=6),
    "int": st.integers(-10**6, 10**6),
    "decimal": st.decimals(min_value=-1000, max_value=1000, places=4, allow_nan=False, allow_infinity=False),
    "bool": st.booleans(),
}
_ORDERED = ("string", "int", "decimal")


@st.composite
def comparisons(draw):
    vtype = draw(st.sampled_from(sorted(_VALUES)))
    key = next(k for k, t in ATTRS.items() if t == vtype)
    ops = ("==", "!=") if vtype == "bool" else ("==", "!=", "<", "<=", ">", ">=")
    op = draw(st.sampled_from(ops))
    left = Path("self", key, vtype)
    if draw(st.booleans()):
        right = Literal(draw(_VALUES[vtype]), vtype)
    else:
        right = Path("self", key, vtype)
    return Compare(op, left, right)


def _wrap(children):
    return st.one_of(
        st.lists(children, min_size=2, max_size=3).map(lambda xs: And(tuple(xs))),
        st.lists(children, min_size=2, max_size=3).map(lambda xs: Or(tuple(xs))),
        children.map(Not),
    )


expressions = st.recursive(comparisons(), _wrap, max_leaves=8)

envs = st.fixed_dictionaries({
    "name": _VALUES["string"], "year": _VALUES["int"], "price": _VALUES["decimal"], "organic": _VALUES["bool"],
})


@given(expressions)
def test_printer_round_trips(expr):
    assert parse_condition(to_source(expr), "invariant", ATTRS) == expr


@given(expressions, envs)
def test_evaluation_is_pure(expr, env_self):
    env = {"self": env_self}
    before = copy.deepcopy(env)
    first = evaluate_condition(expr, env)
    assert evaluate_condition(expr, env) == first
    assert env == before


def _oracle(expr, env):
    # independent evaluator for the generated fragment (no nulls)
    if isinstance(expr, And):
        return all(_oracle(e, env) for e in expr.operands)
    if isinstance(expr, Or):
        return any(_oracle(e, env) for e in expr.operands)
    if isinstance(expr, Not):
        return not _oracle(expr.operand, env)
    a = env[expr.left.key]
    b = expr.right.value if isinstance(expr.right, Literal) else env[expr.right.key]
    return {"==": a == b, "!=": a != b, "<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[expr.op]


@given(expressions, envs)
def test_evaluation_agrees_with_oracle(expr, env_self):
    assert evaluate_condition(expr, {"self": env_self}) == _oracle(expr, env_self)


@settings(max_examples=400)
@given(st.text(alphabet='selfoldinput.yearnamepricorganic ()=!<>"\\0123456789-andornottruefalsenull', max_size=40))
def test_fuzzed_text_never_crashes(text):
    try:
        parse_condition(text, "post", ATTRS, INPUTS)
    except DtwinError:
        pass
