"""Declarative twin-type definitions.

A definition file is a UTF-8 JSON object::

    {
      "twin_type": "ConsumerProduct",
      "attributes": [{"key": "year", "type": "int", "scope": "public"}, ...],
      "states": ["constructed", "acquired", "consumed"],
      "initial_state": "constructed",
      "transitions": [{"name": "consume", "from": "acquired", "to": "consumed",
                       "inputs": [{"name": "consumption_code", "type": "string"}],
                       "pre": ["input.consumption_code == self.consumption_code"],
                       "post": [], "updates": ["consumed_by"],
                       "allowed_roles": ["consumer"]}],
      "invariants": ["self.year >= 1900"]
    }
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path as FsPath

from . import conditions
from .errors import ConditionTypeError, SchemaSyntaxError, ValidationError
from .values import VALUE_TYPES

SCOPES = ("private", "restricted", "public")

_KEY_RE = re.compile(r"[a-z][a-z0-9_]*")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

_TOP_KEYS = {"twin_type", "attributes", "states", "initial_state", "transitions", "invariants"}
_TRANSITION_KEYS = {"name", "from", "to", "inputs", "pre", "post", "updates", "allowed_roles"}


@dataclass(frozen=True)
class AttributeDef:
    key: str
    value_type: str
    scope: str


@dataclass(frozen=True)
class Condition:
    """A parsed condition that remembers its source text (used in diagnostics)."""

    text: str
    expr: conditions.Expr


@dataclass(frozen=True)
class TransitionDef:
    name: str
    from_state: str
    to_state: str
    pre: tuple[Condition, ...] = ()
    post: tuple[Condition, ...] = ()
    updates: tuple[str, ...] = ()
    inputs: tuple[tuple[str, str], ...] = ()
    allowed_roles: tuple[str, ...] = ()

    @property
    def input_types(self) -> dict[str, str]:
        return dict(self.inputs)


@dataclass(frozen=True)
class TwinDefinition:
    type_name: str
    attributes: tuple[AttributeDef, ...]
    states: tuple[str, ...]
    initial_state: str
    transitions: tuple[TransitionDef, ...] = ()
    invariants: tuple[Condition, ...] = ()

    @property
    def attribute_types(self) -> dict[str, str]:
        return {a.key: a.value_type for a in self.attributes}

    @property
    def scopes(self) -> dict[str, str]:
        return {a.key: a.scope for a in self.attributes}

    def transition(self, from_state: str, name: str) -> TransitionDef | None:
        for t in self.transitions:
            if t.from_state == from_state and t.name == name:
                return t
        return None

    def transitions_from(self, state: str) -> list[TransitionDef]:
        return [t for t in self.transitions if t.from_state == state]


# --- parsing --------------------------------------------------------------


def _expect(value, kind, location):
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        want = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise SchemaSyntaxError(f"expected {want}, got {type(value).__name__}", location)
    return value


def _string_list(value, location) -> list[str]:
    _expect(value, list, location)
    for i, item in enumerate(value):
        _expect(item, str, f"{location}[{i}]")
    return value


def _check_keys(obj, allowed, required, location):
    extra = set(obj) - allowed
    if extra:
        raise SchemaSyntaxError(f"unknown key(s) {sorted(extra)}", location)
    missing = required - set(obj)
    if missing:
        raise SchemaSyntaxError(f"missing key(s) {sorted(missing)}", location)


def _condition(text, context, attr_types, inputs, location) -> Condition:
    _expect(text, str, location)
    try:
        expr = conditions.parse_condition(text, context, attr_types, inputs)
    except SchemaSyntaxError as exc:
        raise SchemaSyntaxError(str(exc), location) from None
    except ValidationError as exc:
        raise type(exc)(str(exc), location) from None
    except ConditionTypeError as exc:
        raise ValidationError(f"ill-typed condition: {exc}", location) from None
    return Condition(text, expr)


def _unique(names, what, location):
    seen = set()
    for n in names:
        if n in seen:
            raise ValidationError(f"duplicate {what} {n!r}", location)
        seen.add(n)


def definition_from_dict(data) -> TwinDefinition:
    """Build and validate a definition from an already-decoded JSON object."""
    _expect(data, dict, "$")
    _check_keys(data, _TOP_KEYS, {"twin_type", "attributes", "states", "initial_state"}, "$")

    type_name = _expect(data["twin_type"], str, "$.twin_type")
    if not _NAME_RE.fullmatch(type_name):
        raise ValidationError(f"bad type name {type_name!r}", "$.twin_type")

    attributes = []
    for i, raw in enumerate(_expect(data["attributes"], list, "$.attributes")):
        loc = f"$.attributes[{i}]"
        _expect(raw, dict, loc)
        _check_keys(raw, {"key", "type", "scope"}, {"key", "type", "scope"}, loc)
        key = _expect(raw["key"], str, f"{loc}.key")
        if not _KEY_RE.fullmatch(key):
            raise ValidationError(f"attribute key {key!r} must match [a-z][a-z0-9_]*", loc)
        if raw["type"] not in VALUE_TYPES:
            raise ValidationError(f"unknown value type {raw['type']!r}", f"{loc}.type")
        if raw["scope"] not in SCOPES:
            raise ValidationError(f"unknown scope {raw['scope']!r}", f"{loc}.scope")
        attributes.append(AttributeDef(key, raw["type"], raw["scope"]))
    _unique([a.key for a in attributes], "attribute key", "$.attributes")
    attr_types = {a.key: a.value_type for a in attributes}

    states = _string_list(data["states"], "$.states")
    if not states:
        raise ValidationError("states must not be empty", "$.states")
    _unique(states, "state", "$.states")
    for i, s in enumerate(states):
        if not _NAME_RE.fullmatch(s):
            raise ValidationError(f"bad state name {s!r}", f"$.states[{i}]")
    initial = _expect(data["initial_state"], str, "$.initial_state")
    if initial not in states:
        raise ValidationError(f"initial state {initial!r} is not a declared state", "$.initial_state")

    transitions = []
    seen_edges = set()
    for i, raw in enumerate(_expect(data.get("transitions", []), list, "$.transitions")):
        loc = f"$.transitions[{i}]"
        _expect(raw, dict, loc)
        _check_keys(raw, _TRANSITION_KEYS, {"name", "from", "to"}, loc)
        name = _expect(raw["name"], str, f"{loc}.name")
        if not _NAME_RE.fullmatch(name):
            raise ValidationError(f"bad transition name {name!r}", f"{loc}.name")
        src = _expect(raw["from"], str, f"{loc}.from")
        dst = _expect(raw["to"], str, f"{loc}.to")
        for field, state in (("from", src), ("to", dst)):
            if state not in states:
                raise ValidationError(f"unknown state {state!r}", f"{loc}.{field}")
        if (src, name) in seen_edges:
            raise ValidationError(f"duplicate transition {name!r} from state {src!r}", loc)
        seen_edges.add((src, name))

        inputs = []
        for j, inp in enumerate(_expect(raw.get("inputs", []), list, f"{loc}.inputs")):
            iloc = f"{loc}.inputs[{j}]"
            _expect(inp, dict, iloc)
            _check_keys(inp, {"name", "type"}, {"name", "type"}, iloc)
            iname = _expect(inp["name"], str, f"{iloc}.name")
            if not _KEY_RE.fullmatch(iname):
                raise ValidationError(f"bad input name {iname!r}", iloc)
            if inp["type"] not in VALUE_TYPES:
                raise ValidationError(f"unknown value type {inp['type']!r}", f"{iloc}.type")
            inputs.append((iname, inp["type"]))
        _unique([n for n, _ in inputs], "input", f"{loc}.inputs")
        input_types = dict(inputs)

        updates = _string_list(raw.get("updates", []), f"{loc}.updates")
        _unique(updates, "update key", f"{loc}.updates")
        for j, key in enumerate(updates):
            if key not in attr_types:
                raise ValidationError(f"undeclared attribute {key!r} in updates", f"{loc}.updates[{j}]")

        pre = tuple(
            _condition(c, "pre", attr_types, input_types, f"{loc}.pre[{j}]")
            for j, c in enumerate(_expect(raw.get("pre", []), list, f"{loc}.pre"))
        )
        post = tuple(
            _condition(c, "post", attr_types, input_types, f"{loc}.post[{j}]")
            for j, c in enumerate(_expect(raw.get("post", []), list, f"{loc}.post"))
        )
        roles = _string_list(raw.get("allowed_roles", []), f"{loc}.allowed_roles")
        transitions.append(
            TransitionDef(name, src, dst, pre, post, tuple(updates), tuple(inputs), tuple(roles))
        )

    invariants = tuple(
        _condition(c, "invariant", attr_types, {}, f"$.invariants[{j}]")
        for j, c in enumerate(_expect(data.get("invariants", []), list, "$.invariants"))
    )
    return TwinDefinition(
        type_name, tuple(attributes), tuple(states), initial, tuple(transitions), invariants
    )


def parse_definition(text: str) -> TwinDefinition:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaSyntaxError(exc.msg, f"line {exc.lineno} col {exc.colno}") from None
    return definition_from_dict(data)


def load_definition(path) -> TwinDefinition:
    return parse_definition(FsPath(path).read_text(encoding="utf-8"))


def definition_to_dict(defn: TwinDefinition) -> dict:
    return {
        "twin_type": defn.type_name,
        "attributes": [{"key": a.key, "type": a.value_type, "scope": a.scope} for a in defn.attributes],
        "states": list(defn.states),
        "initial_state": defn.initial_state,
        "transitions": [
            {
                "name": t.name,
                "from": t.from_state,
                "to": t.to_state,
                "inputs": [{"name": n, "type": ty} for n, ty in t.inputs],
                "pre": [c.text for c in t.pre],
                "post": [c.text for c in t.post],
                "updates": list(t.updates),
                "allowed_roles": list(t.allowed_roles),
            }
            for t in defn.transitions
        ],
        "invariants": [c.text for c in defn.invariants],
    }


def dump_definition(defn: TwinDefinition) -> str:
    """Pretty-printed definition text; ``parse_definition`` inverts it."""
    return json.dumps(definition_to_dict(defn), indent=2, ensure_ascii=False) + "\n"
