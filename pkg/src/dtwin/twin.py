"""Twin instances, canonical serialization, state hashing and scope-filtered views.

Canonical layout (UTF-8, every line ends with LF)::

    dtwin-canonical/1
    id<TAB><namespace:local_id>
    type<TAB><type_name>
    version<TAB><decimal integer>
    state<TAB><state>
    owner<TAB><owner principal id>
    attr<TAB><key><TAB><tag><TAB><value>      one line per attribute, keys in code-point order

Tags are ``str int dec bool ts ref null``. ``dec`` renders exactly four
fractional digits, ``null`` renders an empty value, and text fields escape
backslash, TAB, LF and CR as ``\\\\ \\t \\n \\r``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Iterable, Mapping

from .conditions import evaluate_condition
from .errors import DtwinError, DuplicateId, InvariantViolation, ValidationError
from .identity import Principal
from .schema import TwinDefinition
from .values import Timestamp, TwinId, coerce_value, to_json

DIGEST_ALGORITHM = "sha256"
CANONICAL_HEADER = "dtwin-canonical/1"


@dataclass(frozen=True)
class DigitalTwin:
    id: TwinId
    type_name: str
    version: int
    state: str
    attributes: Mapping[str, object] = field(default_factory=dict)
    owner: str = ""

    def successor(self, state: str, updates: Mapping[str, object]) -> "DigitalTwin":
        attrs = dict(self.attributes)
        attrs.update(updates)
        return replace(self, version=self.version + 1, state=state, attributes=attrs)


@dataclass(frozen=True)
class TwinView:
    id: TwinId
    type_name: str
    version: int
    state: str
    attributes: Mapping[str, object]


def instantiate(
    defn: TwinDefinition,
    twin_id: TwinId,
    initial: Mapping[str, object],
    owner: str,
    taken: Iterable[TwinId] = (),
) -> DigitalTwin:
    """Create version 0 of a twin in the definition's initial state."""
    if twin_id in set(taken):
        raise DuplicateId(f"twin {twin_id} already exists")
    types = defn.attribute_types
    unknown = sorted(set(initial) - set(types))
    if unknown:
        raise ValidationError(f"undeclared attribute(s) {unknown} for {defn.type_name}")
    attrs = {key: coerce_value(vtype, initial.get(key)) for key, vtype in types.items()}
    twin = DigitalTwin(twin_id, defn.type_name, 0, defn.initial_state, attrs, owner)
    broken = failed_invariants(defn, twin)
    if broken:
        raise InvariantViolation(f"initial values violate {broken}")
    return twin


def failed_invariants(defn: TwinDefinition, twin: DigitalTwin) -> list[str]:
    failed = []
    for inv in defn.invariants:
        try:
            ok = evaluate_condition(inv.expr, {"self": twin.attributes})
        except DtwinError:
            ok = False
        if not ok:
            failed.append(inv.text)
    return failed


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def _tagged(value) -> tuple[str, str]:
    if value is None:
        return "null", ""
    if isinstance(value, bool):
        return "bool", "true" if value else "false"
    if isinstance(value, Timestamp):
        return "ts", str(int(value))
    if isinstance(value, int):
        return "int", str(value)
    if isinstance(value, Decimal):
        return "dec", format(value.quantize(Decimal("0.0001")) + Decimal("0.0000"), "f")
    if isinstance(value, TwinId):
        return "ref", _escape(str(value))
    if isinstance(value, str):
        return "str", _escape(value)
    raise TypeError(f"value {value!r} has no canonical form")


def canonical_serialize(twin: DigitalTwin) -> bytes:
    lines = [
        CANONICAL_HEADER,
        f"id\t{_escape(str(twin.id))}",
        f"type\t{_escape(twin.type_name)}",
        f"version\t{twin.version}",
        f"state\t{_escape(twin.state)}",
        f"owner\t{_escape(twin.owner)}",
    ]
    for key in sorted(twin.attributes):
        tag, text = _tagged(twin.attributes[key])
        lines.append(f"attr\t{key}\t{tag}\t{text}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def state_hash(twin: DigitalTwin) -> str:
    return hashlib.sha256(canonical_serialize(twin)).hexdigest()


def visible_keys(defn: TwinDefinition, twin: DigitalTwin, principal: Principal) -> list[str]:
    is_owner = principal.principal_id == twin.owner
    restricted_ok = is_owner or twin.id in principal.authorized_twins
    keys = []
    for a in defn.attributes:
        if a.scope == "public" or (a.scope == "restricted" and restricted_ok) or is_owner:
            keys.append(a.key)
    return keys


def view_for(defn: TwinDefinition, twin: DigitalTwin, principal: Principal) -> TwinView:
    keys = visible_keys(defn, twin, principal)
    return TwinView(twin.id, twin.type_name, twin.version, twin.state, {k: twin.attributes[k] for k in keys})


# --- JSON records (durable logs, history exports) -------------------------


def twin_to_record(twin: DigitalTwin) -> dict:
    return {
        "id": str(twin.id),
        "type": twin.type_name,
        "version": twin.version,
        "state": twin.state,
        "owner": twin.owner,
        "attributes": {k: to_json(v) for k, v in sorted(twin.attributes.items())},
    }


def twin_from_record(record: Mapping, defn: TwinDefinition) -> DigitalTwin:
    return twin_from_typed_record(record, defn.attribute_types)


def twin_from_typed_record(record: Mapping, types: Mapping[str, str]) -> DigitalTwin:
    """Like ``twin_from_record`` when only the attribute types are at hand."""
    attrs = {k: coerce_value(types[k], v) for k, v in record["attributes"].items()}
    return DigitalTwin(
        TwinId.parse(record["id"]), record["type"], record["version"], record["state"], attrs, record["owner"]
    )
