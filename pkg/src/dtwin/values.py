"""Typed attribute values and twin identifiers.

Python types realise the attribute value union:

    string     -> str
    int        -> int (64-bit signed range)
    decimal    -> decimal.Decimal, fixed at 4 fractional digits
    bool       -> bool
    timestamp  -> Timestamp (int subclass, UTC seconds)
    dt_ref     -> TwinId
    null       -> None
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation

from .errors import ValueTypeError

VALUE_TYPES = ("string", "int", "decimal", "bool", "timestamp", "dt_ref")

INT_MIN, INT_MAX = -(2**63), 2**63 - 1
QUANTUM = Decimal("0.0001")

_NAMESPACE_RE = re.compile(r"[A-Z0-9]{2,12}")
_LOCAL_RE = re.compile(r"[A-Za-z0-9_\-]+")


class Timestamp(int):
    """UTC seconds; kept distinct from plain ints so the canonical form can tag it."""

    def __repr__(self) -> str:
        return f"Timestamp({int(self)})"


@dataclass(frozen=True, order=True)
class TwinId:
    namespace: str
    local_id: str

    def __post_init__(self):
        if not _NAMESPACE_RE.fullmatch(self.namespace):
            raise ValueError(f"bad namespace {self.namespace!r}: need 2-12 of [A-Z0-9]")
        if not _LOCAL_RE.fullmatch(self.local_id):
            raise ValueError(f"bad local id {self.local_id!r}")

    @classmethod
    def parse(cls, text: str) -> "TwinId":
        ns, sep, local = text.partition(":")
        if not sep:
            raise ValueError(f"twin id {text!r} is not of the form NAMESPACE:local_id")
        return cls(ns, local)

    def __str__(self) -> str:
        return f"{self.namespace}:{self.local_id}"


def to_decimal(raw) -> Decimal:
    if isinstance(raw, bool) or isinstance(raw, float):
        # floats would smuggle binary rounding into hashes
        raise ValueTypeError(f"decimal value must be a string or int, got {raw!r}")
    try:
        d = Decimal(str(raw)) if isinstance(raw, int) else Decimal(raw)
    except (InvalidOperation, TypeError, ValueError):
        raise ValueTypeError(f"not a decimal: {raw!r}") from None
    if not d.is_finite():
        raise ValueTypeError(f"not a finite decimal: {raw!r}")
    q = d.quantize(QUANTUM)
    if q != d:
        raise ValueTypeError(f"decimal {raw!r} has more than 4 fractional digits")
    return q + Decimal("0.0000")  # normalises -0.0000


def check_value(value_type: str, value) -> None:
    """Raise ValueTypeError unless ``value`` is a valid in-memory ``value_type`` value."""
    if value is None:
        return
    ok = False
    if value_type == "string":
        ok = isinstance(value, str)
    elif value_type == "int":
        ok = isinstance(value, int) and not isinstance(value, (bool, Timestamp))
        ok = ok and INT_MIN <= value <= INT_MAX
    elif value_type == "decimal":
        ok = isinstance(value, Decimal) and value.is_finite() and value == value.quantize(QUANTUM)
    elif value_type == "bool":
        ok = isinstance(value, bool)
    elif value_type == "timestamp":
        ok = isinstance(value, Timestamp) and value >= 0
    elif value_type == "dt_ref":
        ok = isinstance(value, TwinId)
    else:
        raise ValueTypeError(f"unknown value type {value_type!r}")
    if not ok:
        raise ValueTypeError(f"{value!r} is not a valid {value_type}")


def coerce_value(value_type: str, raw):
    """Convert a JSON-ish raw value into the typed in-memory value."""
    if raw is None:
        return None
    try:
        if value_type == "decimal":
            value = to_decimal(raw)
        elif value_type == "timestamp" and isinstance(raw, int) and not isinstance(raw, bool):
            value = Timestamp(raw)
        elif value_type == "dt_ref" and isinstance(raw, str):
            value = TwinId.parse(raw)
        else:
            value = raw
    except ValueError as exc:
        raise ValueTypeError(str(exc)) from None
    check_value(value_type, value)
    return value


def to_json(value):
    """Inverse of coerce_value: a JSON-safe rendering."""
    if isinstance(value, Decimal):
        return format(value, "f")
    if isinstance(value, TwinId):
        return str(value)
    if isinstance(value, Timestamp):
        return int(value)
    return value
