"""Design-by-contract verification of twin state transitions.

The verifier is a pure function of (definition, twin, request). It never
persists anything; the repository decides what to do with a verdict.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .conditions import paths, evaluate_condition
from .errors import DefinitionMismatch, DtwinError, ValueTypeError
from .identity import Principal
from .schema import Condition, TwinDefinition
from .twin import DigitalTwin
from .values import TwinId, coerce_value, to_json

PRE, POST, INVARIANT, AUTHORIZATION, STRUCTURAL = "pre", "post", "invariant", "authorization", "structural"


@dataclass(frozen=True)
class TransitionRequest:
    twin_id: TwinId
    transition_name: str
    inputs: Mapping[str, object] = field(default_factory=dict)
    updates: Mapping[str, object] = field(default_factory=dict)
    principal: Principal = Principal("anonymous")
    expected_version: int = 0


@dataclass(frozen=True)
class Failure:
    kind: str
    condition: str
    bindings: Mapping[str, object] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"kind": self.kind, "condition": self.condition, "bindings": dict(self.bindings)}


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    new_twin: DigitalTwin | None = None
    failures: tuple[Failure, ...] = ()

    def to_record(self) -> dict:
        return {"accepted": self.accepted, "failures": [f.to_record() for f in self.failures]}


def _reject(failures) -> Verdict:
    return Verdict(False, None, tuple(failures))


def _bindings(cond: Condition, env) -> dict:
    out = {}
    for p in paths(cond.expr):
        name = f"{p.root}.{p.key}"
        try:
            out[name] = to_json(env[p.root][p.key])
        except KeyError:
            out[name] = "<unbound>"
    return out


def _check_all(conds, env, kind) -> list[Failure]:
    failures = []
    for cond in conds:
        try:
            ok = evaluate_condition(cond.expr, env)
        except DtwinError as exc:
            failures.append(Failure(STRUCTURAL, cond.text, {**_bindings(cond, env), "error": str(exc)}))
            continue
        if not ok:
            failures.append(Failure(kind, cond.text, _bindings(cond, env)))
    return failures


def _coerce_map(declared: Mapping[str, str], given: Mapping, what: str):
    """Type-check request maps; returns (typed values, structural failures)."""
    typed, failures = {}, []
    for key in sorted(set(given) - set(declared)):
        failures.append(Failure(STRUCTURAL, f"{what} {key!r} not permitted", {key: to_json(given[key])}))
    for key, vtype in declared.items():
        if key not in given:
            continue
        try:
            typed[key] = coerce_value(vtype, given[key])
        except ValueTypeError as exc:
            failures.append(Failure(STRUCTURAL, f"{what} {key!r} must be {vtype}", {"error": str(exc)}))
    return typed, failures


def verify_transition(defn: TwinDefinition, twin: DigitalTwin, req: TransitionRequest) -> Verdict:
    if defn.type_name != twin.type_name:
        raise DefinitionMismatch(f"definition {defn.type_name} does not describe a {twin.type_name}")
    if req.twin_id != twin.id:
        raise DefinitionMismatch(f"request targets {req.twin_id}, twin is {twin.id}")

    # (1) structural
    tdef = defn.transition(twin.state, req.transition_name)
    if tdef is None:
        return _reject([Failure(STRUCTURAL, f"no transition {req.transition_name!r} from state {twin.state!r}")])
    inputs, failures = _coerce_map(tdef.input_types, req.inputs, "input")
    missing = [n for n, _ in tdef.inputs if n not in req.inputs]
    failures += [Failure(STRUCTURAL, f"input {n!r} is required") for n in missing]
    whitelist = {k: defn.attribute_types[k] for k in tdef.updates}
    updates, update_failures = _coerce_map(whitelist, req.updates, "update of")
    failures += update_failures
    if failures:
        return _reject(failures)

    # (2) authorization
    if tdef.allowed_roles:
        held = req.principal.roles_for(twin.owner)
        if not held & set(tdef.allowed_roles):
            return _reject([
                Failure(
                    AUTHORIZATION,
                    f"principal holds one of {list(tdef.allowed_roles)}",
                    {"principal": req.principal.principal_id, "roles": sorted(held)},
                )
            ])

    # (3) preconditions
    failures = _check_all(tdef.pre, {"self": twin.attributes, "input": inputs}, PRE)
    if failures:
        return _reject(failures)

    # (4) candidate, (5) postconditions
    candidate = twin.successor(tdef.to_state, updates)
    failures = _check_all(tdef.post, {"self": candidate.attributes, "old": twin.attributes, "input": inputs}, POST)
    if failures:
        return _reject(failures)

    # (6) type invariants
    failures = _check_all(defn.invariants, {"self": candidate.attributes}, INVARIANT)
    if failures:
        return _reject(failures)
    return Verdict(True, candidate, ())


def check_invariants(defn: TwinDefinition, twin: DigitalTwin) -> Verdict:
    if defn.type_name != twin.type_name:
        raise DefinitionMismatch(f"definition {defn.type_name} does not describe a {twin.type_name}")
    failures = _check_all(defn.invariants, {"self": twin.attributes}, INVARIANT)
    return _reject(failures) if failures else Verdict(True, twin, ())
