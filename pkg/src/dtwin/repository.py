"""The DT-Container twin store: CRUD, version history, anchoring and LUW staging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .durable import DurableLog
from .errors import (
    Busy,
    Destructed,
    DuplicateId,
    LuwStateError,
    NotFound,
    Rejected,
    Unauthorized,
    UnknownDefinition,
    UnknownLuw,
    VersionConflict,
)
from .identity import Principal
from .ledger import AnchorReceipt, WitnessLedger
from .schema import TwinDefinition
from .twin import DigitalTwin, TwinView, instantiate, state_hash, twin_from_record, twin_to_record, view_for
from .values import TwinId, to_json
from .verifier import TransitionRequest, verify_transition

log = logging.getLogger(__name__)

APPLIED, DISCARDED = "applied", "discarded"


def principal_to_record(p: Principal) -> dict:
    return {"id": p.principal_id, "roles": list(p.roles), "authorized_twins": sorted(str(t) for t in p.authorized_twins)}


def principal_from_record(rec: dict) -> Principal:
    return Principal(rec["id"], tuple(rec["roles"]), frozenset(TwinId.parse(t) for t in rec["authorized_twins"]))


def request_to_record(req: TransitionRequest) -> dict:
    return {
        "twin_id": str(req.twin_id),
        "transition": req.transition_name,
        "inputs": {k: to_json(v) for k, v in sorted(req.inputs.items())},
        "updates": {k: to_json(v) for k, v in sorted(req.updates.items())},
        "principal": principal_to_record(req.principal),
        "expected_version": req.expected_version,
    }


def request_from_record(rec: dict) -> TransitionRequest:
    return TransitionRequest(
        TwinId.parse(rec["twin_id"]), rec["transition"], dict(rec["inputs"]), dict(rec["updates"]),
        principal_from_record(rec["principal"]), rec["expected_version"],
    )


@dataclass
class TwinRecord:
    definition: TwinDefinition
    history: list[DigitalTwin] = field(default_factory=list)
    anchors: dict[int, AnchorReceipt] = field(default_factory=dict)
    lock: str | None = None
    staged: list[tuple[DigitalTwin, TransitionRequest]] = field(default_factory=list)
    destructed: bool = False

    @property
    def head(self) -> DigitalTwin:
        return self.history[-1]

    @property
    def tip(self) -> DigitalTwin:
        """Head, or the last staged candidate while a LUW holds the lock."""
        return self.staged[-1][0] if self.staged else self.head


@dataclass(frozen=True)
class StagedSummary:
    twin_id: TwinId
    luw_id: str
    state: str
    version: int


class Repository:
    def __init__(
        self,
        container_id: str,
        ledger: WitnessLedger,
        log: DurableLog | None = None,
        definitions: dict[str, TwinDefinition] | None = None,
        namespaces: dict[str, set[str]] | None = None,
    ):
        self.container_id = container_id
        self.ledger = ledger
        self.log = log if log is not None else DurableLog()
        self.definitions = dict(definitions or {})
        self.namespaces = {ns: set(ids) for ns, ids in (namespaces or {}).items()}
        self.records: dict[TwinId, TwinRecord] = {}
        self.resolved: dict[tuple[str, str], str] = {}
        self.audit: list[dict] = []

    # --- helpers ----------------------------------------------------------

    def _record(self, twin_id: TwinId) -> TwinRecord:
        try:
            return self.records[twin_id]
        except KeyError:
            raise NotFound(f"no twin {twin_id} in {self.container_id}") from None

    def _anchor(self, twin: DigitalTwin) -> AnchorReceipt:
        return self.ledger.anchor_state(state_hash(twin), self.container_id, str(twin.id), twin.version)

    def _persist(self, rec: TwinRecord, twin: DigitalTwin) -> None:
        assert twin.version == rec.head.version + 1
        receipt = self._anchor(twin)
        self.log.append("repo.persist", {"twin": twin_to_record(twin), "receipt": receipt.to_record()})
        rec.history.append(twin)
        rec.anchors[twin.version] = receipt

    def record_audit(self, op, req: TransitionRequest, accepted: bool, luw_id=None, caller=None) -> None:
        entry = {
            "op": op, "twin_id": str(req.twin_id), "transition": req.transition_name,
            "principal": req.principal.principal_id, "roles": list(req.principal.roles),
            "accepted": accepted, "luw": luw_id, "caller": caller,
        }
        self.log.append("repo.audit", entry)
        self.audit.append(entry)

    def definition(self, name: str) -> TwinDefinition:
        try:
            return self.definitions[name]
        except KeyError:
            raise UnknownDefinition(f"definition {name!r} is not registered in {self.container_id}") from None

    # --- CRUD -------------------------------------------------------------

    def create(self, def_name: str, twin_id: TwinId, initial: dict, owner: str, principal: Principal) -> TwinView:
        defn = self.definition(def_name)
        if principal.principal_id not in self.namespaces.get(twin_id.namespace, ()):
            raise Unauthorized(f"{principal.principal_id} is not the naming authority for {twin_id.namespace}")
        if twin_id in self.records:
            raise DuplicateId(f"twin {twin_id} already exists")
        twin = instantiate(defn, twin_id, initial, owner)
        receipt = self._anchor(twin)
        self.log.append("repo.create", {"definition": def_name, "twin": twin_to_record(twin), "receipt": receipt.to_record()})
        self.records[twin_id] = TwinRecord(defn, [twin], {0: receipt})
        return view_for(defn, twin, Principal(owner))

    def read(self, twin_id: TwinId, principal: Principal) -> TwinView:
        rec = self._record(twin_id)
        return view_for(rec.definition, rec.head, principal)

    def head(self, twin_id: TwinId) -> DigitalTwin:
        return self._record(twin_id).head

    def history(self, twin_id: TwinId) -> list[DigitalTwin]:
        return list(self._record(twin_id).history)

    def is_destructed(self, twin_id: TwinId) -> bool:
        return self._record(twin_id).destructed

    def definition_of(self, twin_id: TwinId) -> TwinDefinition:
        return self._record(twin_id).definition

    def lock_holder(self, twin_id: TwinId) -> str | None:
        return self._record(twin_id).lock

    def update(self, req: TransitionRequest, caller: str | None = None) -> TwinView:
        rec = self._record(req.twin_id)
        if rec.destructed:
            raise Destructed(f"twin {req.twin_id} is destructed")
        if rec.lock is not None:
            self.record_audit("update", req, False, caller=caller)
            raise Busy(f"twin {req.twin_id} is locked by LUW {rec.lock}")
        if req.expected_version != rec.head.version:
            raise VersionConflict(f"expected version {req.expected_version}, current is {rec.head.version}")
        verdict = verify_transition(rec.definition, rec.head, req)
        self.record_audit("update", req, verdict.accepted, caller=caller)
        if not verdict.accepted:
            raise Rejected(verdict)
        self._persist(rec, verdict.new_twin)
        return view_for(rec.definition, rec.head, Principal(rec.head.owner))

    def destruct(self, twin_id: TwinId, principal: Principal) -> str:
        rec = self._record(twin_id)
        if principal.principal_id != rec.head.owner:
            raise Unauthorized(f"only the owner may destruct {twin_id}")
        if rec.lock is not None:
            raise Busy(f"twin {twin_id} is locked by LUW {rec.lock}")
        if not rec.destructed:
            self.log.append("repo.destruct", {"twin_id": str(twin_id)})
            rec.destructed = True
        return f"destructed {twin_id}"

    # --- LUW staging ------------------------------------------------------

    def stage_transition(self, req: TransitionRequest, luw_id: str) -> StagedSummary:
        rec = self._record(req.twin_id)
        if rec.destructed:
            raise Destructed(f"twin {req.twin_id} is destructed")
        if rec.lock is not None and rec.lock != luw_id:
            raise Busy(f"twin {req.twin_id} is locked by LUW {rec.lock}")
        base = rec.tip
        if req.expected_version != base.version:
            raise VersionConflict(f"expected version {req.expected_version}, current is {base.version}")
        verdict = verify_transition(rec.definition, base, req)
        self.record_audit("stage", req, verdict.accepted, luw_id=luw_id)
        if not verdict.accepted:
            raise Rejected(verdict)
        candidate = verdict.new_twin
        self.log.append(
            "repo.stage",
            {"luw": luw_id, "twin": twin_to_record(candidate), "request": request_to_record(req)},
        )
        rec.lock = luw_id
        rec.staged.append((candidate, req))
        return StagedSummary(req.twin_id, luw_id, candidate.state, candidate.version)

    def staged_luws(self) -> set[str]:
        return {rec.lock for rec in self.records.values() if rec.lock is not None}

    def _locked_by(self, luw_id: str, twin_id: TwinId | None = None) -> list[TwinRecord]:
        return [
            rec for tid, rec in sorted(self.records.items())
            if rec.lock == luw_id and (twin_id is None or tid == twin_id)
        ]

    def _prior(self, luw_id: str, twin_id: TwinId | None) -> list[str]:
        return [o for (l, t), o in sorted(self.resolved.items()) if l == luw_id and (twin_id is None or t == str(twin_id))]

    def revalidate(self, luw_id: str, twin_id: TwinId | None = None) -> bool:
        """Re-run the verifier over every staged step of ``luw_id``."""
        recs = self._locked_by(luw_id, twin_id)
        if not recs:
            return False
        for rec in recs:
            base = rec.head
            for candidate, req in rec.staged:
                verdict = verify_transition(rec.definition, base, req)
                if not verdict.accepted or verdict.new_twin != candidate:
                    return False
                base = candidate
        return True

    def _resolve(self, luw_id: str, twin_id: TwinId | None, outcome: str) -> str:
        recs = self._locked_by(luw_id, twin_id)
        if not recs:
            prior = self._prior(luw_id, twin_id)
            if prior and all(o == outcome for o in prior):
                return f"{luw_id} already {outcome}"
            if prior:
                raise LuwStateError(f"{luw_id} was {prior[0]}")
            raise UnknownLuw(f"nothing staged for {luw_id}")
        for rec in recs:
            tid = rec.head.id
            # every staged version goes into one record so a crash never exposes a partial chain
            persisted = []
            if outcome == APPLIED:
                persisted = [(c, self._anchor(c)) for c, _ in rec.staged]
            self.log.append("repo.resolve", {
                "luw": luw_id, "twin_id": str(tid), "outcome": outcome,
                "persisted": [{"twin": twin_to_record(t), "receipt": r.to_record()} for t, r in persisted],
            })
            self._settle(rec, persisted)
            self.resolved[(luw_id, str(tid))] = outcome
        return f"{luw_id} {outcome}"

    @staticmethod
    def _settle(rec: TwinRecord, persisted) -> None:
        for twin, receipt in persisted:
            rec.history.append(twin)
            rec.anchors[twin.version] = receipt
        rec.staged = []
        rec.lock = None

    def apply_staged(self, luw_id: str, twin_id: TwinId | None = None) -> str:
        """Persist (and anchor) the staged candidates; idempotent."""
        return self._resolve(luw_id, twin_id, APPLIED)

    def discard_staged(self, luw_id: str, twin_id: TwinId | None = None) -> str:
        return self._resolve(luw_id, twin_id, DISCARDED)

    # --- recovery ---------------------------------------------------------

    def replay(self, records) -> None:
        """Rebuild in-memory state from this component's durable records."""
        for r in records:
            op, p = r["op"], r["payload"]
            if op == "repo.create":
                defn = self.definition(p["definition"])
                twin = twin_from_record(p["twin"], defn)
                self.records[twin.id] = TwinRecord(defn, [twin], {0: AnchorReceipt.from_record(p["receipt"])})
            elif op == "repo.persist":
                rec = self.records[TwinId.parse(p["twin"]["id"])]
                twin = twin_from_record(p["twin"], rec.definition)
                rec.history.append(twin)
                rec.anchors[twin.version] = AnchorReceipt.from_record(p["receipt"])
            elif op == "repo.destruct":
                self.records[TwinId.parse(p["twin_id"])].destructed = True
            elif op == "repo.stage":
                rec = self.records[TwinId.parse(p["twin"]["id"])]
                rec.lock = p["luw"]
                rec.staged.append((twin_from_record(p["twin"], rec.definition), request_from_record(p["request"])))
            elif op == "repo.resolve":
                rec = self.records[TwinId.parse(p["twin_id"])]
                self._settle(rec, [
                    (twin_from_record(x["twin"], rec.definition), AnchorReceipt.from_record(x["receipt"]))
                    for x in p["persisted"]
                ])
                self.resolved[(p["luw"], p["twin_id"])] = p["outcome"]
            elif op == "repo.audit":
                self.audit.append(p)
