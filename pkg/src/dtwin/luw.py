"""Logical Units of Work: two-phase commit across DT-Containers.

The coordinator is the container of the application that starts the LUW.
Outcomes are decided by compare-and-set on the shared witness ledger, so a
coordinator and an in-doubt participant presuming abort can never disagree.

Durable records (container log):

    coordinator: luw.begin, luw.enlist, luw.preparing, luw.decided, luw.done
    participant: part.enlist, part.prepared, part.outcome
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .errors import AlreadyCommitted, DtwinError, LuwStateError, NotEnlisted, UnknownLuw, Unreachable, WrongPhase
from .ledger import ABORTED, COMMITTED, PREPARED
from .repository import APPLIED
from .values import TwinId
from .verifier import TransitionRequest

log = logging.getLogger(__name__)

ACTIVE, PREPARING = "ACTIVE", "PREPARING"
ENLISTED = "ENLISTED"
YES, NO = "YES", "NO"
REPO_TWIN, ASSET = "repository-twin", "asset-reservation"

# protocol message types
ENLIST, WORK, PREPARE = "ENLIST", "WORK", "PREPARE"
VOTE_YES, VOTE_NO = "VOTE_YES", "VOTE_NO"
COMMIT, ABORT, ACK = "COMMIT", "ABORT", "ACK"
STATUS_QUERY, STATUS_REPLY = "STATUS_QUERY", "STATUS_REPLY"

# deliberately broken protocol variants, used to show the fault sweep bites
SKIP_PREPARED_ANCHOR = "skip_prepared_anchor"
PRESUME_COMMIT = "presume_commit"


@dataclass(frozen=True)
class ProtocolSettings:
    prepare_timeout: int = 50
    work_timeout: int = 20
    retry_interval: int = 10
    max_retries: int = 100
    in_doubt_timeout: int = 120
    idle_timeout: int = 300
    auto_enlist: bool = True
    mutations: frozenset = frozenset()


@dataclass(frozen=True)
class ParticipantRef:
    container_id: str
    kind: str
    resource: str

    @property
    def key(self) -> str:
        return f"{self.container_id}/{self.kind}/{self.resource}"

    def to_record(self) -> dict:
        return {"container": self.container_id, "kind": self.kind, "resource": self.resource}

    @classmethod
    def from_record(cls, rec: dict) -> "ParticipantRef":
        if rec["kind"] not in (REPO_TWIN, ASSET):
            raise ValueError(f"unknown participant kind {rec['kind']!r}")
        return cls(rec["container"], rec["kind"], rec["resource"])


@dataclass
class LuwDescriptor:
    luw_id: str
    coordinator: str
    participants: list[ParticipantRef] = field(default_factory=list)
    phase: str = ACTIVE
    votes: dict[str, str | None] = field(default_factory=dict)
    deadline: int | None = None
    acks: set[str] = field(default_factory=set)
    done: bool = False
    retries: int = 0

    def keys(self) -> list[str]:
        return [p.key for p in self.participants]


def luw_id_for(container_id: str, counter: int) -> str:
    return f"{container_id}#{counter}"


# --------------------------------------------------------------------------
# coordinator
# --------------------------------------------------------------------------


class Coordinator:
    def __init__(self, node):
        self.node = node
        self.luws: dict[str, LuwDescriptor] = {}
        self.counter = 0
        self._work_seq = 0
        self._waiting: dict[str, Callable] = {}  # work token -> callback (volatile)
        self._outcome_waiters: dict[str, list[Callable]] = {}

    @property
    def settings(self) -> ProtocolSettings:
        return self.node.settings

    def _send(self, msg_type, ref_or_container, luw_id, payload):
        to = ref_or_container.container_id if isinstance(ref_or_container, ParticipantRef) else ref_or_container
        return self.node.net.send(msg_type, self.node.container_id, to, luw_id, payload)

    def get(self, luw_id: str) -> LuwDescriptor:
        try:
            return self.luws[luw_id]
        except KeyError:
            raise UnknownLuw(luw_id) from None

    # --- application API --------------------------------------------------

    def begin_luw(self) -> LuwDescriptor:
        self.counter += 1
        luw_id = luw_id_for(self.node.container_id, self.counter)
        self.node.log.append("luw.begin", {"luw": luw_id, "counter": self.counter})
        d = LuwDescriptor(luw_id, self.node.container_id)
        self.luws[luw_id] = d
        self.node.net.record("LUW_BEGIN", luw_id=luw_id, container=self.node.container_id)
        return d

    def _add_participant(self, d: LuwDescriptor, ref: ParticipantRef) -> bool:
        if ref.key in d.votes:
            return False
        self.node.log.append("luw.enlist", {"luw": d.luw_id, "participant": ref.to_record()})
        d.participants.append(ref)
        d.votes[ref.key] = None
        return True

    def enlist(self, luw_id: str, ref: ParticipantRef, on_done: Callable | None = None) -> str:
        d = self.get(luw_id)
        if d.phase != ACTIVE:
            raise WrongPhase(f"{luw_id} is {d.phase}")
        if not self.node.net.is_up(ref.container_id):
            raise Unreachable(f"container {ref.container_id} is down")
        if not self._add_participant(d, ref):
            if on_done:
                on_done(True, {"enlisted": ref.key})
            return f"{ref.key} already enlisted"
        token = self._await(luw_id, on_done)
        self._send(ENLIST, ref, luw_id, {"participant": ref.to_record(), "token": token})
        return f"{ref.key} enlisting"

    def _await(self, luw_id: str, callback: Callable | None) -> str:
        self._work_seq += 1
        token = f"{luw_id}:{self._work_seq}"
        self._waiting[token] = callback or (lambda ok, result: None)
        self.node.net.set_timer(self.node.container_id, self.settings.work_timeout, "work_timeout", {"token": token})
        return token

    def do_work(self, luw_id: str, ref: ParticipantRef, item: dict, credential: str | None, on_result: Callable) -> str:
        """Route a work item to the owning container; ``on_result(ok, result)`` fires on reply or timeout."""
        d = self.get(luw_id)
        if d.phase != ACTIVE:
            raise WrongPhase(f"{luw_id} is {d.phase}")
        if ref.key not in d.votes:
            if not self.settings.auto_enlist:
                raise NotEnlisted(f"{ref.key} is not enlisted in {luw_id}")
            self._add_participant(d, ref)
        token = self._await(luw_id, on_result)
        self._send(WORK, ref, luw_id, {"participant": ref.to_record(), "token": token, "work": item, "credential": credential})
        return token

    def complete(self, luw_id: str, on_outcome: Callable | None = None) -> None:
        d = self.get(luw_id)
        if d.phase != ACTIVE:
            raise WrongPhase(f"{luw_id} is {d.phase}")
        if on_outcome:
            self._outcome_waiters.setdefault(luw_id, []).append(on_outcome)
        self.node.log.append("luw.preparing", {"luw": luw_id, "participants": d.keys()})
        d.phase = PREPARING
        if not d.participants:
            self._decide(d, COMMITTED)
            return
        d.deadline = self.node.net.tick + self.settings.prepare_timeout
        self.node.net.set_timer(self.node.container_id, self.settings.prepare_timeout, "deadline", {"luw": luw_id})
        for ref in d.participants:
            self._send(PREPARE, ref, luw_id, {"participant": ref.key})

    def abort(self, luw_id: str, on_outcome: Callable | None = None) -> str:
        d = self.get(luw_id)
        if d.phase == COMMITTED:
            raise AlreadyCommitted(luw_id)
        if on_outcome:
            self._outcome_waiters.setdefault(luw_id, []).append(on_outcome)
        if d.phase == ABORTED:
            self._notify(d)
            return f"{luw_id} already aborted"
        self._decide(d, ABORTED)
        return f"{luw_id} aborted"

    # --- protocol ---------------------------------------------------------

    def _decide(self, d: LuwDescriptor, outcome: str) -> None:
        effective, _ = self.node.ledger.decide(d.luw_id, outcome, self.node.container_id, d.keys())
        self.node.log.append("luw.decided", {"luw": d.luw_id, "outcome": effective})
        d.phase = effective
        self._broadcast(d)
        self._notify(d)

    def _notify(self, d: LuwDescriptor) -> None:
        for cb in self._outcome_waiters.pop(d.luw_id, []):
            cb(d.phase)

    def _broadcast(self, d: LuwDescriptor) -> None:
        pending = [ref for ref in d.participants if ref.key not in d.acks]
        if not pending:
            self._finish(d)
            return
        msg_type = COMMIT if d.phase == COMMITTED else ABORT
        for ref in pending:
            self._send(msg_type, ref, d.luw_id, {"participant": ref.key})
        self.node.net.set_timer(self.node.container_id, self.settings.retry_interval, "retry", {"luw": d.luw_id})

    def _finish(self, d: LuwDescriptor) -> None:
        if not d.done:
            d.done = True
            self.node.log.append("luw.done", {"luw": d.luw_id})

    def handle(self, msg) -> None:
        p = msg.payload
        if msg.msg_type == ACK and p.get("re") in (ENLIST, WORK):
            cb = self._waiting.pop(p["token"], None)
            if cb is not None:
                cb(p["ok"], p.get("result") if p["ok"] else p.get("error"))
            return
        d = self.luws.get(msg.luw_id)
        if msg.msg_type == STATUS_QUERY:
            decision = self.node.ledger.decision(msg.luw_id)
            phase = d.phase if d is not None else "UNKNOWN"
            self._send(STATUS_REPLY, msg.sender, msg.luw_id, {"participant": p["participant"], "decision": decision, "phase": phase})
            return
        if d is None:
            log.warning("%s: %s for unknown LUW %s", self.node.container_id, msg.msg_type, msg.luw_id)
            return
        if msg.msg_type in (VOTE_YES, VOTE_NO):
            key = p["participant"]
            if d.phase != PREPARING or key not in d.votes:
                return
            d.votes[key] = YES if msg.msg_type == VOTE_YES else NO
            if msg.msg_type == VOTE_NO:
                self._decide(d, ABORTED)
            elif all(v == YES for v in d.votes.values()):
                self._decide(d, COMMITTED)
        elif msg.msg_type == ACK and p.get("re") in (COMMIT, ABORT):
            if d.phase in (COMMITTED, ABORTED):
                d.acks.add(p["participant"])
                if all(k in d.acks for k in d.keys()):
                    self._finish(d)

    def on_timer(self, name: str, data: dict) -> None:
        if name == "work_timeout":
            cb = self._waiting.pop(data["token"], None)
            if cb is not None:
                cb(False, "Timeout: no reply from participant")
        elif name == "deadline":
            d = self.luws.get(data["luw"])
            if d is not None and d.phase == PREPARING:
                self.node.net.record("DEADLINE", luw_id=d.luw_id, container=self.node.container_id)
                self._decide(d, ABORTED)
        elif name == "retry":
            d = self.luws.get(data["luw"])
            if d is None or d.done:
                return
            d.retries += 1
            if d.retries > self.settings.max_retries:
                self.node.net.record("RETRY_EXHAUSTED", luw_id=d.luw_id, container=self.node.container_id)
                return
            self._broadcast(d)

    # --- recovery ---------------------------------------------------------

    def replay(self, records) -> None:
        for r in records:
            op, p = r["op"], r["payload"]
            if op == "luw.begin":
                self.luws[p["luw"]] = LuwDescriptor(p["luw"], self.node.container_id)
                self.counter = max(self.counter, p["counter"])
            elif op == "luw.enlist":
                d = self.luws[p["luw"]]
                ref = ParticipantRef.from_record(p["participant"])
                d.participants.append(ref)
                d.votes[ref.key] = None
            elif op == "luw.preparing":
                self.luws[p["luw"]].phase = PREPARING
            elif op == "luw.decided":
                self.luws[p["luw"]].phase = p["outcome"]
            elif op == "luw.done":
                self.luws[p["luw"]].done = True

    def recover(self) -> list[str]:
        """Presumed abort for undecided LUWs; re-drive delivery of decided ones."""
        resolved = []
        for luw_id, d in sorted(self.luws.items()):
            if d.done:
                continue
            if d.phase in (ACTIVE, PREPARING):
                self._decide(d, ABORTED)
            else:
                self._broadcast(d)
            resolved.append(luw_id)
        return resolved


# --------------------------------------------------------------------------
# participant
# --------------------------------------------------------------------------


@dataclass
class ParticipantState:
    luw_id: str
    ref: ParticipantRef
    coordinator: str
    status: str = ENLISTED
    failed: bool = False  # some work item failed; the participant will vote NO


class Participant:
    def __init__(self, node):
        self.node = node
        self.states: dict[tuple[str, str], ParticipantState] = {}

    @property
    def settings(self) -> ProtocolSettings:
        return self.node.settings

    def _reply(self, st_or_to, msg_type, luw_id, payload):
        to = st_or_to.coordinator if isinstance(st_or_to, ParticipantState) else st_or_to
        self.node.net.send(msg_type, self.node.container_id, to, luw_id, payload)

    def _enlist(self, luw_id: str, ref: ParticipantRef, coordinator: str) -> ParticipantState:
        if ref.container_id != self.node.container_id:
            raise WrongPhase(f"{ref.key} is not hosted by {self.node.container_id}")
        key = (luw_id, ref.key)
        if key not in self.states:
            self.node.log.append("part.enlist", {"luw": luw_id, "participant": ref.to_record(), "coordinator": coordinator})
            self.states[key] = ParticipantState(luw_id, ref, coordinator)
        return self.states[key]

    # --- resource routing -------------------------------------------------

    def _stage(self, st: ParticipantState, item: dict, credential) -> dict:
        principal = self.node.authenticate(credential)
        if st.ref.kind == REPO_TWIN:
            req = TransitionRequest(
                TwinId.parse(st.ref.resource), item["transition"], dict(item.get("inputs", {})),
                dict(item.get("updates", {})), principal, item.get("expected_version", 0),
            )
            summary = self.node.repository.stage_transition(req, st.luw_id)
            return {"twin": str(summary.twin_id), "state": summary.state, "version": summary.version}
        provider = self.node.provider(st.ref.resource)
        res = provider.reserve(item["effect"], st.luw_id, principal)
        return {"reservation": res.reservation_id}

    def _has_staged(self, st: ParticipantState) -> bool:
        if st.ref.kind == REPO_TWIN:
            return self.node.repository.lock_holder(TwinId.parse(st.ref.resource)) == st.luw_id
        return bool(self.node.provider(st.ref.resource).reservations_for(st.luw_id))

    def _revalidate(self, st: ParticipantState) -> bool:
        if not self._has_staged(st):
            return True  # read-only participant
        if st.ref.kind == REPO_TWIN:
            return self.node.repository.revalidate(st.luw_id, TwinId.parse(st.ref.resource))
        return self.node.provider(st.ref.resource).revalidate(st.luw_id)

    def _apply(self, st: ParticipantState) -> None:
        if st.ref.kind == REPO_TWIN:
            if self._has_staged(st):
                self.node.repository.apply_staged(st.luw_id, TwinId.parse(st.ref.resource))
        else:
            self.node.provider(st.ref.resource).commit_luw(st.luw_id)

    def _release(self, st: ParticipantState) -> None:
        if st.ref.kind == REPO_TWIN:
            if self._has_staged(st):
                self.node.repository.discard_staged(st.luw_id, TwinId.parse(st.ref.resource))
        else:
            self.node.provider(st.ref.resource).abort_luw(st.luw_id)

    def _conclude(self, st: ParticipantState, outcome: str, anchor: bool = True) -> None:
        if outcome == COMMITTED:
            self._apply(st)
        else:
            self._release(st)
        if anchor:
            self.node.ledger.anchor_luw_event(st.luw_id, outcome, self.node.container_id, st.ref.key)
        self.node.log.append("part.outcome", {"luw": st.luw_id, "participant": st.ref.key, "outcome": outcome})
        st.status = outcome

    # --- messages ---------------------------------------------------------

    def handle(self, msg) -> None:
        p = msg.payload
        if msg.msg_type in (ENLIST, WORK):
            ref = ParticipantRef.from_record(p["participant"])
            reply = {"re": msg.msg_type, "token": p["token"], "participant": ref.key}
            try:
                st = self._enlist(msg.luw_id, ref, msg.sender)
                if msg.msg_type == ENLIST:
                    result = {"enlisted": ref.key}
                elif st.status != ENLISTED:
                    raise WrongPhase(f"{ref.key} is {st.status} in {msg.luw_id}")
                elif self.node.ledger.decision(msg.luw_id):
                    raise WrongPhase(f"{msg.luw_id} is already {self.node.ledger.decision(msg.luw_id)}")
                else:
                    try:
                        result = self._stage(st, p["work"], p.get("credential"))
                    except DtwinError:
                        self.node.log.append("part.failed", {"luw": st.luw_id, "participant": st.ref.key})
                        st.failed = True
                        raise
                    self.node.net.set_timer(
                        self.node.container_id, self.settings.idle_timeout, "idle",
                        {"luw": st.luw_id, "participant": st.ref.key},
                    )
                reply.update(ok=True, result=result)
            except DtwinError as exc:
                reply.update(ok=False, error=f"{type(exc).__name__}: {exc}")
            self._reply(msg.sender, ACK, msg.luw_id, reply)
            return

        st = self.states.get((msg.luw_id, p.get("participant")))
        if msg.msg_type == PREPARE:
            self._on_prepare(msg, st)
        elif msg.msg_type in (COMMIT, ABORT):
            outcome = COMMITTED if msg.msg_type == COMMIT else ABORTED
            if st is None:
                if outcome == COMMITTED:
                    raise UnknownLuw(f"COMMIT for unknown participant {p.get('participant')} of {msg.luw_id}")
            elif st.status in (ENLISTED, PREPARED):
                self._conclude(st, outcome)
            elif st.status != outcome:
                raise LuwStateError(f"{st.ref.key} is {st.status} but {msg.luw_id} says {outcome}")
            self._reply(msg.sender, ACK, msg.luw_id, {"re": msg.msg_type, "participant": p.get("participant")})
        elif msg.msg_type == STATUS_REPLY and st is not None and st.status == PREPARED:
            if p.get("decision"):
                self._resolve_in_doubt(st, p["decision"])
            elif p.get("phase") in (ACTIVE, PREPARING):
                self._arm_in_doubt(st, attempt=0)
            else:
                self._presume_abort(st)

    def _on_prepare(self, msg, st: ParticipantState | None) -> None:
        key = msg.payload.get("participant")
        if st is None or st.status in (ABORTED,):
            self._reply(msg.sender, VOTE_NO, msg.luw_id, {"participant": key})
            return
        if st.status in (PREPARED, COMMITTED):
            self._reply(st, VOTE_YES, msg.luw_id, {"participant": key})
            return
        if not st.failed and self._revalidate(st):
            if SKIP_PREPARED_ANCHOR not in self.settings.mutations:
                self.node.ledger.anchor_luw_event(st.luw_id, PREPARED, self.node.container_id, st.ref.key)
            self.node.log.append("part.prepared", {"luw": st.luw_id, "participant": st.ref.key})
            st.status = PREPARED
            self._reply(st, VOTE_YES, msg.luw_id, {"participant": key})
            self._arm_in_doubt(st, attempt=0)
        else:
            self._conclude(st, ABORTED)
            self._reply(st, VOTE_NO, msg.luw_id, {"participant": key})

    # --- in-doubt handling ------------------------------------------------

    def _arm_in_doubt(self, st: ParticipantState, attempt: int) -> None:
        self.node.net.set_timer(
            self.node.container_id, self.settings.in_doubt_timeout, "in_doubt",
            {"luw": st.luw_id, "participant": st.ref.key, "attempt": attempt},
        )

    def _resolve_in_doubt(self, st: ParticipantState, decision: str) -> None:
        self._conclude(st, decision)
        self._reply(st, ACK, st.luw_id, {"re": COMMIT if decision == COMMITTED else ABORT, "participant": st.ref.key})

    def _presume_abort(self, st: ParticipantState) -> None:
        effective, _ = self.node.ledger.decide(st.luw_id, ABORTED, self.node.container_id, [])
        self.node.net.record("PRESUMED_ABORT", luw_id=st.luw_id, container=self.node.container_id, effective=effective)
        self._resolve_in_doubt(st, effective)

    def on_timer(self, name: str, data: dict) -> None:
        st = self.states.get((data["luw"], data["participant"]))
        if name == "idle":
            # staged work but no PREPARE for a long time: a participant that has
            # not voted may always abort on its own
            if st is not None and st.status == ENLISTED:
                self._conclude(st, ABORTED)
            return
        if name != "in_doubt":
            return
        if st is None or st.status != PREPARED:
            return
        decision = self.node.ledger.decision(st.luw_id)
        if decision:
            self._resolve_in_doubt(st, decision)
        elif data["attempt"] == 0:
            self._reply(st, STATUS_QUERY, st.luw_id, {"participant": st.ref.key})
            self._arm_in_doubt(st, attempt=1)
        else:
            self._presume_abort(st)

    # --- recovery ---------------------------------------------------------

    def replay(self, records) -> None:
        for r in records:
            op, p = r["op"], r["payload"]
            if op == "part.enlist":
                ref = ParticipantRef.from_record(p["participant"])
                self.states[(p["luw"], ref.key)] = ParticipantState(p["luw"], ref, p["coordinator"])
            elif op == "part.failed":
                self.states[(p["luw"], p["participant"])].failed = True
            elif op == "part.prepared":
                self.states[(p["luw"], p["participant"])].status = PREPARED
            elif op == "part.outcome":
                self.states[(p["luw"], p["participant"])].status = p["outcome"]

    def recover(self) -> list[str]:
        resolved = []
        for (luw_id, _), st in sorted(self.states.items()):
            if st.status == ENLISTED:
                # never voted: unilateral abort is always safe
                self._conclude(st, ABORTED)
                resolved.append(luw_id)
            elif st.status == PREPARED:
                if PRESUME_COMMIT in self.settings.mutations:
                    self._conclude(st, COMMITTED, anchor=False)
                    resolved.append(luw_id)
                    continue
                decision = self.node.ledger.decision(luw_id)
                if decision:
                    self._resolve_in_doubt(st, decision)
                    resolved.append(luw_id)
                else:
                    self._arm_in_doubt(st, attempt=0)
        return resolved

    def outcome(self, luw_id: str, key: str) -> str | None:
        st = self.states.get((luw_id, key))
        return st.status if st else None


def is_applied(repository, luw_id: str, twin_id: TwinId) -> bool:
    return repository.resolved.get((luw_id, str(twin_id))) == APPLIED
