"""Deterministic discrete-event network connecting DT-Containers.

Time is an integer tick. Every message gets a global sequence number at
send time; that number is the "protocol step" fault plans refer to. Events
are ordered by (tick, insertion order), so equal inputs give byte-identical
event logs.
"""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field
from typing import Callable

from .durable import DurableLog
from .errors import DtwinError, UnknownContainer, Unreachable
from .ledger import WitnessLedger

log = logging.getLogger(__name__)

DROP, DELAY, CRASH = "drop", "delay", "crash"
DEFAULT_RESTART_AFTER = 30


@dataclass(frozen=True)
class Message:
    seq: int
    tick: int
    msg_type: str
    sender: str
    receiver: str
    luw_id: str | None
    payload: dict

    def to_record(self, tick: int, event: str) -> dict:
        rec = {"tick": tick, "event": event, "msg_type": self.msg_type}
        if self.luw_id is not None:
            rec["luw_id"] = self.luw_id
        rec.update({"from": self.sender, "to": self.receiver, "seq": self.seq, "sent": self.tick, "payload": self.payload})
        return rec


@dataclass(frozen=True)
class FaultDirective:
    """Either ``step`` (message sequence number) or ``match`` selects messages.

    ``match`` keys: msg_type, from, to, luw_id. ``crash`` crashes ``container``
    (default: the receiver) right after it handles the message.
    """

    action: str
    step: int | None = None
    match: dict | None = None
    ticks: int = 0
    container: str | None = None
    restart_after: int | None = DEFAULT_RESTART_AFTER

    def selects(self, msg: Message) -> bool:
        if self.step is not None and msg.seq != self.step:
            return False
        if self.match:
            fields = {"msg_type": msg.msg_type, "from": msg.sender, "to": msg.receiver, "luw_id": msg.luw_id}
            if any(fields.get(k) != v for k, v in self.match.items()):
                return False
        return self.step is not None or bool(self.match)

    def to_record(self) -> dict:
        rec = {"action": self.action}
        if self.step is not None:
            rec["step"] = self.step
        if self.match:
            rec["match"] = dict(self.match)
        if self.action == DELAY:
            rec["ticks"] = self.ticks
        if self.action == CRASH:
            rec["container"] = self.container
            rec["restart_after"] = self.restart_after
        return rec


@dataclass
class FaultPlan:
    directives: list[FaultDirective] = field(default_factory=list)

    @classmethod
    def from_records(cls, records) -> "FaultPlan":
        out = []
        for r in records:
            action = r["action"]
            if action not in (DROP, DELAY, CRASH):
                raise ValueError(f"unknown fault action {action!r}")
            out.append(
                FaultDirective(
                    action, r.get("step"), r.get("match"), r.get("ticks", 0), r.get("container"),
                    r.get("restart_after", DEFAULT_RESTART_AFTER),
                )
            )
        return cls(out)

    def for_message(self, msg: Message) -> list[FaultDirective]:
        return [d for d in self.directives if d.selects(msg)]


class Network:
    """Event loop, clock, container registry and fault injection.

    ``factory(container_id, network)`` builds a container object from its
    durable log; it is called at registration and on every restart.
    """

    def __init__(self, seed: int = 0, fault_plan: FaultPlan | None = None, latency: int = 1, max_tick: int = 20_000):
        self.seed = seed
        self.plan = fault_plan or FaultPlan()
        self.latency = latency
        self.max_tick = max_tick
        self.tick = 0
        self.ledger = WitnessLedger(seed, clock=lambda: self.tick)
        self.disks: dict[str, DurableLog] = {}
        self.factories: dict[str, Callable] = {}
        self.live: dict[str, object] = {}
        self.epochs: dict[str, int] = {}
        self.events: list[dict] = []
        self.errors: list[dict] = []
        self._queue: list = []
        self._order = 0
        self._seq = 0
        self._last_due: dict[tuple[str, str], int] = {}

    # --- registry ---------------------------------------------------------

    def register(self, container_id: str, factory: Callable) -> object:
        if container_id in self.factories:
            raise ValueError(f"container {container_id} registered twice")
        self.disks[container_id] = DurableLog()
        self.factories[container_id] = factory
        self.epochs[container_id] = 0
        self.live[container_id] = factory(container_id, self)
        return self.live[container_id]

    def container(self, container_id: str):
        if container_id not in self.factories:
            raise UnknownContainer(container_id)
        found = self.live.get(container_id)
        if found is None:
            raise Unreachable(f"container {container_id} is down")
        return found

    def is_up(self, container_id: str) -> bool:
        return self.live.get(container_id) is not None

    @property
    def messages_sent(self) -> int:
        return self._seq

    # --- events -----------------------------------------------------------

    def record(self, event: str, **fields) -> None:
        rec = {"tick": self.tick, "event": event}
        rec.update(fields)
        self.events.append(rec)

    def _push(self, tick: int, kind: str, data) -> None:
        self._order += 1
        heapq.heappush(self._queue, (tick, self._order, kind, data))

    def send(self, msg_type: str, sender: str, receiver: str, luw_id: str | None, payload: dict) -> int:
        if receiver not in self.factories:
            raise UnknownContainer(receiver)
        self._seq += 1
        msg = Message(self._seq, self.tick, msg_type, sender, receiver, luw_id, payload)
        delay = self.latency
        for d in self.plan.for_message(msg):
            if d.action == DELAY:
                delay += d.ticks
        due = max(self.tick + delay, self._last_due.get((sender, receiver), 0))
        self._last_due[(sender, receiver)] = due  # FIFO per sender-receiver pair
        self._push(due, "deliver", msg)
        return msg.seq

    def set_timer(self, container_id: str, delay: int, name: str, data: dict | None = None) -> None:
        self._push(self.tick + delay, "timer", (container_id, self.epochs[container_id], name, data or {}))

    def schedule(self, delay: int, fn: Callable[[], None]) -> None:
        """Run ``fn`` at a later tick (used for application scripts)."""
        self._push(self.tick + delay, "call", fn)

    def crash(self, container_id: str, restart_after: int | None = DEFAULT_RESTART_AFTER) -> None:
        if self.live.get(container_id) is None:
            return
        self.live[container_id] = None
        self.epochs[container_id] += 1
        self.record("CRASH", container=container_id)
        if restart_after is not None:
            self._push(self.tick + restart_after, "restart", container_id)

    def restart(self, container_id: str) -> list[str]:
        if self.live.get(container_id) is not None:
            return []
        node = self.factories[container_id](container_id, self)
        self.live[container_id] = node
        resolved = node.recover()
        self.record("RESTART", container=container_id, resolved=resolved)
        return resolved

    def _guard(self, where: str, fn, *args) -> None:
        try:
            fn(*args)
        except DtwinError as exc:
            err = {"tick": self.tick, "where": where, "error": f"{type(exc).__name__}: {exc}"}
            self.errors.append(err)
            self.record("HANDLER_ERROR", **err)

    def _deliver(self, msg: Message) -> None:
        directives = self.plan.for_message(msg)
        if any(d.action == DROP for d in directives):
            self.events.append(msg.to_record(self.tick, "drop"))
            return
        node = self.live.get(msg.receiver)
        if node is None:
            self.events.append(msg.to_record(self.tick, "lost"))
            return
        self.events.append(msg.to_record(self.tick, "deliver"))
        self._guard(f"{msg.receiver}:{msg.msg_type}#{msg.seq}", node.handle, msg)
        for d in directives:
            if d.action == CRASH:
                self.crash(d.container or msg.receiver, d.restart_after)

    def step(self) -> bool:
        if not self._queue:
            return False
        tick, _, kind, data = heapq.heappop(self._queue)
        self.tick = max(self.tick, tick)
        if kind == "deliver":
            self._deliver(data)
        elif kind == "timer":
            container_id, epoch, name, payload = data
            node = self.live.get(container_id)
            if node is not None and epoch == self.epochs[container_id]:
                self._guard(f"{container_id}:timer:{name}", node.on_timer, name, payload)
        elif kind == "restart":
            self.restart(data)
        elif kind == "call":
            self._guard("call", data)
        return True

    def run(self, until: int | None = None) -> bool:
        """Process events until quiescent. False if ``max_tick`` was hit first.

        With ``until``, stop before the first event scheduled past that tick
        (idle and deadline timers stay pending).
        """
        while self._queue:
            if self._queue[0][0] > self.max_tick:
                return False
            if until is not None and self._queue[0][0] > until:
                return True
            self.step()
        return True

    def event_lines(self) -> list[str]:
        return [json.dumps(e, separators=(",", ":"), ensure_ascii=True) for e in self.events]
