"""Append-only, hash-linked witness ledger.

Twin states are anchored as ``sha256(salt || raw state digest)`` so the ledger
never carries a raw state hash; the salt stays off-ledger in an AnchorReceipt.
LUW phase events are recorded per participant, and each LUW has at most one
decision entry (first writer wins), which makes the ledger the outcome oracle
for in-doubt participants.

Export format: one JSON object per line, one line per sealed block, keys in
the order ``index, prev_hash, timestamp, [algorithm_id, simulation_seed,]
entries, block_hash``, compact separators, ASCII only. Verification requires
every line to be byte-identical to the re-encoding of its parsed value.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .errors import IllegalPhaseOrder, LedgerClosed, LedgerFormatError, OutOfRange

ZERO_HASH = "0" * 64
ALGORITHM_ID = "sha256"
STATE_ANCHOR, LUW_EVENT = "STATE_ANCHOR", "LUW_EVENT"
PREPARED, COMMITTED, ABORTED = "PREPARED", "COMMITTED", "ABORTED"
PARTICIPANT, DECISION = "participant", "decision"
DEFAULT_SEAL_EVERY = 8


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def anchor_digest(salt: bytes, state_hash: str) -> str:
    return hashlib.sha256(salt + bytes.fromhex(state_hash)).hexdigest()


@dataclass(frozen=True)
class LedgerEntry:
    kind: str
    container_id: str
    anchor_hash: str | None = None
    luw_id: str | None = None
    phase: str | None = None
    role: str | None = None
    participant: str | None = None
    participants: tuple[str, ...] | None = None

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "container_id": self.container_id}
        for name in ("anchor_hash", "luw_id", "phase", "role", "participant"):
            value = getattr(self, name)
            if value is not None:
                rec[name] = value
        if self.participants is not None:
            rec["participants"] = list(self.participants)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "LedgerEntry":
        allowed = {"kind", "container_id", "anchor_hash", "luw_id", "phase", "role", "participant", "participants"}
        if not isinstance(rec, dict) or set(rec) - allowed or not {"kind", "container_id"} <= set(rec):
            raise LedgerFormatError(f"malformed entry {rec!r}")
        parts = rec.get("participants")
        return cls(
            rec["kind"], rec["container_id"], rec.get("anchor_hash"), rec.get("luw_id"), rec.get("phase"),
            rec.get("role"), rec.get("participant"), tuple(parts) if parts is not None else None,
        )


@dataclass(frozen=True)
class LedgerBlock:
    index: int
    prev_hash: str
    timestamp: int
    entries: tuple[LedgerEntry, ...]
    block_hash: str
    meta: dict | None = None  # genesis only: algorithm_id, simulation_seed

    @staticmethod
    def compute_hash(index, prev_hash, timestamp, entries, meta=None) -> str:
        payload = f"{index}|{prev_hash}|{timestamp}|{_canon([e.to_record() for e in entries])}"
        if meta is not None:
            payload += f"|{_canon(meta)}"
        return hashlib.sha256(payload.encode("ascii")).hexdigest()

    def recompute(self) -> str:
        return self.compute_hash(self.index, self.prev_hash, self.timestamp, self.entries, self.meta)

    def to_record(self) -> dict:
        rec = {"index": self.index, "prev_hash": self.prev_hash, "timestamp": self.timestamp}
        if self.meta is not None:
            rec["algorithm_id"] = self.meta["algorithm_id"]
            rec["simulation_seed"] = self.meta["simulation_seed"]
        rec["entries"] = [e.to_record() for e in self.entries]
        rec["block_hash"] = self.block_hash
        return rec

    def to_line(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"), ensure_ascii=True)


@dataclass(frozen=True)
class AnchorReceipt:
    twin_id: str
    version: int
    state_hash: str
    salt: str  # hex of 16 bytes
    block_index: int
    entry_index: int

    def to_record(self) -> dict:
        return {
            "twin_id": self.twin_id, "version": self.version, "state_hash": self.state_hash,
            "salt": self.salt, "block_index": self.block_index, "entry_index": self.entry_index,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AnchorReceipt":
        return cls(rec["twin_id"], rec["version"], rec["state_hash"], rec["salt"], rec["block_index"], rec["entry_index"])


class WitnessLedger:
    """Single-writer ledger shared by every container of a simulation."""

    def __init__(
        self,
        seed: int = 0,
        clock: Callable[[], int] = lambda: 0,
        seal_every: int = DEFAULT_SEAL_EVERY,
    ):
        self.seed = seed
        self.clock = clock
        self.seal_every = seal_every
        self.closed = False
        self._rng = random.Random(seed)
        meta = {"algorithm_id": ALGORITHM_ID, "simulation_seed": seed}
        ts = clock()
        genesis = LedgerBlock(0, ZERO_HASH, ts, (), LedgerBlock.compute_hash(0, ZERO_HASH, ts, (), meta), meta)
        self.blocks: list[LedgerBlock] = [genesis]
        self.pending: list[LedgerEntry] = []
        # (luw_id, participant) -> {phase: coords}
        self._participant_phases: dict[tuple[str, str], dict[str, tuple[int, int]]] = {}
        self._decisions: dict[str, tuple[str, tuple[int, int]]] = {}

    # --- appends ----------------------------------------------------------

    def _append(self, entry: LedgerEntry) -> tuple[int, int]:
        if self.closed:
            raise LedgerClosed("ledger is closed")
        coords = (len(self.blocks), len(self.pending))
        self.pending.append(entry)
        if len(self.pending) >= self.seal_every:
            self.seal()
        return coords

    def seal(self) -> LedgerBlock | None:
        """Seal pending entries into a block; no-op when nothing is pending."""
        if not self.pending:
            return None
        prev = self.blocks[-1]
        index, ts, entries = len(self.blocks), self.clock(), tuple(self.pending)
        block = LedgerBlock(index, prev.block_hash, ts, entries, LedgerBlock.compute_hash(index, prev.block_hash, ts, entries))
        self.blocks.append(block)
        self.pending = []
        return block

    def close(self) -> None:
        self.seal()
        self.closed = True

    def anchor_state(self, state_hash: str, container_id: str, twin_id: str = "", version: int = 0) -> AnchorReceipt:
        if self.closed:
            raise LedgerClosed("ledger is closed")
        salt = self._rng.randbytes(16)
        entry = LedgerEntry(STATE_ANCHOR, container_id, anchor_hash=anchor_digest(salt, state_hash))
        block_index, entry_index = self._append(entry)
        return AnchorReceipt(twin_id, version, state_hash, salt.hex(), block_index, entry_index)

    def anchor_luw_event(self, luw_id: str, phase: str, container_id: str, participant: str | None = None) -> tuple[int, int]:
        """Record a participant's phase; replays return the original coordinates."""
        participant = participant or container_id
        phases = self._participant_phases.setdefault((luw_id, participant), {})
        if phase in phases:
            return phases[phase]
        decision = self.decision(luw_id)
        if phase == PREPARED:
            if COMMITTED in phases or ABORTED in phases:
                raise IllegalPhaseOrder(f"{participant} already resolved {luw_id}")
        elif phase == COMMITTED:
            if PREPARED not in phases:
                raise IllegalPhaseOrder(f"{participant} commits {luw_id} without PREPARED")
            if ABORTED in phases or decision != COMMITTED:
                raise IllegalPhaseOrder(f"{participant} commits {luw_id} but the decision is {decision}")
        elif phase == ABORTED:
            if COMMITTED in phases:
                raise IllegalPhaseOrder(f"{participant} aborts committed {luw_id}")
            if PREPARED in phases and decision != ABORTED:
                raise IllegalPhaseOrder(f"prepared {participant} aborts {luw_id} without an ABORTED decision")
        else:
            raise ValueError(f"unknown phase {phase!r}")
        coords = self._append(LedgerEntry(LUW_EVENT, container_id, luw_id=luw_id, phase=phase, role=PARTICIPANT, participant=participant))
        phases[phase] = coords
        return coords

    def decide(self, luw_id: str, outcome: str, container_id: str, participants: Sequence[str] = ()) -> tuple[str, tuple[int, int]]:
        """Compare-and-set the LUW outcome. Returns the effective (first) decision."""
        if luw_id in self._decisions:
            return self._decisions[luw_id]
        if outcome not in (COMMITTED, ABORTED):
            raise ValueError(f"bad outcome {outcome!r}")
        if outcome == COMMITTED:
            unprepared = [p for p in participants if PREPARED not in self._participant_phases.get((luw_id, p), {})]
            if unprepared:
                raise IllegalPhaseOrder(f"cannot commit {luw_id}: {unprepared} not PREPARED")
        coords = self._append(
            LedgerEntry(LUW_EVENT, container_id, luw_id=luw_id, phase=outcome, role=DECISION, participants=tuple(participants))
        )
        self._decisions[luw_id] = (outcome, coords)
        return self._decisions[luw_id]

    # --- queries ----------------------------------------------------------

    def decision(self, luw_id: str) -> str | None:
        found = self._decisions.get(luw_id)
        return found[0] if found else None

    def participant_phases(self, luw_id: str, participant: str) -> set[str]:
        return set(self._participant_phases.get((luw_id, participant), {}))

    def entries(self):
        """All (block_index, entry_index, entry) including the unsealed tail."""
        for b in self.blocks:
            for i, e in enumerate(b.entries):
                yield b.index, i, e
        for i, e in enumerate(self.pending):
            yield len(self.blocks), i, e

    def entry_at(self, block_index: int, entry_index: int) -> LedgerEntry:
        return entry_at(self.blocks, block_index, entry_index, self.pending)

    def export_lines(self) -> list[str]:
        return [b.to_line() for b in self.blocks]

    def export(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.export_lines()), encoding="ascii")


# --- stand-alone verification (works on exported ledgers) ------------------


def entry_at(blocks: Sequence[LedgerBlock], block_index: int, entry_index: int, pending=()) -> LedgerEntry:
    if block_index == len(blocks) and 0 <= entry_index < len(pending):
        return pending[entry_index]
    if not 0 <= block_index < len(blocks) or not 0 <= entry_index < len(blocks[block_index].entries):
        raise OutOfRange(f"no ledger entry at ({block_index}, {entry_index})")
    return blocks[block_index].entries[entry_index]


def parse_block_line(line: str) -> LedgerBlock:
    try:
        rec = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LedgerFormatError(f"not JSON: {exc}") from None
    if not isinstance(rec, dict):
        raise LedgerFormatError("block is not an object")
    genesis = "algorithm_id" in rec or "simulation_seed" in rec
    keys = ["index", "prev_hash", "timestamp"] + (["algorithm_id", "simulation_seed"] if genesis else []) + ["entries", "block_hash"]
    if list(rec) != keys:
        raise LedgerFormatError(f"unexpected keys {list(rec)}")
    if not isinstance(rec["entries"], list):
        raise LedgerFormatError("entries is not a list")
    meta = {"algorithm_id": rec["algorithm_id"], "simulation_seed": rec["simulation_seed"]} if genesis else None
    try:
        block = LedgerBlock(
            rec["index"], rec["prev_hash"], rec["timestamp"],
            tuple(LedgerEntry.from_record(e) for e in rec["entries"]), rec["block_hash"], meta,
        )
        canonical = block.to_line()
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise LedgerFormatError(f"malformed entry: {type(exc).__name__}: {exc}") from None
    if canonical != line:
        raise LedgerFormatError("line is not in canonical form")
    return block


def parse_ledger(data: bytes) -> list[LedgerBlock]:
    """Parse an export; raises LedgerFormatError naming the offending line."""
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        line_no = data[: exc.start].count(b"\n")
        raise LedgerFormatError(f"block {line_no}: non-ASCII byte") from None
    if not text.endswith("\n"):
        raise LedgerFormatError("ledger export must end with a newline")
    blocks = []
    for i, line in enumerate(text[:-1].split("\n")):
        try:
            blocks.append(parse_block_line(line))
        except LedgerFormatError as exc:
            raise LedgerFormatError(f"block {i}: {exc}") from None
    return blocks


def load_ledger(path) -> list[LedgerBlock]:
    return parse_ledger(Path(path).read_bytes())


@dataclass
class ChainReport:
    ok: bool
    bad_block: int | None = None
    reason: str = ""


def verify_chain(blocks: Sequence[LedgerBlock]) -> ChainReport:
    if not blocks:
        return ChainReport(False, 0, "empty ledger")
    for pos, block in enumerate(blocks):
        if block.index != pos:
            return ChainReport(False, pos, f"index {block.index} at position {pos}")
        if pos == 0:
            if block.prev_hash != ZERO_HASH:
                return ChainReport(False, 0, "genesis prev_hash is not all-zero")
            if block.meta is None or block.meta.get("algorithm_id") != ALGORITHM_ID:
                return ChainReport(False, 0, "genesis does not record the digest algorithm")
        else:
            if block.meta is not None:
                return ChainReport(False, pos, "non-genesis block carries genesis fields")
            if block.prev_hash != blocks[pos - 1].block_hash:
                return ChainReport(False, pos, "prev_hash does not link to predecessor")
        try:
            recomputed = block.recompute()
        except (TypeError, ValueError, UnicodeEncodeError) as exc:
            return ChainReport(False, pos, f"cannot hash block: {exc}")
        if recomputed != block.block_hash:
            return ChainReport(False, pos, "block_hash mismatch")
    return ChainReport(True)


def verify_anchor(receipt: AnchorReceipt, state_hash: str, ledger) -> bool:
    """True iff sha256(receipt.salt || state_hash) is the anchored entry's hash.

    ``ledger`` is a WitnessLedger or a list of parsed blocks.
    """
    if isinstance(ledger, WitnessLedger):
        entry = ledger.entry_at(receipt.block_index, receipt.entry_index)
    else:
        entry = entry_at(ledger, receipt.block_index, receipt.entry_index)
    if entry.kind != STATE_ANCHOR:
        return False
    try:
        return anchor_digest(bytes.fromhex(receipt.salt), state_hash) == entry.anchor_hash
    except ValueError:
        return False
