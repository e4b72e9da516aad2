"""Append-only durable record log shared by a container's components.

Each record is one line ``{"seq":..,"op":..,"payload":..,"checksum":..}``;
the checksum is the first 16 hex digits of sha256 over the canonical
``[seq, op, payload]`` encoding. The in-memory line list is the "disk": it
survives a simulated crash while every other object of the container is
thrown away.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import LogCorrupted


def _checksum(seq: int, op: str, payload) -> str:
    body = json.dumps([seq, op, payload], sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(body.encode("ascii")).hexdigest()[:16]


class DurableLog:
    def __init__(self, lines: list[str] | None = None, path=None):
        self.lines: list[str] = list(lines or [])
        self.path = Path(path) if path else None

    def __len__(self) -> int:
        return len(self.lines)

    def append(self, op: str, payload) -> dict:
        seq = len(self.lines) + 1
        record = {"seq": seq, "op": op, "payload": payload, "checksum": _checksum(seq, op, payload)}
        line = json.dumps(record, separators=(",", ":"), ensure_ascii=True)
        self.lines.append(line)
        if self.path is not None:
            with self.path.open("a", encoding="ascii") as fh:
                fh.write(line + "\n")
        return record

    def records(self):
        for expected_seq, line in enumerate(self.lines, start=1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogCorrupted(f"record {expected_seq}: {exc}") from None
            if rec.get("seq") != expected_seq or rec.get("checksum") != _checksum(rec["seq"], rec["op"], rec["payload"]):
                raise LogCorrupted(f"record {expected_seq}: bad sequence number or checksum")
            yield rec

    def export(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines), encoding="ascii")

    @classmethod
    def load(cls, path) -> "DurableLog":
        text = Path(path).read_text(encoding="ascii")
        return cls([line for line in text.split("\n") if line])
