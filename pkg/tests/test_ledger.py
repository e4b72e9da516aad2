from __future__ import annotations

import hashlib
import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GOLDEN, WINE
from dtwin.errors import IllegalPhaseOrder, LedgerClosed, LedgerFormatError, OutOfRange
from dtwin.ledger import (
    ABORTED, COMMITTED, PREPARED, STATE_ANCHOR, ZERO_HASH, AnchorReceipt, LedgerBlock, WitnessLedger,
    anchor_digest, parse_ledger, verify_anchor, verify_chain,
)
from dtwin.scenario import Simulation, load_scenario
from dtwin.twin import state_hash

H1 = hashlib.sha256(b"one").hexdigest()
H2 = hashlib.sha256(b"two").hexdigest()


def _ledger_with_blocks(n_blocks: int, seal_every: int = 2) -> WitnessLedger:
    ledger = WitnessLedger(seed=3, seal_every=seal_every)
    i = 0
    while len(ledger.blocks) < n_blocks:
        ledger.anchor_state(hashlib.sha256(str(i).encode()).hexdigest(), "ERP", f"PRD:t{i}", 0)
        i += 1
    return ledger


# --- anchors -----------------------------------------------------------------


def test_fixture_anchor_golden():
    salt = bytes.fromhex((GOLDEN / "fixture_anchor.salt").read_text().strip())
    raw = (GOLDEN / "fixture_twin.sha256").read_text().strip()
    golden = (GOLDEN / "fixture_anchor.sha256").read_text().strip()
    assert len(salt) == 16
    assert anchor_digest(salt, raw) == golden


def test_anchor_returns_coordinates():
    ledger = WitnessLedger(seed=1)
    receipt = ledger.anchor_state(H1, "ERP", "PRD:dat_ref_12345678", 0)
    assert (receipt.block_index, receipt.entry_index) == (1, 0)
    assert len(bytes.fromhex(receipt.salt)) == 16
    assert ledger.entry_at(1, 0).kind == STATE_ANCHOR


def test_same_hash_twice_gets_distinct_salts():
    ledger = WitnessLedger(seed=1)
    a, b = ledger.anchor_state(H1, "ERP"), ledger.anchor_state(H1, "ERP")
    assert a.salt != b.salt
    assert ledger.entry_at(1, 0).anchor_hash != ledger.entry_at(1, 1).anchor_hash


def test_verify_anchor_cases():
    ledger = WitnessLedger(seed=1)
    receipt = ledger.anchor_state(H1, "ERP")
    assert verify_anchor(receipt, H1, ledger)
    assert not verify_anchor(receipt, H2, ledger)
    assert not verify_anchor(replace(receipt, salt="00" * 16), H1, ledger)
    with pytest.raises(OutOfRange):
        verify_anchor(replace(receipt, block_index=9), H1, ledger)


def test_closed_ledger_refuses_anchors():
    ledger = WitnessLedger()
    ledger.close()
    with pytest.raises(LedgerClosed):
        ledger.anchor_state(H1, "ERP")


def test_sealing_every_eight_entries():
    ledger = WitnessLedger()
    for _ in range(17):
        ledger.anchor_state(H1, "ERP")
    assert [len(b.entries) for b in ledger.blocks] == [0, 8, 8]
    assert len(ledger.pending) == 1


# --- LUW events --------------------------------------------------------------


def test_phase_order():
    ledger = WitnessLedger()
    first = ledger.anchor_luw_event("L1", PREPARED, "BANK")
    ledger.decide("L1", COMMITTED, "SHOP", ["BANK"])
    second = ledger.anchor_luw_event("L1", COMMITTED, "BANK")
    assert first < second
    with pytest.raises(IllegalPhaseOrder):
        ledger.anchor_luw_event("L2", COMMITTED, "BANK")


def test_duplicate_commit_is_idempotent():
    ledger = WitnessLedger()
    ledger.anchor_luw_event("L1", PREPARED, "BANK")
    ledger.decide("L1", COMMITTED, "SHOP", ["BANK"])
    coords = ledger.anchor_luw_event("L1", COMMITTED, "BANK")
    assert ledger.anchor_luw_event("L1", COMMITTED, "BANK") == coords
    commits = [e for _, _, e in ledger.entries() if e.luw_id == "L1" and e.phase == COMMITTED and e.participant]
    assert len(commits) == 1


def test_decision_is_compare_and_set():
    ledger = WitnessLedger()
    assert ledger.decide("L1", ABORTED, "BANK")[0] == ABORTED
    ledger.anchor_luw_event("L1", PREPARED, "ERP")
    assert ledger.decide("L1", COMMITTED, "SHOP", ["ERP"])[0] == ABORTED
    assert ledger.decision("L1") == ABORTED
    with pytest.raises(IllegalPhaseOrder):
        ledger.decide("L2", COMMITTED, "SHOP", ["ERP"])


# --- chain verification ------------------------------------------------------


def test_untouched_ten_block_ledger_verifies():
    ledger = _ledger_with_blocks(10)
    assert verify_chain(ledger.blocks).ok
    assert verify_chain(parse_ledger("".join(l + "\n" for l in ledger.export_lines()).encode())).ok


def test_flip_in_block_four_is_reported():
    ledger = _ledger_with_blocks(10)
    lines = ledger.export_lines()
    rec = json.loads(lines[4])
    h = rec["entries"][0]["anchor_hash"]
    rec["entries"][0]["anchor_hash"] = ("1" if h[0] != "1" else "2") + h[1:]
    lines[4] = json.dumps(rec, separators=(",", ":"))
    report = verify_chain(parse_ledger("".join(l + "\n" for l in lines).encode()))
    assert (report.ok, report.bad_block) == (False, 4)


def test_nonzero_genesis_prev_hash():
    ledger = _ledger_with_blocks(3)
    g = ledger.blocks[0]
    bad_prev = "f" + ZERO_HASH[1:]
    genesis = replace(g, prev_hash=bad_prev, block_hash=LedgerBlock.compute_hash(0, bad_prev, g.timestamp, (), g.meta))
    report = verify_chain([genesis] + ledger.blocks[1:])
    assert (report.ok, report.bad_block) == (False, 0)


def test_genesis_records_algorithm_and_seed():
    first = json.loads(WitnessLedger(seed=42).export_lines()[0])
    assert (first["algorithm_id"], first["simulation_seed"], first["prev_hash"]) == ("sha256", 42, ZERO_HASH)


@settings(max_examples=200)
@given(st.data())
def test_random_single_byte_mutation_is_detected(data):
    blob = bytearray("".join(l + "\n" for l in _ledger_with_blocks(4).export_lines()).encode())
    pos = data.draw(st.integers(0, len(blob) - 1))
    new = data.draw(st.integers(0, 255).filter(lambda b: b != blob[pos]))
    blob[pos] = new
    try:
        assert not verify_chain(parse_ledger(bytes(blob))).ok
    except LedgerFormatError:
        pass


# --- confidentiality and completeness on a full run --------------------------


@pytest.fixture(scope="module")
def wine_run():
    sim = Simulation(load_scenario(WINE), seed=7)
    sim.run()
    return sim


def test_no_anchor_equals_a_raw_state_hash(wine_run):
    raw = set()
    for node in wine_run.nodes().values():
        for rec in node.repository.records.values():
            raw.update(r.state_hash for r in rec.anchors.values())
    anchors = {e.anchor_hash for _, _, e in wine_run.net.ledger.entries() if e.kind == STATE_ANCHOR}
    assert raw and anchors and not raw & anchors


def test_one_effective_record_per_version_and_outcome(wine_run):
    ledger = wine_run.net.ledger
    coords = []
    for node in wine_run.nodes().values():
        for rec in node.repository.records.values():
            assert sorted(rec.anchors) == [t.version for t in rec.history]
            for twin in rec.history:
                receipt = rec.anchors[twin.version]
                assert verify_anchor(receipt, state_hash(twin), ledger)
                coords.append((receipt.block_index, receipt.entry_index))
    assert len(coords) == len(set(coords))
    decisions = [e for _, _, e in ledger.entries() if e.role == "decision"]
    assert [(e.luw_id, e.phase) for e in decisions] == [(r.luw_id, "COMMITTED") for r in wine_run.runners]


def test_exported_receipts_round_trip():
    receipt = AnchorReceipt("PRD:x", 3, H1, "ab" * 16, 2, 5)
    assert AnchorReceipt.from_record(json.loads(json.dumps(receipt.to_record()))) == receipt
