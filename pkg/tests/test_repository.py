from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ALICE, PRODUCER, RETAILER, STRANGER, WINE_ATTRS, WINE_ID
from dtwin.durable import DurableLog
from dtwin.errors import (
    Busy, Destructed, DuplicateId, LuwStateError, NotFound, Rejected, UnknownDefinition, UnknownLuw,
    Unauthorized, VersionConflict,
)
from dtwin.identity import ANONYMOUS
from dtwin.ledger import WitnessLedger, verify_anchor
from dtwin.repository import Repository
from dtwin.twin import canonical_serialize, state_hash
from dtwin.values import TwinId
from dtwin.verifier import TransitionRequest

ACQUIRE = TransitionRequest(WINE_ID, "acquire", {"buyer": "USR:alice"}, {"acquired_by": "USR:alice"}, RETAILER, 0)
CONSUME = TransitionRequest(WINE_ID, "consume", {"consumption_code": "XK42-99"}, {"consumed_by": "USR:alice"}, ALICE, 1)


def _repo(product_def, log=None, ledger=None):
    return Repository(
        "ERP", ledger or WitnessLedger(seed=1), log if log is not None else DurableLog(),
        {"ConsumerProduct": product_def}, {"PRD": {"producer"}},
    )


@pytest.fixture
def repo(product_def):
    r = _repo(product_def)
    r.create("ConsumerProduct", WINE_ID, WINE_ATTRS, "producer", PRODUCER)
    return r


def _rebuild(product_def, repo, lines=None):
    fresh = _repo(product_def, DurableLog(repo.log.lines if lines is None else lines), repo.ledger)
    fresh.replay(fresh.log.records())
    return fresh


# --- CRUD --------------------------------------------------------------------


def test_create_anchors_version_zero(repo):
    head = repo.head(WINE_ID)
    assert (head.version, head.state) == (0, "constructed")
    receipt = repo.records[WINE_ID].anchors[0]
    assert receipt.state_hash == state_hash(head)
    assert verify_anchor(receipt, state_hash(head), repo.ledger)


def test_create_errors(product_def, repo):
    with pytest.raises(UnknownDefinition):
        repo.create("Bottle", TwinId.parse("PRD:x1"), {}, "producer", PRODUCER)
    with pytest.raises(DuplicateId):
        repo.create("ConsumerProduct", WINE_ID, WINE_ATTRS, "producer", PRODUCER)
    with pytest.raises(Unauthorized):
        repo.create("ConsumerProduct", TwinId.parse("PRD:x2"), WINE_ATTRS, "mallory", STRANGER)


def test_read_filters_and_reports_missing(repo):
    assert "consumption_code" not in repo.read(WINE_ID, ANONYMOUS).attributes
    assert "acquired_by" not in repo.read(WINE_ID, ANONYMOUS).attributes
    with pytest.raises(NotFound):
        repo.read(TwinId.parse("PRD:nothing"), ANONYMOUS)


def test_update_chain_to_consumed(repo):
    repo.update(ACQUIRE)
    view = repo.update(CONSUME)
    assert (view.version, view.state) == (2, "consumed")
    assert [t.version for t in repo.history(WINE_ID)] == [0, 1, 2]
    assert sorted(repo.records[WINE_ID].anchors) == [0, 1, 2]


def test_stale_version_conflicts(repo):
    repo.update(ACQUIRE)
    before = repo.history(WINE_ID)
    with pytest.raises(VersionConflict):
        repo.update(replace(CONSUME, expected_version=0))
    assert repo.history(WINE_ID) == before


def test_rejected_update_persists_nothing(repo):
    repo.update(ACQUIRE)
    with pytest.raises(Rejected) as info:
        repo.update(replace(CONSUME, inputs={"consumption_code": "nope"}))
    assert info.value.verdict.failures[0].kind == "pre"
    assert repo.head(WINE_ID).version == 1


def test_destruct(repo):
    repo.update(ACQUIRE)
    repo.update(CONSUME)
    with pytest.raises(Unauthorized):
        repo.destruct(WINE_ID, ALICE)
    repo.destruct(WINE_ID, PRODUCER)
    assert repo.is_destructed(WINE_ID)
    assert len(repo.history(WINE_ID)) == 3
    with pytest.raises(Destructed):
        repo.update(replace(CONSUME, expected_version=2))


# --- staging -----------------------------------------------------------------


def test_stage_locks_without_touching_history(repo):
    summary = repo.stage_transition(ACQUIRE, "L1")
    assert (summary.state, summary.version) == ("acquired", 1)
    assert repo.lock_holder(WINE_ID) == "L1"
    assert repo.head(WINE_ID).version == 0
    assert repo.read(WINE_ID, PRODUCER).state == "constructed"


def test_other_luw_and_plain_updates_are_busy(repo):
    repo.stage_transition(ACQUIRE, "L1")
    with pytest.raises(Busy):
        repo.stage_transition(ACQUIRE, "L2")
    with pytest.raises(Busy):
        repo.update(ACQUIRE)
    with pytest.raises(Busy):
        repo.destruct(WINE_ID, PRODUCER)


def test_failing_stage_takes_no_lock(repo):
    with pytest.raises(Rejected):
        repo.stage_transition(replace(ACQUIRE, principal=STRANGER), "L1")
    assert repo.lock_holder(WINE_ID) is None


def test_multi_step_staging_chains_candidates(repo):
    repo.stage_transition(ACQUIRE, "L1")
    repo.stage_transition(CONSUME, "L1")
    assert repo.revalidate("L1")
    repo.apply_staged("L1")
    assert [t.state for t in repo.history(WINE_ID)] == ["constructed", "acquired", "consumed"]


def test_apply_is_idempotent_and_anchored(repo):
    repo.stage_transition(ACQUIRE, "L1")
    repo.apply_staged("L1")
    head = repo.head(WINE_ID)
    assert head.version == 1 and repo.lock_holder(WINE_ID) is None
    assert verify_anchor(repo.records[WINE_ID].anchors[1], state_hash(head), repo.ledger)
    lines = len(repo.log)
    assert "already" in repo.apply_staged("L1")
    assert len(repo.log) == lines and repo.head(WINE_ID) == head
    with pytest.raises(LuwStateError):
        repo.discard_staged("L1")


def test_discard_restores_snapshot(repo):
    before = canonical_serialize(repo.head(WINE_ID))
    repo.stage_transition(ACQUIRE, "L1")
    repo.discard_staged("L1")
    assert canonical_serialize(repo.head(WINE_ID)) == before
    assert repo.lock_holder(WINE_ID) is None


def test_unknown_luw(repo):
    with pytest.raises(UnknownLuw):
        repo.apply_staged("L9")


# --- durability ----------------------------------------------------------------


def test_replay_reproduces_state(product_def, repo):
    repo.update(ACQUIRE)
    repo.stage_transition(CONSUME, "L1")
    fresh = _rebuild(product_def, repo)
    assert fresh.history(WINE_ID) == repo.history(WINE_ID)
    assert fresh.lock_holder(WINE_ID) == "L1"
    assert fresh.revalidate("L1")


@pytest.mark.parametrize("outcome", ["apply", "discard"])
def test_crash_at_any_log_prefix_is_never_torn(product_def, repo, outcome):
    pre = repo.head(WINE_ID)
    start = len(repo.log)
    repo.stage_transition(ACQUIRE, "L1")
    repo.stage_transition(CONSUME, "L1")
    getattr(repo, f"{outcome}_staged")("L1")
    post = repo.head(WINE_ID)
    for cut in range(start, len(repo.log) + 1):
        head = _rebuild(product_def, repo, repo.log.lines[:cut]).head(WINE_ID)
        assert head in (pre, post), cut


_ops = st.lists(st.sampled_from(["update", "stage", "apply", "discard", "read"]), max_size=12)


@settings(max_examples=60, deadline=None)
@given(_ops)
def test_history_and_anchors_hold_under_random_ops(product_def, ops):
    repo = _repo(product_def)
    repo.create("ConsumerProduct", WINE_ID, WINE_ATTRS, "producer", PRODUCER)
    frozen = {0: canonical_serialize(repo.head(WINE_ID))}
    for n, op in enumerate(ops):
        head = repo.head(WINE_ID)
        req = ACQUIRE if head.state == "constructed" else CONSUME
        req = replace(req, expected_version=head.version)
        try:
            if op == "update":
                repo.update(req)
            elif op == "stage":
                repo.stage_transition(req, f"L{n}")
            elif op in ("apply", "discard") and repo.lock_holder(WINE_ID):
                getattr(repo, f"{op}_staged")(repo.lock_holder(WINE_ID))
            else:
                assert repo.read(WINE_ID, PRODUCER).version == head.version
        except (Busy, Rejected):
            pass
        for twin in repo.history(WINE_ID):
            frozen.setdefault(twin.version, canonical_serialize(twin))
    history = repo.history(WINE_ID)
    assert [t.version for t in history] == list(range(len(history)))
    for twin in history:
        assert canonical_serialize(twin) == frozen[twin.version]
        assert verify_anchor(repo.records[WINE_ID].anchors[twin.version], state_hash(twin), repo.ledger)
