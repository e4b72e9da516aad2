from __future__ import annotations

from dataclasses import dataclass, field

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import WINE, WINE_ID
from dtwin.errors import Unauthorized, UnknownContainer, Unreachable
from dtwin.network import FaultPlan, Network
from dtwin.scenario import Simulation, check_run, fingerprint, load_scenario


@dataclass
class Echo:
    """Minimal endpoint: remembers what it received, optionally replies."""

    container_id: str
    net: Network
    inbox: list = field(default_factory=list)
    reply_to: str | None = None

    def handle(self, msg) -> None:
        self.inbox.append((self.net.tick, msg.sender, msg.payload["n"]))
        if self.reply_to:
            self.net.send("PONG", self.container_id, self.reply_to, None, msg.payload)

    def on_timer(self, name, data) -> None:
        self.inbox.append((self.net.tick, "timer", name))

    def recover(self) -> list[str]:
        return []


def _pair(plan=None, latency=1):
    net = Network(seed=0, fault_plan=plan, latency=latency)
    a = net.register("A", lambda cid, n: Echo(cid, n))
    b = net.register("B", lambda cid, n: Echo(cid, n))
    return net, a, b


def test_default_latency_is_one_tick():
    net, _, b = _pair()
    net.send("PING", "A", "B", None, {"n": 1})
    net.run()
    assert b.inbox == [(1, "A", 1)]


def test_unknown_receiver():
    net, _, _ = _pair()
    with pytest.raises(UnknownContainer):
        net.send("PING", "A", "Z", None, {"n": 1})
    with pytest.raises(UnknownContainer):
        net.container("Z")


def test_down_container_is_unreachable_and_loses_mail():
    net, _, _ = _pair()
    net.crash("B", restart_after=None)
    with pytest.raises(Unreachable):
        net.container("B")
    net.send("PING", "A", "B", None, {"n": 1})
    net.run()
    assert [e["event"] for e in net.events] == ["CRASH", "lost"]


@settings(max_examples=100)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=12))
def test_fifo_per_pair_even_with_delays(delays):
    plan = FaultPlan.from_records(
        [{"action": "delay", "step": i + 1, "ticks": d} for i, d in enumerate(delays) if d]
    )
    net, _, b = _pair(plan)
    for i in range(len(delays)):
        net.send("PING", "A", "B", None, {"n": i})
    net.run()
    assert [n for _, _, n in b.inbox] == list(range(len(delays)))


def test_drop_directive():
    net, _, b = _pair(FaultPlan.from_records([{"action": "drop", "step": 2}]))
    for i in range(3):
        net.send("PING", "A", "B", None, {"n": i})
    net.run()
    assert [n for _, _, n in b.inbox] == [0, 2]


def test_timers_die_with_their_epoch():
    net, _, _ = _pair()
    net.set_timer("B", 10, "stale")
    net.crash("B", restart_after=5)
    net.set_timer("A", 20, "fresh")
    net.run()
    assert net.container("B").inbox == []
    assert net.container("A").inbox == [(20, "timer", "fresh")]


def test_crash_directive_fires_after_the_handler():
    plan = FaultPlan.from_records([{"action": "crash", "step": 1, "container": "B", "restart_after": 30}])
    net, a, b = _pair(plan)
    b.reply_to = "A"
    net.send("PING", "A", "B", None, {"n": 1})
    net.run()
    assert b.inbox == [(1, "A", 1)]
    assert a.inbox == [(2, "B", 1)]
    kinds = [e["event"] for e in net.events]
    assert kinds.index("CRASH") < kinds.index("RESTART")
    restart = next(e for e in net.events if e["event"] == "RESTART")
    assert restart["tick"] == 31


# --- whole-system properties ----------------------------------------------------


@pytest.fixture(scope="module")
def wine_scenario():
    return load_scenario(WINE)


def test_same_seed_same_bytes(wine_scenario):
    one = Simulation(wine_scenario, seed=11).run()
    two = Simulation(wine_scenario, seed=11).run()
    assert one.net.event_lines() == two.net.event_lines()
    assert one.net.ledger.export_lines() == two.net.ledger.export_lines()
    assert fingerprint(one.nodes()) == fingerprint(two.nodes())


def test_seed_changes_salts_only(wine_scenario):
    one = Simulation(wine_scenario, seed=11).run()
    two = Simulation(wine_scenario, seed=12).run()
    assert one.net.ledger.export_lines() != two.net.ledger.export_lines()
    assert fingerprint(one.nodes()) == fingerprint(two.nodes())


def test_loyalty_crash_is_contained(wine_scenario):
    clean = Simulation(wine_scenario, seed=7).run()
    step = next(e["seq"] for e in clean.net.events if e["event"] == "deliver" and e["to"] == "LOYALTY")
    plan = FaultPlan.from_records([{"action": "crash", "step": step, "container": "LOYALTY"}])
    sim = Simulation(wine_scenario, seed=7, fault_plan=plan).run()
    assert not any(check_run(sim).values())
    # every other container kept answering while LOYALTY was down
    crash = next(e["tick"] for e in sim.net.events if e["event"] == "CRASH")
    restart = next(e["tick"] for e in sim.net.events if e["event"] == "RESTART")
    during = [e for e in sim.net.events if e["event"] == "deliver" and crash < e["tick"] < restart]
    assert {e["to"] for e in during} - {"LOYALTY"}


# --- remote invocation -------------------------------------------------------------


def test_remote_transition_gate(wine_scenario):
    from dtwin.container import invoke_remote_transition

    sim = Simulation(wine_scenario.without_luws(), seed=7)
    sim.setup()
    net = sim.net
    erp = net.container("ERP").repository
    verifications = len([e for e in erp.audit if e["op"] == "update"])
    with pytest.raises(Unauthorized):
        invoke_remote_transition(
            net, "SHOP", "ERP", "cred-alice", WINE_ID, "acquire",
            {"buyer": "USR:alice"}, {"acquired_by": "USR:alice"},
        )
    assert erp.audit[-1]["op"] == "remote" and not erp.audit[-1]["accepted"]
    assert len([e for e in erp.audit if e["op"] == "update"]) == verifications
    view = invoke_remote_transition(
        net, "SHOP", "ERP", "cred-shop", WINE_ID, "acquire", {"buyer": "USR:alice"}, {"acquired_by": "USR:alice"},
    )
    assert (view.state, view.version) == ("acquired", 1)
    assert erp.audit[-1]["caller"] == "SHOP"
    net.crash("ERP", restart_after=None)
    with pytest.raises(Unreachable):
        invoke_remote_transition(net, "SHOP", "ERP", "cred-shop", WINE_ID, "consume")


def test_credentials_resolve_per_container(wine_scenario):
    sim = Simulation(wine_scenario.without_luws(), seed=7)
    sim.setup()
    bank = sim.net.container("BANK")
    assert bank.authenticate("cred-alice").principal_id == "alice"
    for missing in (None, "", "nope"):
        assert bank.authenticate(missing).principal_id == "anonymous"
    bank.identities.revoke("cred-alice")
    assert bank.authenticate("cred-alice").principal_id == "anonymous"
