"""Scenario files, the simulation driver, global run checks and the fault sweep.

A scenario is a JSON document (``scenario.json`` inside a directory, or any
file path) with the sections ``definitions``, ``containers``, ``identities``,
``setup``, ``luws``, ``assertions`` and optional ``settings``. The format is
documented in docs/formats.md.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .container import CONTAINER_KINDS, ContainerConfig, DTContainer, ProviderConfig, invoke_remote_transition
from .errors import DtwinError, ScenarioError, SchemaSyntaxError, ValidationError
from .identity import IdentityTable
from .ledger import ABORTED, COMMITTED, DECISION, LUW_EVENT, PREPARED
from .luw import ASSET, REPO_TWIN, ParticipantRef, ProtocolSettings
from .network import CRASH, DROP, FaultDirective, FaultPlan, Network
from .providers import HELD, PROVIDER_KINDS
from .providers import COMMITTED as RES_COMMITTED
from .repository import APPLIED, DISCARDED
from .schema import load_definition
from .twin import state_hash, twin_to_record
from .values import TwinId

log = logging.getLogger(__name__)

ASSERTION_TYPES = ("luw_outcome", "twin_state", "balance")
BALANCE_FIELDS = ("total", "escrowed", "available", "incoming")
CHECKS = ("atomicity", "agreement", "validity", "conservation", "liveness", "containment", "handler_errors")
_SETTINGS_KEYS = {"latency", "max_tick"} | set(ProtocolSettings.__dataclass_fields__) - {"mutations"}


# --------------------------------------------------------------------------
# scenario model and loading
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkItem:
    ref: ParticipantRef
    credential: str | None
    body: dict


@dataclass(frozen=True)
class LuwScript:
    name: str
    coordinator: str
    work: tuple[WorkItem, ...]
    on_error: str = "abort"
    finish: str = "complete"
    start: int = 1


@dataclass
class Scenario:
    name: str
    path: Path
    containers: list[ContainerConfig]
    setup: list[dict]
    luws: list[LuwScript]
    assertions: list[dict]
    latency: int = 1
    max_tick: int = 20_000
    fault_plan: list[dict] = field(default_factory=list)

    def config(self, container_id: str) -> ContainerConfig:
        for c in self.containers:
            if c.container_id == container_id:
                return c
        raise ScenarioError(f"unknown container {container_id!r}")

    def with_settings(self, **changes) -> "Scenario":
        """Copy with protocol settings (e.g. ``mutations``) replaced on every container."""
        configs = [replace(c, settings=replace(c.settings, **changes)) for c in self.containers]
        return replace(self, containers=configs)

    def with_kinds(self, kinds: dict[str, str]) -> "Scenario":
        configs = [replace(c, kind=kinds.get(c.container_id, c.kind)) for c in self.containers]
        return replace(self, containers=configs)

    def without_luws(self) -> "Scenario":
        return replace(self, luws=[])


def _need(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise ScenarioError(f"{where}: missing {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise ScenarioError(f"{where}.{key}: expected {kind.__name__ if isinstance(kind, type) else kind}")
    return value


def scenario_file(path) -> Path:
    path = Path(path)
    return path / "scenario.json" if path.is_dir() else path


def load_scenario(path) -> Scenario:
    """Parse and cross-check a scenario; every problem raises ScenarioError."""
    file = scenario_file(path)
    try:
        data = json.loads(file.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ScenarioError(f"no scenario file at {file}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ScenarioError(f"{file}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{file}: top level must be an object")
    base = file.parent

    definitions = {}
    for name, rel in _need(data, "definitions", dict, "$").items():
        try:
            defn = load_definition(base / rel)
        except (OSError, SchemaSyntaxError, ValidationError) as exc:
            raise ScenarioError(f"definition {name!r} ({rel}): {exc}") from None
        if defn.type_name != name:
            raise ScenarioError(f"definition {name!r} declares type {defn.type_name!r}")
        definitions[name] = defn

    identities_raw = data.get("identities", [])
    try:
        identities = IdentityTable.from_records(identities_raw)
    except (KeyError, TypeError, ValueError, DtwinError) as exc:
        raise ScenarioError(f"identities: {exc}") from None
    if len(identities.entries) != len(identities_raw):
        raise ScenarioError("identities: duplicate credential")

    settings_raw = data.get("settings", {})
    unknown = set(settings_raw) - _SETTINGS_KEYS
    if unknown:
        raise ScenarioError(f"settings: unknown keys {sorted(unknown)}")
    settings = ProtocolSettings(**{k: v for k, v in settings_raw.items() if k not in ("latency", "max_tick")})

    containers: list[ContainerConfig] = []
    for i, c in enumerate(_need(data, "containers", list, "$")):
        where = f"containers[{i}]"
        cid = _need(c, "id", str, where)
        if any(x.container_id == cid for x in containers):
            raise ScenarioError(f"{where}: duplicate container id {cid!r}")
        kind = c.get("kind", "application-server")
        if kind not in CONTAINER_KINDS:
            raise ScenarioError(f"{where}: kind must be one of {CONTAINER_KINDS}")
        defs = {}
        for name in c.get("definitions", []):
            if name not in definitions:
                raise ScenarioError(f"{where}: unknown definition {name!r}")
            defs[name] = definitions[name]
        providers = []
        for j, p in enumerate(c.get("providers", [])):
            pw = f"{where}.providers[{j}]"
            pkind = _need(p, "kind", str, pw)
            if pkind not in PROVIDER_KINDS:
                raise ScenarioError(f"{pw}: unknown provider kind {pkind!r}")
            providers.append(
                ProviderConfig(
                    _need(p, "id", str, pw), pkind, dict(p.get("assets", {})),
                    {k: list(v) for k, v in p.get("acl", {}).items()}, tuple(p.get("operators", ())),
                )
            )
        containers.append(
            ContainerConfig(cid, kind, defs, providers, dict(c.get("namespaces", {})), identities, settings)
        )
    scenario = Scenario(
        data.get("name", base.name), file, containers, list(data.get("setup", [])), [], list(data.get("assertions", [])),
        settings_raw.get("latency", 1), settings_raw.get("max_tick", 20_000), list(data.get("fault_plan", [])),
    )
    _check_opening(scenario)

    for i, step in enumerate(scenario.setup):
        where = f"setup[{i}]"
        op = _need(step, "op", str, where)
        cfg = scenario.config(_need(step, "container", str, where))
        _check_credential(identities, step.get("credential"), where)
        if op == "create":
            if _need(step, "definition", str, where) not in cfg.definitions:
                raise ScenarioError(f"{where}: container {cfg.container_id} does not host {step['definition']!r}")
            _twin_id(_need(step, "twin_id", str, where), where)
        elif op == "transition":
            _twin_id(_need(step, "twin_id", str, where), where)
            _need(step, "transition", str, where)
        else:
            raise ScenarioError(f"{where}: unknown op {op!r}")

    for i, raw in enumerate(data.get("luws", [])):
        scenario.luws.append(_load_luw(scenario, identities, raw, f"luws[{i}]"))
    names = [s.name for s in scenario.luws]
    if len(set(names)) != len(names):
        raise ScenarioError("luws: duplicate names")

    for i, a in enumerate(scenario.assertions):
        _check_assertion(scenario, a, f"assertions[{i}]")
    try:
        FaultPlan.from_records(scenario.fault_plan)
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"fault_plan: {exc}") from None
    return scenario


def _twin_id(text, where) -> TwinId:
    try:
        return TwinId.parse(text)
    except (ValueError, DtwinError) as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def _check_credential(identities: IdentityTable, cred, where) -> None:
    if cred is not None and cred not in identities.entries:
        raise ScenarioError(f"{where}: unknown credential {cred!r}")


def _provider_config(cfg: ContainerConfig, provider_id: str, where) -> ProviderConfig:
    for p in cfg.providers:
        if p.provider_id == provider_id:
            return p
    raise ScenarioError(f"{where}: container {cfg.container_id} hosts no provider {provider_id!r}")


def _check_opening(scenario: Scenario) -> None:
    for cfg in scenario.containers:
        for p in cfg.providers:
            prov = PROVIDER_KINDS[p.kind](p.provider_id)
            try:
                prov.open(p.assets)
            except DtwinError as exc:
                raise ScenarioError(f"provider {p.provider_id}: {exc}") from None


def _load_luw(scenario: Scenario, identities: IdentityTable, raw: dict, where: str) -> LuwScript:
    name = _need(raw, "name", str, where)
    coordinator = scenario.config(_need(raw, "coordinator", str, where)).container_id
    on_error = raw.get("on_error", "abort")
    finish = raw.get("finish", "complete")
    if on_error not in ("abort", "continue") or finish not in ("complete", "abort"):
        raise ScenarioError(f"{where}: on_error must be abort|continue and finish complete|abort")
    items = []
    for j, w in enumerate(raw.get("work", [])):
        ww = f"{where}.work[{j}]"
        cfg = scenario.config(_need(w, "container", str, ww))
        cred = w.get("credential")
        _check_credential(identities, cred, ww)
        if "twin" in w:
            tid = _twin_id(w["twin"], ww)
            if not cfg.definitions:
                raise ScenarioError(f"{ww}: container {cfg.container_id} hosts no twins")
            body = {
                "transition": _need(w, "transition", str, ww), "inputs": dict(w.get("inputs", {})),
                "updates": dict(w.get("updates", {})), "expected_version": w.get("expected_version", 0),
            }
            ref = ParticipantRef(cfg.container_id, REPO_TWIN, str(tid))
        elif "provider" in w:
            pcfg = _provider_config(cfg, w["provider"], ww)
            effect = dict(_need(w, "effect", dict, ww))
            for key in ("asset", "to"):
                if key in effect and effect[key] not in pcfg.assets:
                    raise ScenarioError(f"{ww}: provider {pcfg.provider_id} has no asset {effect[key]!r}")
            body = {"effect": effect}
            ref = ParticipantRef(cfg.container_id, ASSET, pcfg.provider_id)
        else:
            raise ScenarioError(f"{ww}: work item needs 'twin' or 'provider'")
        items.append(WorkItem(ref, cred, body))
    return LuwScript(name, coordinator, tuple(items), on_error, finish, raw.get("start", 1))


def _check_assertion(scenario: Scenario, a: dict, where: str) -> None:
    kind = _need(a, "type", str, where)
    if kind not in ASSERTION_TYPES:
        raise ScenarioError(f"{where}: unknown assertion type {kind!r}")
    if kind == "luw_outcome":
        if _need(a, "luw", str, where) not in [s.name for s in scenario.luws]:
            raise ScenarioError(f"{where}: unknown LUW {a['luw']!r}")
        if a.get("expect") not in (COMMITTED, ABORTED):
            raise ScenarioError(f"{where}: expect must be COMMITTED or ABORTED")
        return
    cfg = scenario.config(_need(a, "container", str, where))
    if kind == "twin_state":
        _twin_id(_need(a, "twin", str, where), where)
    else:
        pcfg = _provider_config(cfg, _need(a, "provider", str, where), where)
        if _need(a, "asset", str, where) not in pcfg.assets:
            raise ScenarioError(f"{where}: provider {pcfg.provider_id} has no asset {a['asset']!r}")
        if not any(f in a for f in BALANCE_FIELDS):
            raise ScenarioError(f"{where}: balance assertion names none of {BALANCE_FIELDS}")


# --------------------------------------------------------------------------
# simulation driver
# --------------------------------------------------------------------------


class ScriptRunner:
    """The application side of one LUW script, hosted by its coordinator container."""

    def __init__(self, script: LuwScript):
        self.script = script
        self.luw_id: str | None = None
        self.results: list[dict] = []
        self.app_outcome: str | None = None

    def begin(self, node) -> None:
        self.luw_id = node.coordinator.begin_luw().luw_id
        self._next(node, 0)

    def _next(self, node, i: int) -> None:
        if i == len(self.script.work):
            if self.script.finish == "complete":
                node.coordinator.complete(self.luw_id, self._outcome)
            else:
                node.coordinator.abort(self.luw_id, self._outcome)
            return
        item = self.script.work[i]
        node.coordinator.do_work(
            self.luw_id, item.ref, item.body, item.credential, lambda ok, res: self._done(node, i, ok, res)
        )

    def _done(self, node, i: int, ok: bool, result) -> None:
        self.results.append({"item": i, "ok": ok, "result": result})
        if not ok and self.script.on_error == "abort":
            node.coordinator.abort(self.luw_id, self._outcome)
        else:
            self._next(node, i + 1)

    def _outcome(self, outcome: str) -> None:
        self.app_outcome = outcome


class Simulation:
    def __init__(self, scenario: Scenario, seed: int = 0, fault_plan: FaultPlan | None = None):
        self.scenario = scenario
        self.seed = seed
        plan = fault_plan if fault_plan is not None else FaultPlan.from_records(scenario.fault_plan)
        self.net = Network(seed, plan, scenario.latency, scenario.max_tick)
        self.runners = [ScriptRunner(s) for s in scenario.luws]
        self.quiescent: bool | None = None
        self._set_up = False
        for cfg in scenario.containers:
            self.net.register(cfg.container_id, self._factory(cfg))

    def _factory(self, cfg: ContainerConfig):
        return lambda cid, net: DTContainer(cfg, net, app_hook=self._app)

    def _app(self, node, data: dict) -> None:
        self.runners[data["script"]].begin(node)

    def setup(self) -> None:
        """Run the scenario's setup steps; ``run`` calls this unless it already happened."""
        if self._set_up:
            return
        self._set_up = True
        for i, step in enumerate(self.scenario.setup):
            node = self.net.container(step["container"])
            try:
                if step["op"] == "create":
                    principal = node.authenticate(step.get("credential"))
                    node.repository.create(
                        step["definition"], TwinId.parse(step["twin_id"]), dict(step.get("attributes", {})),
                        step.get("owner", principal.principal_id), principal,
                    )
                else:
                    invoke_remote_transition(
                        self.net, step.get("caller", step["container"]), step["container"], step.get("credential"),
                        TwinId.parse(step["twin_id"]), step["transition"], step.get("inputs"), step.get("updates"),
                        step.get("expected_version", 0),
                    )
            except DtwinError as exc:
                raise ScenarioError(f"setup[{i}] failed: {type(exc).__name__}: {exc}") from None

    def run(self) -> "Simulation":
        self.setup()
        for i, script in enumerate(self.scenario.luws):
            self.net.set_timer(script.coordinator, script.start, "app", {"script": i})
        self.quiescent = self.net.run()
        self.net.ledger.close()
        return self

    def node(self, container_id: str) -> DTContainer:
        """The live container, or a read-only rebuild from its disk if it is down."""
        if self.net.is_up(container_id):
            return self.net.container(container_id)
        return DTContainer(self.scenario.config(container_id), self.net)

    def nodes(self) -> dict[str, DTContainer]:
        return {c.container_id: self.node(c.container_id) for c in self.scenario.containers}

    def luw_outcomes(self) -> dict[str, str]:
        out = {}
        for r in self.runners:
            decision = self.net.ledger.decision(r.luw_id) if r.luw_id else None
            out[r.script.name] = decision or "UNDECIDED"
        return out


# --------------------------------------------------------------------------
# final-state summaries
# --------------------------------------------------------------------------


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def state_summary(nodes: dict[str, DTContainer]) -> dict:
    out = {}
    for cid, node in sorted(nodes.items()):
        twins = {}
        for tid, rec in sorted(node.repository.records.items()):
            twins[str(tid)] = {
                "version": rec.head.version, "state": rec.head.state, "state_hash": state_hash(rec.head),
                "lock": rec.lock, "destructed": rec.destructed,
            }
        providers = {
            pid: {asset: prov.snapshot(asset) for asset in sorted(prov.holdings)}
            for pid, prov in sorted(node.providers.items())
        }
        out[cid] = {"twins": twins, "providers": providers}
    return out


def fingerprint(nodes: dict[str, DTContainer]) -> str:
    """Digest of business state only: twin heads and provider balances."""
    return hashlib.sha256(_canon(state_summary(nodes)).encode("ascii")).hexdigest()


def state_digest(nodes: dict[str, DTContainer]) -> str:
    """Fingerprint plus protocol bookkeeping (coordinator and participant phases)."""
    full = {"state": state_summary(nodes), "luws": {}, "parts": {}}
    for cid, node in sorted(nodes.items()):
        full["luws"][cid] = {k: [d.phase, d.done, d.keys()] for k, d in sorted(node.coordinator.luws.items())}
        full["parts"][cid] = {f"{l}|{k}": st.status for (l, k), st in sorted(node.participant.states.items())}
    return hashlib.sha256(_canon(full).encode("ascii")).hexdigest()


# --------------------------------------------------------------------------
# global checks over one finished run
# --------------------------------------------------------------------------


def _effects(nodes) -> dict[str, list[tuple[str, str]]]:
    """luw_id -> [(resource, applied|undone|pending)] read off the resources themselves."""
    found: dict[str, list[tuple[str, str]]] = {}
    for cid, node in sorted(nodes.items()):
        repo = node.repository
        for (luw, tid), outcome in sorted(repo.resolved.items()):
            found.setdefault(luw, []).append((f"{cid}/{tid}", "applied" if outcome == APPLIED else "undone"))
        for tid, rec in sorted(repo.records.items()):
            if rec.lock is not None:
                found.setdefault(rec.lock, []).append((f"{cid}/{tid}", "pending"))
        for pid, prov in sorted(node.providers.items()):
            for rid, res in sorted(prov.reservations.items()):
                status = {HELD: "pending", RES_COMMITTED: "applied"}.get(res.status, "undone")
                found.setdefault(res.luw_id, []).append((f"{cid}/{pid}/{rid}", status))
    return found


def check_run(sim: Simulation, reference: dict | None = None) -> dict[str, list[str]]:
    """Every invariant checker over a finished run; empty lists mean no violation.

    ``reference`` may carry ``none`` (fingerprint with no LUW work) and
    ``all``/``outcomes`` (fingerprint and outcomes of a committed fault-free run).
    """
    nodes = sim.nodes()
    ledger = sim.net.ledger
    v = {name: [] for name in CHECKS}

    effects = _effects(nodes)
    for luw, items in sorted(effects.items()):
        kinds = {k for _, k in items}
        decision = ledger.decision(luw)
        if "applied" in kinds and "undone" in kinds:
            v["atomicity"].append(f"{luw}: mixed outcome {items}")
        if "applied" in kinds and decision != COMMITTED:
            v["agreement"].append(f"{luw}: work applied but ledger decision is {decision}")
        if "undone" in kinds and decision == COMMITTED:
            v["agreement"].append(f"{luw}: work undone but ledger decision is COMMITTED")
        if "pending" in kinds:
            v["liveness"].append(f"{luw}: unresolved work {[r for r, k in items if k == 'pending']}")

    if reference is not None:
        fp, outcomes = fingerprint(nodes), sim.luw_outcomes()
        if all(o == ABORTED for o in outcomes.values()) and fp != reference["none"]:
            v["atomicity"].append("every LUW aborted but state differs from the no-work state")
        if reference.get("all") and outcomes == reference["outcomes"] and fp != reference["all"]:
            v["atomicity"].append("outcomes match the fault-free run but state differs from it")

    phases: dict[str, set[str]] = {}
    prepared: dict[str, set[str]] = {}
    for _, _, e in ledger.entries():
        if e.kind != LUW_EVENT:
            continue
        if e.phase == PREPARED:
            prepared.setdefault(e.luw_id, set()).add(e.participant)
        else:
            phases.setdefault(e.luw_id, set()).add(e.phase)
        if e.role == DECISION and e.phase == COMMITTED:
            missing = [p for p in e.participants or () if p not in prepared.get(e.luw_id, set())]
            if missing:
                v["validity"].append(f"{e.luw_id}: COMMITTED without PREPARED from {missing}")
    for luw, ph in sorted(phases.items()):
        if {COMMITTED, ABORTED} <= ph:
            v["agreement"].append(f"{luw}: both COMMITTED and ABORTED anchored")

    for cid, node in sorted(nodes.items()):
        cfg = sim.scenario.config(cid)
        for pcfg in cfg.providers:
            prov = node.providers[pcfg.provider_id]
            for asset, opening in sorted(pcfg.assets.items()):
                h = prov.holdings[asset]
                expected = prov.quantity(opening) + prov.committed_delta(asset)
                held_out = held_in = prov.zero
                for r in prov.reservations.values():
                    if r.status != HELD:
                        continue
                    src, dst, amount = prov.legs(r.effect)
                    if src == asset:
                        held_out += amount
                    if dst == asset:
                        held_in += amount
                if h.total != expected or h.escrowed != held_out or h.incoming != held_in or h.total - h.escrowed < 0:
                    v["conservation"].append(
                        f"{cid}/{pcfg.provider_id}/{asset}: total {prov.render(h.total)} expected {prov.render(expected)}"
                    )

    if not sim.quiescent:
        v["liveness"].append(f"not quiescent by tick {sim.net.max_tick}")
    for r in sim.runners:
        if r.luw_id is not None and ledger.decision(r.luw_id) is None:
            v["liveness"].append(f"{r.luw_id}: no decision")
    for cid, node in sorted(nodes.items()):
        for (luw, key), st in sorted(node.participant.states.items()):
            if st.status == PREPARED:
                v["liveness"].append(f"{luw}: {key} still in doubt")
    for e in sim.net.events:
        if e["event"] == "RETRY_EXHAUSTED":
            v["liveness"].append(f"{e['luw_id']}: gave up retrying")

    down: dict[str, int] = {}
    for e in sim.net.events:
        if e["event"] == "CRASH":
            down[e["container"]] = e["tick"]
        elif e["event"] == "RESTART":
            down.pop(e["container"], None)
        elif "seq" in e and e["from"] in down and e["sent"] > down[e["from"]]:
            v["containment"].append(f"message {e['seq']} sent by crashed {e['from']}")
        if e["event"] == "HANDLER_ERROR":
            v["handler_errors"].append(f"{e['where']}: {e['error']}")
    return v


# --------------------------------------------------------------------------
# assertions and reports
# --------------------------------------------------------------------------


@dataclass
class AssertionResult:
    what: str
    ok: bool
    detail: str = ""


def _evaluate_assertion(sim: Simulation, nodes, a: dict) -> AssertionResult:
    if a["type"] == "luw_outcome":
        got = sim.luw_outcomes()[a["luw"]]
        return AssertionResult(f"luw {a['luw']} is {a['expect']}", got == a["expect"], f"got {got}")
    node = nodes[a["container"]]
    if a["type"] == "twin_state":
        tid = TwinId.parse(a["twin"])
        what = f"twin {tid} on {a['container']}"
        try:
            head = node.repository.head(tid)
        except DtwinError as exc:
            return AssertionResult(what, False, str(exc))
        got = twin_to_record(head)
        problems = []
        if "state" in a and head.state != a["state"]:
            problems.append(f"state {head.state} != {a['state']}")
        if "version" in a and head.version != a["version"]:
            problems.append(f"version {head.version} != {a['version']}")
        for k, want in sorted(a.get("attributes", {}).items()):
            if got["attributes"].get(k) != want:
                problems.append(f"{k} {got['attributes'].get(k)!r} != {want!r}")
        return AssertionResult(what, not problems, "; ".join(problems) or f"state {head.state} v{head.version}")
    prov = node.provider(a["provider"])
    snap = prov.snapshot(a["asset"])
    what = f"{a['container']}/{a['provider']}/{a['asset']}"
    problems = [
        f"{f} {snap[f]} != {a[f]}" for f in BALANCE_FIELDS if f in a and prov.quantity(snap[f]) != prov.quantity(a[f])
    ]
    return AssertionResult(what, not problems, "; ".join(problems) or ", ".join(f"{f}={snap[f]}" for f in BALANCE_FIELDS))


@dataclass
class RunReport:
    scenario: str
    seed: int
    outcomes: dict[str, str]
    assertions: list[AssertionResult]
    checks: dict[str, list[str]]
    state: dict
    digest: str
    ticks: int
    messages: int

    @property
    def ok(self) -> bool:
        return all(a.ok for a in self.assertions) and not any(self.checks.values())

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def lines(self) -> list[str]:
        out = [f"scenario {self.scenario} seed {self.seed}: {self.messages} messages, {self.ticks} ticks"]
        for name, outcome in self.outcomes.items():
            out.append(f"LUW {name}: {outcome}")
        for cid, part in self.state.items():
            for tid, t in part["twins"].items():
                out.append(f"twin {cid}/{tid}: {t['state']} v{t['version']}" + (f" locked by {t['lock']}" if t["lock"] else ""))
            for pid, assets in part["providers"].items():
                for asset, snap in assets.items():
                    out.append(f"balance {cid}/{pid}/{asset}: " + ", ".join(f"{k}={snap[k]}" for k in BALANCE_FIELDS))
        for name in CHECKS:
            out.append(f"check {name}: " + ("ok" if not self.checks[name] else "; ".join(self.checks[name])))
        for a in self.assertions:
            out.append(f"{'PASS' if a.ok else 'FAIL'} {a.what} ({a.detail})")
        for i, a in enumerate(self.assertions):
            out.append(_canon({"assertion": i, "ok": a.ok, "what": a.what}))
        out.append(f"state digest {self.digest}")
        out.append("RESULT " + ("PASS" if self.ok else "FAIL"))
        return out


def report_for(sim: Simulation) -> RunReport:
    nodes = sim.nodes()
    results = [_evaluate_assertion(sim, nodes, a) for a in sim.scenario.assertions]
    return RunReport(
        sim.scenario.name, sim.seed, sim.luw_outcomes(), results, check_run(sim), state_summary(nodes),
        state_digest(nodes), sim.net.tick, sim.net.messages_sent,
    )


def run_scenario(scenario: Scenario, seed: int = 0, fault_plan: FaultPlan | None = None) -> tuple[Simulation, RunReport]:
    sim = Simulation(scenario, seed, fault_plan).run()
    return sim, report_for(sim)


def write_outputs(sim: Simulation, report: RunReport, out_dir, fault_records=()) -> None:
    out = Path(out_dir)
    (out / "containers").mkdir(parents=True, exist_ok=True)
    (out / "events.jsonl").write_text("".join(line + "\n" for line in sim.net.event_lines()), encoding="ascii")
    sim.net.ledger.export(out / "ledger.jsonl")
    history = []
    for cid, node in sim.nodes().items():
        for tid, rec in sorted(node.repository.records.items()):
            for twin in rec.history:
                history.append(_canon({
                    "container": cid, "twin": twin_to_record(twin), "types": rec.definition.attribute_types,
                    "receipt": rec.anchors[twin.version].to_record(),
                }))
        sim.net.disks[cid].export(out / "containers" / f"{cid}.log.jsonl")
    (out / "history.jsonl").write_text("".join(line + "\n" for line in history), encoding="ascii")
    (out / "report.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    run = {"scenario": str(sim.scenario.path.resolve()), "seed": sim.seed, "fault_plan": list(fault_records), "digest": report.digest}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# exhaustive single-fault sweep
# --------------------------------------------------------------------------


@dataclass
class SweepRun:
    action: str
    step: int
    message: str
    outcomes: dict[str, str]
    violations: dict[str, list[str]]

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())


@dataclass
class SweepReport:
    steps: int
    baseline: SweepRun
    runs: list[SweepRun]

    @property
    def ok(self) -> bool:
        return self.baseline.ok and all(r.ok for r in self.runs)

    def count(self, check: str) -> int:
        return sum(1 for r in [self.baseline, *self.runs] if r.violations[check])

    def lines(self) -> list[str]:
        out = [f"fault-free run: {self.steps} protocol steps, outcomes {self.baseline.outcomes}"]
        for r in [self.baseline, *self.runs]:
            label = "baseline" if r.step == 0 else f"{r.action}@{r.step}"
            bad = {k: vs for k, vs in r.violations.items() if vs}
            out.append(f"{label:10} {r.message:32} {json.dumps(r.outcomes, sort_keys=True)} " + ("ok" if not bad else f"VIOLATION {bad}"))
        out.append(" ".join(f"{name}={self.count(name)}" for name in CHECKS))
        out.append(f"runs {len(self.runs)}; RESULT " + ("PASS" if self.ok else "FAIL"))
        return out


def _describe(events, step: int) -> str:
    for e in events:
        if e.get("seq") == step:
            return f"{e['msg_type']} {e['from']}->{e['to']}"
    return "?"


def sweep_faults(scenario: Scenario, seed: int = 0, restart_after: int = 30) -> SweepReport:
    """One fault-free run, then one run per (drop|crash, step) over its K messages."""
    none_sim = Simulation(scenario.without_luws(), seed, FaultPlan()).run()
    base = Simulation(scenario, seed, FaultPlan()).run()
    reference = {"none": fingerprint(none_sim.nodes())}
    if all(o == COMMITTED for o in base.luw_outcomes().values()):
        reference.update(all=fingerprint(base.nodes()), outcomes=base.luw_outcomes())
    baseline = SweepRun("none", 0, "", base.luw_outcomes(), check_run(base, reference))
    steps = base.net.messages_sent
    runs = []
    for step in range(1, steps + 1):
        for action in (DROP, CRASH):
            plan = FaultPlan([FaultDirective(action, step=step, restart_after=restart_after)])
            sim = Simulation(scenario, seed, plan).run()
            runs.append(SweepRun(action, step, _describe(base.net.events, step), sim.luw_outcomes(), check_run(sim, reference)))
    return SweepReport(steps, baseline, runs)
