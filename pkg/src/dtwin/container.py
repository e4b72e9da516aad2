"""DT-Container: repository, providers, identity and LUW roles behind one message endpoint."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import UnknownAsset, Unauthorized
from .identity import IdentityTable, Principal
from .luw import (
    ABORT, ACK, COMMIT, ENLIST, PREPARE, STATUS_QUERY, STATUS_REPLY, VOTE_NO, VOTE_YES, WORK,
    Coordinator, Participant, ProtocolSettings,
)
from .providers import PROVIDER_KINDS, AssetProvider
from .repository import Repository
from .schema import TwinDefinition
from .twin import TwinView, view_for
from .values import TwinId
from .verifier import TransitionRequest

log = logging.getLogger(__name__)

CONTAINER_KINDS = ("dlt-backed", "application-server")
_COORDINATOR_MSGS = {VOTE_YES, VOTE_NO, STATUS_QUERY}
_PARTICIPANT_MSGS = {ENLIST, WORK, PREPARE, COMMIT, ABORT, STATUS_REPLY}


@dataclass(frozen=True)
class ProviderConfig:
    provider_id: str
    kind: str
    assets: dict = field(default_factory=dict)
    acl: dict = field(default_factory=dict)
    operators: tuple[str, ...] = ()


@dataclass
class ContainerConfig:
    """``kind`` is a label only; both kinds behave identically."""

    container_id: str
    kind: str = "application-server"
    definitions: dict[str, TwinDefinition] = field(default_factory=dict)
    providers: list[ProviderConfig] = field(default_factory=list)
    namespaces: dict[str, list[str]] = field(default_factory=dict)
    identities: IdentityTable = field(default_factory=IdentityTable)
    settings: ProtocolSettings = field(default_factory=ProtocolSettings)

    def __post_init__(self):
        if self.kind not in CONTAINER_KINDS:
            raise ValueError(f"container kind must be one of {CONTAINER_KINDS}, got {self.kind!r}")
        for p in self.providers:
            if p.kind not in PROVIDER_KINDS:
                raise ValueError(f"unknown provider kind {p.kind!r}")


class DTContainer:
    """Built from its durable log; a restart is simply a fresh instance plus ``recover()``."""

    def __init__(self, config: ContainerConfig, net, app_hook=None):
        self.config = config
        self.container_id = config.container_id
        self.net = net
        self.ledger = net.ledger
        self.log = net.disks[self.container_id]
        self.settings = config.settings
        self.identities = config.identities
        self.app_hook = app_hook
        self.repository = Repository(
            self.container_id, self.ledger, self.log, config.definitions,
            {ns: set(ids) for ns, ids in config.namespaces.items()},
        )
        self.providers: dict[str, AssetProvider] = {
            p.provider_id: PROVIDER_KINDS[p.kind](p.provider_id, self.log, p.acl, p.operators)
            for p in config.providers
        }
        self.coordinator = Coordinator(self)
        self.participant = Participant(self)

        records = list(self.log.records())
        self.repository.replay(records)
        for prov in self.providers.values():
            prov.replay(records)
        self.coordinator.replay(records)
        self.participant.replay(records)
        opened = {r["payload"]["provider"] for r in records if r["op"] == "prov.open"}
        for p in config.providers:
            if p.provider_id not in opened:
                self.providers[p.provider_id].open(p.assets)

    def authenticate(self, credential: str | None) -> Principal:
        return self.identities.authenticate(credential)

    def provider(self, provider_id: str) -> AssetProvider:
        try:
            return self.providers[provider_id]
        except KeyError:
            raise UnknownAsset(f"{self.container_id} hosts no provider {provider_id!r}") from None

    # --- network endpoint -------------------------------------------------

    def handle(self, msg) -> None:
        if msg.msg_type == ACK:
            # ACKs for ENLIST/WORK/COMMIT/ABORT all travel participant -> coordinator
            self.coordinator.handle(msg)
        elif msg.msg_type in _COORDINATOR_MSGS:
            self.coordinator.handle(msg)
        elif msg.msg_type in _PARTICIPANT_MSGS:
            self.participant.handle(msg)
        else:
            log.warning("%s: unexpected message %s", self.container_id, msg.msg_type)

    def on_timer(self, name: str, data: dict) -> None:
        if name == "app":
            if self.app_hook is not None:
                self.app_hook(self, data)
        elif name in ("in_doubt", "idle"):
            self.participant.on_timer(name, data)
        else:
            self.coordinator.on_timer(name, data)

    def recover(self) -> list[str]:
        resolved = self.coordinator.recover() + self.participant.recover()
        return sorted(set(resolved))


def invoke_remote_transition(
    net, caller: str, target: str, credential: str | None, twin_id: TwinId, transition: str,
    inputs: dict | None = None, updates: dict | None = None, expected_version: int = 0,
) -> TwinView:
    """Run a transition on another container's twin exactly as a local update would."""
    net.container(caller)
    node = net.container(target)
    principal = node.authenticate(credential)
    repo = node.repository
    head = repo.head(twin_id)
    defn = repo.definition_of(twin_id)
    roles = set()
    for t in defn.transitions:
        if t.name == transition and t.from_state == head.state:
            roles.update(t.allowed_roles)
    req = TransitionRequest(twin_id, transition, dict(inputs or {}), dict(updates or {}), principal, expected_version)
    if roles and not roles & principal.roles_for(head.owner):
        repo.record_audit("remote", req, False, caller=caller)
        raise Unauthorized(f"{principal.principal_id} may not {transition} {twin_id}")
    repo.update(req, caller=caller)
    return view_for(defn, repo.head(twin_id), principal)
