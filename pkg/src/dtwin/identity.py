"""Principals and the static credential table standing in for identity providers."""

from __future__ import annotations

from dataclasses import dataclass, field

from .values import TwinId

OWNER_ROLE = "owner"  # granted per twin to the principal that owns it


@dataclass(frozen=True)
class Principal:
    principal_id: str
    roles: tuple[str, ...] = ()
    authorized_twins: frozenset[TwinId] = frozenset()

    def roles_for(self, owner: str) -> frozenset[str]:
        """Static roles plus the dynamic ``owner`` role when this principal owns the twin."""
        roles = set(self.roles)
        if self.principal_id == owner:
            roles.add(OWNER_ROLE)
        return frozenset(roles)


ANONYMOUS = Principal("anonymous")


@dataclass
class IdentityTable:
    entries: dict[str, Principal] = field(default_factory=dict)

    def register(self, credential: str, principal: Principal) -> None:
        if not credential:
            raise ValueError("empty credential")
        self.entries[credential] = principal

    def revoke(self, credential: str) -> None:
        self.entries.pop(credential, None)

    def authenticate(self, credential: str | None) -> Principal:
        if not credential:
            return ANONYMOUS
        return self.entries.get(credential, ANONYMOUS)

    def by_id(self, principal_id: str) -> Principal:
        for p in self.entries.values():
            if p.principal_id == principal_id:
                return p
        return Principal(principal_id)

    @classmethod
    def from_records(cls, records) -> "IdentityTable":
        table = cls()
        for rec in records:
            table.register(
                rec["credential"],
                Principal(
                    rec["principal"],
                    tuple(rec.get("roles", ())),
                    frozenset(TwinId.parse(t) for t in rec.get("authorized_twins", ())),
                ),
            )
        return table
