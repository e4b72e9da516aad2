"""Escrow-based resource managers acting as asset custodians.

Every asset keeps three numbers: ``total`` (on hand / balance / tokens),
``escrowed`` (held by outgoing reservations) and ``incoming`` (held credits or
mints, not yet spendable). ``available = total - escrowed`` never goes
negative, so a HELD reservation is always committable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from decimal import Decimal

from .durable import DurableLog
from .errors import (
    AlreadyAborted,
    AlreadyCommitted,
    Insufficient,
    UnknownAsset,
    UnknownReservation,
    Unauthorized,
    ValueTypeError,
)
from .identity import Principal
from .values import to_decimal

HELD, COMMITTED, ABORTED = "HELD", "COMMITTED", "ABORTED"
AUDITOR_ROLE = "auditor"


@dataclass
class Holding:
    total: object
    escrowed: object
    incoming: object


@dataclass(frozen=True)
class Reservation:
    reservation_id: str
    provider_id: str
    effect: dict
    status: str
    luw_id: str


class AssetProvider:
    """Shared resource-manager interface; subclasses only declare their operations."""

    kind = "abstract"
    outgoing_ops: tuple[str, ...] = ()
    incoming_ops: tuple[str, ...] = ()
    transfer_ops: tuple[str, ...] = ()

    def __init__(
        self, provider_id: str, log: DurableLog | None = None, acl: dict | None = None, operators=(),
    ):
        self.provider_id = provider_id
        self.log = log if log is not None else DurableLog()
        self.acl = {k: set(v) for k, v in (acl or {}).items()}
        self.operators = set(operators)
        self.holdings: dict[str, Holding] = {}
        self.reservations: dict[str, Reservation] = {}
        self._counter = 0

    # --- quantities -------------------------------------------------------

    def quantity(self, raw):
        if isinstance(raw, bool):
            raise ValueTypeError(f"bad quantity {raw!r}")
        if isinstance(raw, int):
            return raw
        raise ValueTypeError(f"{self.kind} quantities are integers, got {raw!r}")

    def render(self, q) -> object:
        return q

    @property
    def zero(self):
        return self.quantity(0)

    # --- setup ------------------------------------------------------------

    def open(self, assets: dict) -> None:
        """Load opening quantities (durably); used once per scenario."""
        rendered = {}
        for asset, amount in sorted(assets.items()):
            q = self.quantity(amount)
            if q < 0:
                raise ValueTypeError(f"negative opening quantity for {asset}")
            self.holdings[asset] = Holding(q, self.zero, self.zero)
            rendered[asset] = self.render(q)
        self.log.append("prov.open", {"provider": self.provider_id, "assets": rendered})

    # --- effects ----------------------------------------------------------

    def legs(self, effect: dict):
        """Split an effect into (outgoing asset, incoming asset, amount)."""
        op = effect.get("op")
        amount = self.quantity(effect.get("amount"))
        if amount <= 0:
            raise ValueTypeError("effect amount must be positive")
        asset = effect.get("asset")
        if op in self.outgoing_ops:
            legs = (asset, None)
        elif op in self.incoming_ops:
            legs = (None, asset)
        elif op in self.transfer_ops:
            if effect.get("to") in (None, asset):
                raise ValueTypeError("transfer needs a distinct 'to' asset")
            legs = (asset, effect.get("to"))
        else:
            raise ValueTypeError(f"{self.kind} provider does not support {op!r}")
        for a in legs:
            if a is not None and a not in self.holdings:
                raise UnknownAsset(f"{self.provider_id} has no asset {a!r}")
        return legs[0], legs[1], amount

    def authorize(self, effect: dict, principal: Principal) -> None:
        """Operators may reserve anything; asset holders may only spend their own assets."""
        if principal.principal_id in self.operators:
            return
        src, _, _ = self.legs(effect)
        if src is None or principal.principal_id not in self.acl.get(src, ()):
            raise Unauthorized(f"{principal.principal_id} may not {effect.get('op')} on {self.provider_id}")

    def reserve(self, effect: dict, luw_id: str, principal: Principal | None = None) -> Reservation:
        """Escrow ``effect`` for ``luw_id``; with a principal, authorization is checked first."""
        src, dst, amount = self.legs(effect)
        if principal is not None:
            self.authorize(effect, principal)
        if src is not None:
            h = self.holdings[src]
            if h.total - h.escrowed < amount:
                raise Insufficient(f"{src}: available {self.render(h.total - h.escrowed)} < {self.render(amount)}")
        self._counter += 1
        rid = f"{self.provider_id}-{self._counter}"
        normalized = {k: (self.render(self.quantity(v)) if k == "amount" else v) for k, v in sorted(effect.items())}
        res = Reservation(rid, self.provider_id, normalized, HELD, luw_id)
        self.log.append("prov.reserve", {"provider": self.provider_id, "id": rid, "effect": normalized, "luw": luw_id})
        self._hold(res)
        return res

    def _hold(self, res: Reservation) -> None:
        src, dst, amount = self.legs(res.effect)
        if src is not None:
            self.holdings[src].escrowed += amount
        if dst is not None:
            self.holdings[dst].incoming += amount
        self.reservations[res.reservation_id] = res

    def _settle(self, res: Reservation, commit: bool) -> None:
        src, dst, amount = self.legs(res.effect)
        if src is not None:
            h = self.holdings[src]
            h.escrowed -= amount
            if commit:
                h.total -= amount
        if dst is not None:
            h = self.holdings[dst]
            h.incoming -= amount
            if commit:
                h.total += amount
        self.reservations[res.reservation_id] = replace(res, status=COMMITTED if commit else ABORTED)

    def _get(self, reservation_id: str) -> Reservation:
        try:
            return self.reservations[reservation_id]
        except KeyError:
            raise UnknownReservation(reservation_id) from None

    def commit_reservation(self, reservation_id: str) -> str:
        res = self._get(reservation_id)
        if res.status == COMMITTED:
            return f"{reservation_id} already committed"
        if res.status == ABORTED:
            raise AlreadyAborted(reservation_id)
        self.log.append("prov.commit", {"provider": self.provider_id, "id": reservation_id})
        self._settle(res, commit=True)
        return f"{reservation_id} committed"

    def abort_reservation(self, reservation_id: str) -> str:
        res = self._get(reservation_id)
        if res.status == ABORTED:
            return f"{reservation_id} already aborted"
        if res.status == COMMITTED:
            raise AlreadyCommitted(reservation_id)
        self.log.append("prov.abort", {"provider": self.provider_id, "id": reservation_id})
        self._settle(res, commit=False)
        return f"{reservation_id} aborted"

    def query_asset(self, asset_id: str, principal: Principal) -> dict:
        if asset_id not in self.holdings:
            raise UnknownAsset(f"{self.provider_id} has no asset {asset_id!r}")
        if principal.principal_id not in self.acl.get(asset_id, ()) and AUDITOR_ROLE not in principal.roles:
            raise Unauthorized(f"{principal.principal_id} may not inspect {asset_id}")
        return self.snapshot(asset_id)

    def snapshot(self, asset_id: str) -> dict:
        h = self.holdings[asset_id]
        return {
            "total": self.render(h.total),
            "escrowed": self.render(h.escrowed),
            "available": self.render(h.total - h.escrowed),
            "incoming": self.render(h.incoming),
        }

    # --- per-LUW helpers used by the participant ---------------------------

    def reservations_for(self, luw_id: str) -> list[Reservation]:
        return [r for _, r in sorted(self.reservations.items()) if r.luw_id == luw_id]

    def revalidate(self, luw_id: str) -> bool:
        found = self.reservations_for(luw_id)
        return bool(found) and all(r.status == HELD for r in found)

    def commit_luw(self, luw_id: str) -> None:
        for r in self.reservations_for(luw_id):
            self.commit_reservation(r.reservation_id)

    def abort_luw(self, luw_id: str) -> None:
        for r in self.reservations_for(luw_id):
            if r.status != COMMITTED:
                self.abort_reservation(r.reservation_id)

    def committed_delta(self, asset_id: str):
        """Net change to ``total`` from committed reservations on ``asset_id``."""
        delta = self.zero
        for r in self.reservations.values():
            if r.status != COMMITTED:
                continue
            src, dst, amount = self.legs(r.effect)
            if src == asset_id:
                delta -= amount
            if dst == asset_id:
                delta += amount
        return delta

    def replay(self, records) -> None:
        for rec in records:
            op, p = rec["op"], rec["payload"]
            if p.get("provider") != self.provider_id:
                continue
            if op == "prov.open":
                for asset, amount in p["assets"].items():
                    self.holdings[asset] = Holding(self.quantity(amount), self.zero, self.zero)
            elif op == "prov.reserve":
                self._counter += 1
                self._hold(Reservation(p["id"], self.provider_id, p["effect"], HELD, p["luw"]))
            elif op == "prov.commit":
                self._settle(self.reservations[p["id"]], commit=True)
            elif op == "prov.abort":
                self._settle(self.reservations[p["id"]], commit=False)


class InventoryProvider(AssetProvider):
    kind = "inventory"
    outgoing_ops = ("remove",)
    incoming_ops = ("add",)


class TokenProvider(AssetProvider):
    kind = "token"
    outgoing_ops = ("burn",)
    incoming_ops = ("mint",)
    transfer_ops = ("transfer",)

    def snapshot(self, asset_id: str) -> dict:
        snap = super().snapshot(asset_id)
        snap["escrowed_mint"] = snap["incoming"]
        return snap


class AccountProvider(AssetProvider):
    """Decimal currency accounts (4 fractional digits)."""

    kind = "account"
    outgoing_ops = ("debit",)
    incoming_ops = ("credit",)
    transfer_ops = ("transfer",)

    def quantity(self, raw) -> Decimal:
        return to_decimal(raw)

    def render(self, q) -> str:
        return format(q, "f")


PROVIDER_KINDS = {cls.kind: cls for cls in (InventoryProvider, TokenProvider, AccountProvider)}
