from __future__ import annotations

import json
from decimal import Decimal
from pathlib import Path

import pytest

from dtwin.identity import Principal
from dtwin.schema import load_definition
from dtwin.twin import DigitalTwin, instantiate
from dtwin.values import Timestamp, TwinId

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
WINE = SCENARIOS / "wine_purchase"
UNDERFUNDED = SCENARIOS / "wine_purchase_underfunded"
GOLDEN = Path(__file__).resolve().parent / "golden"

WINE_ID = TwinId.parse("PRD:dat_ref_12345678")
ALICE_REF = TwinId.parse("USR:alice")

WINE_ATTRS = {
    "product_type": "wine",
    "producer": "Domaine X",
    "year": 2018,
    "wine_kind": "Red Bordeaux",
    "tag_id": "NFC-0001",
    "consumption_code": "XK42-99",
    "acquired_by": None,
    "consumed_by": None,
}

PRODUCER = Principal("producer", ("producer",))
RETAILER = Principal("shop", ("retailer",))
ALICE = Principal("alice", ("consumer",), frozenset({WINE_ID}))
STRANGER = Principal("mallory", ("consumer",))


@pytest.fixture(scope="session")
def product_def():
    return load_definition(WINE / "consumer_product.json")


@pytest.fixture(scope="session")
def wine(product_def):
    return instantiate(product_def, WINE_ID, WINE_ATTRS, "producer")


def fixture_twin() -> DigitalTwin:
    """The golden fixture, built straight from its tagged JSON."""
    doc = json.loads((GOLDEN / "fixture_twin.json").read_text(encoding="utf-8"))
    build = {
        "str": str, "int": int, "dec": Decimal, "bool": bool, "ts": Timestamp,
        "ref": TwinId.parse, "null": lambda _: None,
    }
    attrs = {k: build[tag](raw) for k, (tag, raw) in doc["attributes"].items()}
    return DigitalTwin(TwinId.parse(doc["id"]), doc["type"], doc["version"], doc["state"], attrs, doc["owner"])
