"""Digital twins in DT-Containers: contract-checked state transitions, a salted
witness ledger, escrow asset providers and two-phase-commit LUWs over a
deterministic simulated network."""

from __future__ import annotations

__version__ = "0.1.0"
