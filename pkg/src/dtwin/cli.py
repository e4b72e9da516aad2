"""Command-line entry point.

Exit codes: 0 success, 1 a check or assertion failed, 2 unusable input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .container import DTContainer
from .durable import DurableLog
from .errors import DtwinError, LedgerFormatError, LogCorrupted, ScenarioError, SchemaSyntaxError, ValidationError
from .ledger import AnchorReceipt, parse_ledger, verify_anchor, verify_chain
from .luw import PRESUME_COMMIT, SKIP_PREPARED_ANCHOR
from .network import FaultPlan, Network
from .scenario import _check_assertion, load_scenario, run_scenario, state_digest, sweep_faults, write_outputs
from .schema import load_definition
from .twin import state_hash, twin_from_typed_record

MUTATIONS = (SKIP_PREPARED_ANCHOR, PRESUME_COMMIT)


def _out(text: str) -> None:
    print(text)


def _err(text: str) -> None:
    print(text, file=sys.stderr)


def cmd_validate(args) -> int:
    status = 0
    for path in args.definitions:
        try:
            defn = load_definition(path)
        except (SchemaSyntaxError, ValidationError) as exc:
            _out(f"{path}: INVALID at {exc.location}: {exc}")
            status = 1
        except OSError as exc:
            _err(f"{path}: {exc}")
            return 2
        else:
            _out(f"{path}: ok ({defn.type_name}, {len(defn.attributes)} attributes, {len(defn.transitions)} transitions)")
    return status


def _load_fault_file(scenario, path):
    """A fault file is a JSON list of directives, or an object with ``fault_plan`` and optional ``assertions``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"fault plan {path}: {exc}") from None
    records = data if isinstance(data, list) else data.get("fault_plan", [])
    try:
        plan = FaultPlan.from_records(records)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ScenarioError(f"fault plan {path}: {exc}") from None
    if isinstance(data, dict) and "assertions" in data:
        scenario.assertions = list(data["assertions"])
        for i, a in enumerate(scenario.assertions):
            _check_assertion(scenario, a, f"{path}: assertions[{i}]")
    return plan, records


def _scenario(args):
    scenario = load_scenario(args.scenario)
    if getattr(args, "mutate", None):
        scenario = scenario.with_settings(mutations=frozenset(args.mutate))
    return scenario


def cmd_run(args) -> int:
    try:
        scenario = _scenario(args)
        plan, records = (None, scenario.fault_plan)
        if args.fault_plan:
            plan, records = _load_fault_file(scenario, args.fault_plan)
        sim, report = run_scenario(scenario, args.seed, plan)
    except ScenarioError as exc:
        _err(f"scenario error: {exc}")
        return 2
    for line in report.lines():
        _out(line)
    if args.out:
        write_outputs(sim, report, args.out, records)
        _out(f"artifacts written to {args.out}")
    return report.exit_code


def cmd_sweep(args) -> int:
    try:
        scenario = _scenario(args)
        report = sweep_faults(scenario, args.seed, args.restart_after)
    except ScenarioError as exc:
        _err(f"scenario error: {exc}")
        return 2
    for line in report.lines():
        _out(line)
    return 0 if report.ok else 1


def _read_ledger(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        _err(f"{path}: {exc}")
        return None, 2
    try:
        return parse_ledger(data), 0
    except LedgerFormatError as exc:
        _out(f"FAIL {exc}")
        return None, 1


def _check_chain(blocks) -> int:
    report = verify_chain(blocks)
    if not report.ok:
        _out(f"FAIL block {report.bad_block}: {report.reason}")
        return 1
    _out(f"chain ok: {len(blocks)} blocks, {sum(len(b.entries) for b in blocks)} entries")
    return 0


def cmd_verify_chain(args) -> int:
    blocks, status = _read_ledger(args.ledger)
    if blocks is None:
        return status
    return _check_chain(blocks)


def cmd_verify_anchors(args) -> int:
    blocks, status = _read_ledger(args.ledger)
    if blocks is None:
        return status
    if _check_chain(blocks):
        return 1
    try:
        lines = Path(args.history).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        _err(f"{args.history}: {exc}")
        return 2
    for n, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
            twin = twin_from_typed_record(rec["twin"], rec["types"])
            receipt = AnchorReceipt.from_record(rec["receipt"])
            digest = state_hash(twin)
            ok = digest == receipt.state_hash and verify_anchor(receipt, digest, blocks)
            where = f"{twin.id} v{twin.version}"
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, DtwinError) as exc:
            _out(f"FAIL history line {n}: {type(exc).__name__}: {exc}")
            return 1
        if not ok:
            _out(f"FAIL history line {n}: anchor of {where} does not verify")
            return 1
    _out(f"anchors ok: {len(lines)} receipts")
    return 0


def cmd_replay(args) -> int:
    out = Path(args.run_dir)
    try:
        run = json.loads((out / "run.json").read_text(encoding="utf-8"))
        scenario = load_scenario(run["scenario"])
        plan = FaultPlan.from_records(run["fault_plan"])
    except (OSError, KeyError, json.JSONDecodeError, ValueError) as exc:
        _err(f"cannot read run directory {out}: {exc}")
        return 2
    except ScenarioError as exc:
        _err(f"scenario error: {exc}")
        return 2
    shell = Network(run["seed"])
    nodes = {}
    try:
        for cfg in scenario.containers:
            shell.disks[cfg.container_id] = DurableLog.load(out / "containers" / f"{cfg.container_id}.log.jsonl")
            nodes[cfg.container_id] = DTContainer(cfg, shell)
    except (OSError, LogCorrupted, DtwinError, KeyError) as exc:
        _out(f"FAIL replaying container logs: {type(exc).__name__}: {exc}")
        return 1
    replayed = state_digest(nodes)
    _, fresh = run_scenario(scenario, run["seed"], plan)
    _out(f"replayed digest {replayed}")
    _out(f"fresh run digest {fresh.digest}")
    if replayed != fresh.digest:
        _out("FAIL replayed state diverges from a fresh run")
        return 1
    _out("replay ok: identical state digest")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtwin", description="Digital twin containers, witness ledger and LUW simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate twin definition files")
    p.add_argument("definitions", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run-scenario", help="run a scenario deterministically and check its assertions")
    p.add_argument("scenario", help="scenario directory (containing scenario.json) or file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault-plan", help="JSON fault plan (list, or object with fault_plan/assertions)")
    p.add_argument("--out", help="directory for events, ledger, history, container logs and report")
    p.add_argument("--mutate", action="append", choices=MUTATIONS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-faults", help="drop and crash at every protocol step of the fault-free run")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restart-after", type=int, default=30, help="ticks before a crashed container restarts")
    p.add_argument("--mutate", action="append", choices=MUTATIONS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-chain", help="recompute ledger block hashes and links")
    p.add_argument("ledger")
    p.set_defaults(func=cmd_verify_chain)

    p = sub.add_parser("verify-anchors", help="verify the chain and every anchor receipt in a history file")
    p.add_argument("ledger")
    p.add_argument("history")
    p.set_defaults(func=cmd_verify_anchors)

    p = sub.add_parser("replay", help="rebuild container state from a run directory and compare with a fresh run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
