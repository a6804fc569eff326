"""Command-line entry point: run scenarios, inspect traces, benchmark.

Exit codes: 0 success, 1 validation/config error, 2 convergence failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from .bench import BenchError, BenchmarkSpec, run_benchmark
from .contracts import ContractError, get_history
from .keys import generate_keypair, is_address
from .model import Transaction
from .scenario import ConfigError, Scenario, build_simulation, load_scenario
from .simnet import trace_to_bytes
from .trace import TraceError, end_record, read_trace, rebuild_view
from .transport import LiveNetwork

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NO_CONVERGENCE = 2


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# keygen / genesis
# ---------------------------------------------------------------------------

def cmd_keygen(args) -> int:
    kp = generate_keypair(args.seed)
    info = {
        "address": kp.address,
        "public_key": kp.public_hex,
        "private_key": kp.private_key.hex(),
    }
    if args.format == "json":
        _print_json(info)
    else:
        print(f"address     {info['address']}")
        print(f"public key  {info['public_key']}")
        print(f"private key {info['private_key']}")
        if args.seed is not None:
            print(f"(derived deterministically from seed {args.seed!r})")
    return EXIT_OK


def cmd_genesis(args) -> int:
    participants = []
    for spec in args.participant:
        name, sep, seed = spec.partition("=")
        if not sep or not name:
            print(f"error: bad participant {spec!r}, want name=key_seed", file=sys.stderr)
            return EXIT_CONFIG
        kp = generate_keypair(seed)
        participants.append(
            {"name": name, "address": kp.address, "public_key": kp.public_hex}
        )
    doc = {
        "timestamp_ms": args.timestamp,
        "participants": participants,
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.output} ({len(participants)} participants)")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    if args.live:
        return _run_live(scenario, args)

    try:
        sim = build_simulation(scenario)
    except (ConfigError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    trace = sim.run()
    trace_path = args.trace or f"{scenario.name}.trace"
    with open(trace_path, "wb") as fh:
        fh.write(trace_to_bytes(trace))
    end = end_record(trace) or {}
    status = "converged" if sim.converged else "DID NOT CONVERGE"
    print(
        f"{scenario.name}: {status} at t={end.get('at', '?')} ms,"
        f" heights={end.get('heights')}, trace → {trace_path}"
    )
    if not sim.converged:
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def _run_live(scenario: Scenario, args) -> int:
    if scenario.params.mode == "poa" and len(scenario.params.authorities) > 1:
        print(
            "config error: live transport supports a single authority;"
            " use the simulator for multi-authority runs",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    if scenario.workload is not None and scenario.workload.get("mode") != "scripted":
        print("config error: live mode runs scripted workloads only", file=sys.stderr)
        return EXIT_CONFIG

    specs = [(s.name, s.identity, s.role) for s in scenario.node_specs]
    net = LiveNetwork(
        specs,
        scenario.params,
        scenario.genesis_participants,
        scenario.genesis_timestamp,
        seed=scenario.seed,
    )
    from .scenario import _build_scripted_tx  # same construction as simulation

    items = []
    if scenario.workload is not None:
        for item in scenario.workload.get("items", []):
            if "twin" in item:
                print("config error: twin items are simulator-only", file=sys.stderr)
                return EXIT_CONFIG
            items.append((item.get("at", 0), item["node"], _build_scripted_tx(scenario, item)))
    items.sort(key=lambda t: t[0])

    net.start()
    submitted: list[str] = []
    start = time.monotonic()
    try:
        for at_ms, node_name, tx in items:
            delay = at_ms / 1000.0 - (time.monotonic() - start)
            if delay > 0:
                time.sleep(delay)
            check = net.nodes[node_name].submit(tx)
            if check:
                submitted.append(tx.id)
        ok = net.wait_converged(
            submitted,
            depth=scenario.params.confirm_depth,
            timeout_s=scenario.duration_ms / 1000.0,
        )
    finally:
        net.stop()

    trace_path = args.trace or f"{scenario.name}.trace"
    with open(trace_path, "wb") as fh:
        fh.write(trace_to_bytes(net.trace.records))
    snapshots = {n: node.snapshot() for n, node in net.nodes.items()}
    print(f"{scenario.name} (live): {'converged' if ok else 'DID NOT CONVERGE'}")
    for name, snap in snapshots.items():
        print(f"  {name}: height={snap['height']} tip={snap['tip'][:16]}…")
    return EXIT_OK if ok else EXIT_NO_CONVERGENCE


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def _load_view(trace_path: str):
    records = read_trace(trace_path)
    view, params = rebuild_view(records)
    return records, view, params


def cmd_inspect(args) -> int:
    try:
        records, view, params = _load_view(args.trace)
    except (OSError, TraceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    query = args.query
    try:
        if query == "chain":
            return _inspect_chain(args, view)
        if query == "block":
            return _inspect_block(args, view)
        if query == "history":
            return _inspect_history(args, view)
        if query == "machines":
            return _inspect_machines(args, view)
        if query == "relationships":
            return _inspect_relationships(args, view)
    except ContractError as err:
        print(f"not found: {err.reason}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"error: unknown query {query!r}", file=sys.stderr)
    return EXIT_CONFIG


def _inspect_chain(args, view) -> int:
    if args.format == "json":
        _print_json(view.summary())
        return EXIT_OK
    s = view.summary()
    print(
        f"height {s['height']}, {s['blocks']} blocks known,"
        f" {len(s['tips'])} tip(s), state root {s['state_root'][:16]}…"
    )
    for h, block_id in enumerate(view.canonical_chain()):
        block = view.blocks[block_id]
        sealer = "genesis" if block.is_genesis() else block.sealer_address[:10] + "…"
        print(
            f"  #{h:<4} {block_id[:16]}… txs={len(block.transactions):<3}"
            f" t={block.header.timestamp:<8} sealer={sealer}"
        )
    return EXIT_OK


def _inspect_block(args, view) -> int:
    if not args.target:
        print("error: block query needs an id", file=sys.stderr)
        return EXIT_CONFIG
    matches = [b for b in view.blocks if b.startswith(args.target)]
    if len(matches) != 1:
        print(f"not found: block {args.target!r}", file=sys.stderr)
        return EXIT_CONFIG
    block = view.blocks[matches[0]]
    data = block.to_dict()
    data["receipts"] = view.receipts.get(block.id, [])
    data["height"] = view.height_of(block.id)
    data["canonical"] = view.is_canonical(block.id)
    if args.format == "json":
        _print_json(data)
    else:
        print(f"block {block.id}")
        print(f"  height {data['height']} canonical={data['canonical']}")
        print(f"  parent {block.header.prev_block}")
        print(f"  sealer {'genesis' if block.is_genesis() else block.sealer_address}")
        print(f"  votes  {len(block.votes)}")
        print(f"  state  {block.header.state_root}")
        for tx, receipt in zip(block.transactions, data["receipts"]):
            note = receipt.get("note", "")
            flag = "ok " if receipt.get("ok") else "ERR"
            print(f"    {flag} {tx.id[:16]}… {tx.operation:<13} {note}")
    return EXIT_OK


def _inspect_history(args, view) -> int:
    address = args.target
    if not address or not is_address(address):
        print("error: history query needs an address", file=sys.stderr)
        return EXIT_CONFIG
    state = view.canonical_state()
    events = get_history(state, address)  # raises ContractError("not registered")
    if args.format == "json":
        _print_json([e.to_dict() for e in events])
        return EXIT_OK
    print(f"history of {address} ({len(events)} events)")
    for e in events:
        other = f" with {e.counterparty[:10]}…" if e.counterparty else ""
        print(f"  seq {e.seq:<3} block {e.at_block:<4} {e.kind:<20}{other} {e.summary}")
    return EXIT_OK


def _inspect_machines(args, view) -> int:
    address = args.target
    if not address or not is_address(address):
        print("error: machines query needs an address", file=sys.stderr)
        return EXIT_CONFIG
    vendor = view.canonical_state().vendors.get(address)
    if vendor is None or not vendor.is_exists:
        print("not found: not a vendor", file=sys.stderr)
        return EXIT_CONFIG
    if args.format == "json":
        _print_json(vendor.to_dict())
        return EXIT_OK
    print(f"vendor {address}: {vendor.nom} machine(s)")
    for i, m in enumerate(vendor.machines):
        state = "active" if m.status else "inactive"
        print(
            f"  [{i}] {m.mname} mac={m.mac} {state}"
            f" available={m.available_time}min rate={m.m_rate}/h"
        )
    return EXIT_OK


def _inspect_relationships(args, view) -> int:
    rels = sorted(view.canonical_state().relationships.values(), key=lambda r: r.rel_id)
    if args.format == "json":
        _print_json([r.to_dict() for r in rels])
        return EXIT_OK
    print(f"{len(rels)} relationship(s)")
    for r in rels:
        print(
            f"  {r.rel_id[:16]}… {r.status:<10}"
            f" {r.party_a[:10]}… ↔ {r.party_b[:10]}… {r.terms}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    modes = ("poa", "pow") if args.modes == "both" else (args.modes,)
    try:
        spec = BenchmarkSpec(
            modes=modes,
            invocations_per_run=args.invocations,
            runs=args.runs,
            confirm_depth=args.confirm_depth,
            seed=args.seed,
            poa_period_ms=args.poa_period_ms,
            pow_difficulty_bits=args.pow_difficulty_bits,
            pow_attempt_time_ms=args.pow_attempt_time_ms,
        )
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    def progress(mode, run, seed):
        if not args.quiet:
            print(f"  {mode} run {run + 1}/{spec.runs} done (seed {seed})", file=sys.stderr)

    try:
        result = run_benchmark(spec, progress=progress)
    except BenchError as err:
        print(f"benchmark aborted: {err}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE

    print(result.summary_table())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(result.to_csv())
        print(f"raw samples → {args.csv}")
    else:
        print(result.to_csv(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgchain",
        description="Permissioned manufacturing-event blockchain: simulator,"
        " inspector, and consensus benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a keypair and address")
    p.add_argument("--seed", help="deterministic derivation seed (omit for random)")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("genesis", help="emit a genesis file from a participant list")
    p.add_argument(
        "participant",
        nargs="+",
        help="participants as name=key_seed",
    )
    p.add_argument("--timestamp", type=int, default=0, help="genesis time (ms)")
    p.add_argument("-o", "--output", help="write JSON here instead of stdout")
    p.set_defaults(fn=cmd_genesis)

    p = sub.add_parser("run", help="execute a scenario file")
    p.add_argument("scenario", help="path to a scenario JSON file")
    p.add_argument("--trace", help="trace output path (default <name>.trace)")
    p.add_argument(
        "--live",
        action="store_true",
        help="wall clock + TCP on localhost instead of the simulator",
    )
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("inspect", help="query a trace file")
    p.add_argument("trace", help="trace file from a previous run")
    p.add_argument(
        "query",
        choices=("chain", "block", "history", "machines", "relationships"),
    )
    p.add_argument("target", nargs="?", help="block id prefix or address")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("bench", help="sealing-mode latency comparison")
    p.add_argument("--modes", choices=("both", "poa", "pow"), default="both")
    p.add_argument("--invocations", type=int, default=20, help="txs per run")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--confirm-depth", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--poa-period-ms", type=int, default=1000)
    p.add_argument("--pow-difficulty-bits", type=int, default=10)
    p.add_argument("--pow-attempt-time-ms", type=float, default=7.8125)
    p.add_argument("--csv", help="write raw per-tx samples to this file")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
