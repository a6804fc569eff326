"""Scenario files: declarative descriptions of a simulated network run.

A scenario is a JSON document naming the participants (keyed identities
pre-registered at genesis), the nodes and their roles, consensus
parameters, network conditions, a transaction workload, and optionally an
oracle with trigger rules. ``"@name"`` strings anywhere in workload
payloads resolve to the named participant's or node's address.

Example shape::

    {
      "name": "quickstart",
      "seed": 7,
      "consensus": {"mode": "poa", "authorities": ["n1", "n2", "n3"],
                    "block_period_ms": 1000},
      "net": {"latency_ms": [10, 50], "drop_rate": 0.0},
      "genesis": {"timestamp_ms": 0,
                  "participants": [{"name": "alice", "key_seed": "alice-key"}]},
      "nodes": [{"name": "n1", "role": "authority", "key_seed": "n1-key"}],
      "workload": {"mode": "scripted", "items": [...]},
      "confirm_depth": 12,
      "duration_ms": 120000
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from .consensus import MODE_POA, MODE_POW
from .keys import KeyPair, derive_address, generate_keypair, is_address
from .model import OP_CONTRACT_CALL, make_transaction
from .node import NetParams, ROLE_AUTHORITY, ROLES
from .oracle import (
    ActuatorCommand,
    CommandSink,
    MachineEvent,
    Oracle,
    TriggerRule,
    twin_emit,
)
from .simnet import NodeSpec, SimNetConfig, Simulation


class ConfigError(ValueError):
    """Scenario file is malformed or internally inconsistent."""


@dataclass
class Scenario:
    name: str
    seed: int
    params: NetParams
    net: SimNetConfig
    node_specs: list[NodeSpec]
    genesis_participants: dict[str, str]  # address → public key hex
    genesis_timestamp: int
    keypairs: dict[str, KeyPair]  # participant/node name → signing key
    addresses: dict[str, str]  # participant/node name → address
    sync_interval_ms: int
    duration_ms: int
    attempt_time_ms: float
    workload: dict | None
    oracle_cfg: dict | None
    raw: dict = field(repr=False, default_factory=dict)

    def resolve(self, value: Any) -> Any:
        """Replace "@name" strings with addresses, recursively."""
        if isinstance(value, str) and value.startswith("@"):
            name = value[1:]
            try:
                return self.addresses[name]
            except KeyError:
                raise ConfigError(f"unknown name reference: {value}") from None
        if isinstance(value, list):
            return [self.resolve(v) for v in value]
        if isinstance(value, dict):
            return {k: self.resolve(v) for k, v in value.items()}
        return value


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def parse_scenario(doc: dict) -> Scenario:
    _require(isinstance(doc, dict), "scenario must be a JSON object")
    name = doc.get("name", "unnamed")
    seed = doc.get("seed", 0)
    _require(isinstance(seed, int), "seed must be an integer")

    consensus_cfg = doc.get("consensus")
    _require(isinstance(consensus_cfg, dict), "consensus section required")
    mode = consensus_cfg.get("mode")
    _require(mode in (MODE_POW, MODE_POA), "consensus.mode must be pow or poa")

    nodes_cfg = doc.get("nodes")
    _require(
        isinstance(nodes_cfg, list) and nodes_cfg, "at least one node required"
    )

    keypairs: dict[str, KeyPair] = {}
    addresses: dict[str, str] = {}

    genesis_cfg = doc.get("genesis", {})
    genesis_timestamp = genesis_cfg.get("timestamp_ms", 0)
    participants: dict[str, str] = {}
    for entry in genesis_cfg.get("participants", []):
        pname = entry.get("name")
        _require(isinstance(pname, str) and pname, "participant needs a name")
        _require(pname not in addresses, f"duplicate name: {pname}")
        if "key_seed" in entry:
            kp = generate_keypair(entry["key_seed"])
            keypairs[pname] = kp
            addresses[pname] = kp.address
            participants[kp.address] = kp.public_hex
        elif "public_key" in entry:
            # Known by key only; scenario workloads cannot sign for it.
            pub = bytes.fromhex(entry["public_key"])
            addresses[pname] = derive_address(pub)
            participants[addresses[pname]] = entry["public_key"]
        else:
            raise ConfigError(f"participant {pname} needs key_seed or public_key")

    node_specs: list[NodeSpec] = []
    node_addresses: dict[str, str] = {}
    for entry in nodes_cfg:
        nname = entry.get("name")
        _require(isinstance(nname, str) and nname, "node needs a name")
        _require(nname not in addresses, f"duplicate name: {nname}")
        role = entry.get("role")
        _require(role in ROLES, f"node {nname}: unknown role {role!r}")
        _require("key_seed" in entry, f"node {nname} needs key_seed")
        kp = generate_keypair(entry["key_seed"])
        _require(
            kp.address not in node_addresses.values(),
            f"duplicate node address for {nname}",
        )
        keypairs[nname] = kp
        addresses[nname] = kp.address
        node_addresses[nname] = kp.address
        crash = entry.get("crash_at_ms")
        _require(
            crash is None or (isinstance(crash, int) and crash >= 0),
            f"node {nname}: bad crash_at_ms",
        )
        node_specs.append(NodeSpec(nname, role, kp, crash))

    authorities: tuple[str, ...] = ()
    if mode == MODE_POA:
        auth_names = consensus_cfg.get("authorities")
        _require(
            isinstance(auth_names, list) and auth_names,
            "poa requires consensus.authorities",
        )
        for aname in auth_names:
            _require(aname in node_addresses, f"unknown authority node: {aname}")
        for spec in node_specs:
            in_set = spec.name in auth_names
            is_auth_role = spec.role == ROLE_AUTHORITY
            _require(
                in_set == is_auth_role,
                f"node {spec.name}: authority role and authority set must agree",
            )
        authorities = tuple(node_addresses[a] for a in auth_names)

    params = NetParams(
        mode=mode,
        difficulty_bits=consensus_cfg.get("difficulty_bits", 8),
        authorities=authorities,
        block_period_ms=consensus_cfg.get("block_period_ms", 1000),
        max_block_txs=doc.get("max_block_txs", 100),
        confirm_depth=doc.get("confirm_depth", 12),
    )
    _require(0 <= params.difficulty_bits <= 64, "difficulty_bits out of range")
    _require(params.block_period_ms > 0, "block_period_ms must be positive")
    _require(params.confirm_depth >= 1, "confirm_depth must be >= 1")

    net_cfg = doc.get("net", {})
    latency = net_cfg.get("latency_ms", [10, 50])
    _require(
        isinstance(latency, list) and len(latency) == 2,
        "net.latency_ms must be [min, max]",
    )
    try:
        net = SimNetConfig(
            latency_ms=(int(latency[0]), int(latency[1])),
            drop_rate=float(net_cfg.get("drop_rate", 0.0)),
            seed=seed,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None

    workload = doc.get("workload")
    if workload is not None:
        _require(isinstance(workload, dict), "workload must be an object")
        _require(
            workload.get("mode") in ("scripted", "sequential"),
            "workload.mode must be scripted or sequential",
        )

    oracle_cfg = doc.get("oracle")
    if oracle_cfg is not None:
        _require(isinstance(oracle_cfg, dict), "oracle must be an object")
        _require(
            oracle_cfg.get("node") in node_addresses,
            "oracle.node must name a node",
        )

    return Scenario(
        name=name,
        seed=seed,
        params=params,
        net=net,
        node_specs=node_specs,
        genesis_participants=participants,
        genesis_timestamp=genesis_timestamp,
        keypairs=keypairs,
        addresses=addresses,
        sync_interval_ms=doc.get("sync_interval_ms", 500),
        duration_ms=doc.get("duration_ms", 600_000),
        attempt_time_ms=float(consensus_cfg.get("attempt_time_ms", 1.0)),
        workload=workload,
        oracle_cfg=oracle_cfg,
        raw=doc,
    )


def load_scenario(path: str) -> Scenario:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read scenario: {err}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"scenario is not valid JSON: {err}") from None
    return parse_scenario(doc)


# ---------------------------------------------------------------------------
# Workload wiring
# ---------------------------------------------------------------------------

def _signer_for(scenario: Scenario, ref: str) -> KeyPair:
    _require(isinstance(ref, str) and ref.startswith("@"), f"bad signer ref: {ref!r}")
    name = ref[1:]
    kp = scenario.keypairs.get(name)
    _require(kp is not None, f"no signing key for {ref}")
    return kp


def _build_scripted_tx(scenario: Scenario, item: dict):
    signer = _signer_for(scenario, item.get("signer", ""))
    operation = item.get("operation", OP_CONTRACT_CALL)
    payload = scenario.resolve(item.get("payload"))
    _require(isinstance(payload, dict), "workload item needs a payload object")
    provider = scenario.resolve(item.get("service_provider", item.get("signer")))
    machine = scenario.resolve(item.get("machine", item.get("signer")))
    _require(is_address(provider) and is_address(machine), "bad workload addresses")
    timestamp = item.get("at", 0)
    try:
        return make_transaction(signer, provider, machine, operation, payload, timestamp)
    except ValueError as err:
        raise ConfigError(f"workload item invalid: {err}") from None


def _wire_scripted(scenario: Scenario, sim: Simulation) -> None:
    for item in scenario.workload.get("items", []):
        _require(isinstance(item, dict), "workload items must be objects")
        at = item.get("at", 0)
        _require(isinstance(at, int) and at >= 0, "workload item needs at >= 0")
        if "twin" in item:
            _wire_twin_item(scenario, sim, at, item["twin"])
            continue
        node_name = item.get("node")
        _require(node_name in sim.nodes, f"workload item on unknown node {node_name}")
        sim.add_scripted_tx(at, node_name, _build_scripted_tx(scenario, item))


def _wire_twin_item(scenario: Scenario, sim: Simulation, at: int, twin: dict) -> None:
    node_name = twin.get("node")
    _require(node_name in sim.nodes, f"twin on unknown node {node_name}")
    machine_ref = twin.get("machine", "")
    machine_key = _signer_for(scenario, machine_ref)
    events = [
        MachineEvent(
            machine=machine_key.address,
            state=e["state"],
            at=e["at"],
            duration_minutes=e["duration_minutes"],
        )
        for e in twin.get("events", [])
    ]
    batch_size = twin.get("batch_size", 4)
    txs = twin_emit(machine_key, events, batch_size, twin.get("power_kw", 1.0))
    for tx in txs:
        sim.add_scripted_tx(at, node_name, tx)


def _wire_sequential(scenario: Scenario, sim: Simulation) -> None:
    spec = scenario.workload
    node_name = spec.get("node")
    _require(node_name in sim.nodes, f"workload node unknown: {node_name}")
    count = spec.get("count", 20)
    _require(isinstance(count, int) and count > 0, "workload.count must be positive")
    signer = _signer_for(scenario, spec.get("signer", ""))
    template = spec.get("template")
    _require(isinstance(template, dict), "sequential workload needs a template")
    contract = template.get("contract")
    method = template.get("method")
    args = scenario.resolve(template.get("args", {}))
    think = tuple(spec.get("think_ms", [0, 500]))

    def make(i: int, now: int):
        call_args = dict(args)
        # Salt keeps repeated calls distinct where the method needs it.
        if contract == "relationship" and method == "open":
            call_args["terms"] = f"{call_args.get('terms', 'bench')} #{i}"
        payload = {"contract": contract, "method": method, "args": call_args}
        return make_transaction(
            signer,
            signer.address,
            signer.address,
            OP_CONTRACT_CALL,
            payload,
            now,
        )

    sim.set_sequential_workload(node_name, count, make, think)


def _wire_oracle(scenario: Scenario, sim: Simulation, sink: CommandSink | None) -> None:
    cfg = scenario.oracle_cfg
    node_name = cfg["node"]
    rules = []
    for rd in cfg.get("rules", []):
        action = rd.get("action", {})
        try:
            rules.append(
                TriggerRule(
                    rule_id=rd["rule_id"],
                    kind=rd["kind"],
                    action=ActuatorCommand(action["target"], action["command"]),
                    hex_pattern=rd.get("hex_pattern"),
                    machine=scenario.resolve(rd.get("machine")),
                    min_continuous_minutes=rd.get("min_continuous_minutes"),
                    min_confirmations=rd.get(
                        "min_confirmations", scenario.params.confirm_depth
                    ),
                )
            )
        except (KeyError, ValueError) as err:
            raise ConfigError(f"bad oracle rule: {err}") from None
    devices = cfg.get("devices") or sorted({r.action.target for r in rules})
    if sink is None:
        sink = CommandSink(cfg.get("sink"))
    orc = Oracle(
        sim.nodes[node_name],
        rules,
        devices,
        sink=sink,
        state_path=cfg.get("state_file"),
    )
    sim.attach_oracle(node_name, orc)


def build_simulation(
    scenario: Scenario, oracle_sink: CommandSink | None = None
) -> Simulation:
    """Instantiate a ready-to-run Simulation from a parsed scenario."""
    sim = Simulation(
        node_specs=scenario.node_specs,
        params=scenario.params,
        net=scenario.net,
        genesis_participants=scenario.genesis_participants,
        genesis_timestamp=scenario.genesis_timestamp,
        sync_interval_ms=scenario.sync_interval_ms,
        duration_ms=scenario.duration_ms,
        attempt_time_ms=scenario.attempt_time_ms,
        scenario_header={
            "name": scenario.name,
            "seed": scenario.seed,
            "mode": scenario.params.mode,
            "params": {
                "mode": scenario.params.mode,
                "difficulty_bits": scenario.params.difficulty_bits,
                "authorities": list(scenario.params.authorities),
                "block_period_ms": scenario.params.block_period_ms,
                "max_block_txs": scenario.params.max_block_txs,
                "confirm_depth": scenario.params.confirm_depth,
            },
        },
    )
    if scenario.workload is not None:
        if scenario.workload["mode"] == "scripted":
            _wire_scripted(scenario, sim)
        else:
            _wire_sequential(scenario, sim)
    if scenario.oracle_cfg is not None:
        _wire_oracle(scenario, sim, oracle_sink)
    return sim
