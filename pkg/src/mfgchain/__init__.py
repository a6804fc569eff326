"""Permissioned blockchain for manufacturing service networks.

A compact, fully deterministic stack: canonical serialization and Ed25519
identities, proof-of-work and proof-of-authority sealing, three native
contract state machines (participant registry, per-participant history,
pairwise relationships), a discrete-event network simulator, a condition
oracle that drives actuators from confirmed chain state, and a latency
benchmark comparing the two sealing modes.
"""

from .codec import CanonicalizationError, ZERO_HASH, canonical_parse, canonical_serialize, hash_bytes, hash_value
from .keys import KeyPair, derive_address, generate_keypair, is_address, verify_signature
from .model import (
    Block,
    BlockHeader,
    Check,
    Transaction,
    Vote,
    make_block,
    make_genesis_block,
    make_transaction,
    validate_block_structure,
    verify_transaction,
)
from .consensus import block_weight, meets_target, pow_mine, pow_target, pow_validate, poa_validate
from .contracts import ContractError, ContractState, apply_block, genesis_state, state_root
from .chainview import ChainView, ReorgInfo, bootstrap
from .node import NetParams, Node, validate_block_for_view
from .simnet import NodeSpec, SimNetConfig, Simulation, derive_stream
from .oracle import ActuatorCommand, MachineEvent, Oracle, TriggerRule, VirtualTwin, batch_events
from .scenario import ConfigError, Scenario, build_simulation, load_scenario, parse_scenario
from .trace import TraceError, read_trace, rebuild_view, write_trace
from .bench import BenchmarkResult, BenchmarkSpec, run_benchmark
from .transport import LiveNetwork, LiveNode

__version__ = "0.1.0"

__all__ = [
    "ActuatorCommand",
    "Block",
    "BlockHeader",
    "BenchmarkResult",
    "BenchmarkSpec",
    "CanonicalizationError",
    "ChainView",
    "Check",
    "ConfigError",
    "ContractError",
    "ContractState",
    "KeyPair",
    "LiveNetwork",
    "LiveNode",
    "MachineEvent",
    "NetParams",
    "Node",
    "NodeSpec",
    "Oracle",
    "ReorgInfo",
    "Scenario",
    "SimNetConfig",
    "Simulation",
    "TraceError",
    "Transaction",
    "TriggerRule",
    "VirtualTwin",
    "Vote",
    "ZERO_HASH",
    "apply_block",
    "batch_events",
    "block_weight",
    "bootstrap",
    "build_simulation",
    "canonical_parse",
    "canonical_serialize",
    "derive_address",
    "derive_stream",
    "generate_keypair",
    "genesis_state",
    "hash_bytes",
    "hash_value",
    "is_address",
    "load_scenario",
    "make_block",
    "make_genesis_block",
    "make_transaction",
    "meets_target",
    "parse_scenario",
    "poa_validate",
    "pow_mine",
    "pow_target",
    "pow_validate",
    "read_trace",
    "rebuild_view",
    "run_benchmark",
    "state_root",
    "validate_block_for_view",
    "validate_block_structure",
    "verify_signature",
    "verify_transaction",
    "write_trace",
]
