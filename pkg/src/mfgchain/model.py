"""Transaction and block data model with structural validation.

Transactions record manufacturing events (asset lifecycle, utilization
readings, capability attestations) or contract calls. Blocks batch
transactions under a header that commits to the parent block, the
ordered transaction ids, and the post-execution contract state root.

Identity rules:

* ``Transaction.id`` = hash of the canonical encoding of every field
  except ``id`` and ``signature``.
* ``Transaction.data_hash`` = hash of the canonical encoding of the
  payload alone.
* ``Block.id`` = hash of the canonical encoding of the header; the
  transactions are bound through ``header.tx_root``.

Signatures are made over the raw 32 bytes of the id being endorsed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Mapping

from .codec import ZERO_HASH, canonical_serialize, hash_bytes, hash_value
from .keys import KeyPair, derive_address, is_address, verify_signature

OP_CREATE = "Create"
OP_UTILIZATION = "Utilization"
OP_CAPABILITY = "Capability"
OP_CONTRACT_CALL = "ContractCall"
OPERATIONS = frozenset({OP_CREATE, OP_UTILIZATION, OP_CAPABILITY, OP_CONTRACT_CALL})

ASSET_ACTIONS = frozenset({"create", "upgrade", "service", "discontinue"})
MACHINE_STATES = frozenset({"ON", "OFF", "WORKING"})

TX_VERSION = 1


class PayloadError(ValueError):
    """Payload body does not match the schema for its operation."""


class AuthorizationError(ValueError):
    """Signer is not entitled to act for the given service provider."""


@dataclass(frozen=True)
class Check:
    """Validation outcome: truthy on success, carries a reason code on failure."""

    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


OK = Check(True)


def fail(reason: str) -> Check:
    return Check(False, reason)


# ---------------------------------------------------------------------------
# Payload schemas
# ---------------------------------------------------------------------------

def machine_asset_payload(action: str, machine_name: str, description: str) -> dict:
    return {"action": action, "machine_name": machine_name, "description": description}


def utilization_payload(
    *,
    oee: float,
    uptime_minutes: int,
    power_kwh: float,
    state: str,
    duration_minutes: int,
    readings: list[dict] | None = None,
) -> dict:
    body: dict[str, Any] = {
        "oee": oee,
        "uptime_minutes": uptime_minutes,
        "power_kwh": power_kwh,
        "state": state,
        "duration_minutes": duration_minutes,
    }
    if readings is not None:
        body["readings"] = readings
    return body


def capability_payload(
    materials: list[str], feature_classes: list[str], tolerance_um: float
) -> dict:
    return {
        "materials": list(materials),
        "feature_classes": list(feature_classes),
        "tolerance_um": tolerance_um,
    }


def contract_call_payload(contract: str, method: str, args: dict) -> dict:
    return {"contract": contract, "method": method, "args": args}


def _is_count(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _is_amount(value: object) -> bool:
    if isinstance(value, bool):
        return False
    return isinstance(value, (int, float)) and value >= 0


def _check_reading(entry: object) -> Check:
    if not isinstance(entry, dict) or set(entry) != {"state", "at", "duration_minutes"}:
        return fail("payload: bad reading shape")
    if entry["state"] not in MACHINE_STATES:
        return fail("payload: bad reading state")
    if not _is_count(entry["at"]) or not _is_count(entry["duration_minutes"]):
        return fail("payload: bad reading numbers")
    return OK


def validate_payload(operation: str, payload: object) -> Check:
    """Check that ``payload`` matches the schema of ``operation`` exactly."""
    if operation not in OPERATIONS:
        return fail("unknown operation")
    if not isinstance(payload, dict):
        return fail("payload: not a map")

    if operation == OP_CREATE:
        if set(payload) != {"action", "machine_name", "description"}:
            return fail("payload: field set mismatch")
        if payload["action"] not in ASSET_ACTIONS:
            return fail("payload: bad action")
        if not isinstance(payload["machine_name"], str) or not isinstance(
            payload["description"], str
        ):
            return fail("payload: bad field type")
        return OK

    if operation == OP_UTILIZATION:
        required = {"oee", "uptime_minutes", "power_kwh", "state", "duration_minutes"}
        if not required <= set(payload) or not set(payload) <= required | {"readings"}:
            return fail("payload: field set mismatch")
        oee = payload["oee"]
        if not _is_amount(oee) or oee > 1:
            return fail("payload: oee out of range")
        if not _is_count(payload["uptime_minutes"]):
            return fail("payload: bad uptime")
        if not _is_amount(payload["power_kwh"]):
            return fail("payload: bad power")
        if payload["state"] not in MACHINE_STATES:
            return fail("payload: bad state")
        if not _is_count(payload["duration_minutes"]):
            return fail("payload: bad duration")
        if "readings" in payload:
            if not isinstance(payload["readings"], list) or not payload["readings"]:
                return fail("payload: bad readings")
            for entry in payload["readings"]:
                check = _check_reading(entry)
                if not check:
                    return check
        return OK

    if operation == OP_CAPABILITY:
        if set(payload) != {"materials", "feature_classes", "tolerance_um"}:
            return fail("payload: field set mismatch")
        for key in ("materials", "feature_classes"):
            items = payload[key]
            if not isinstance(items, list) or not all(isinstance(s, str) for s in items):
                return fail("payload: bad list")
        tol = payload["tolerance_um"]
        if not _is_amount(tol) or tol <= 0:
            return fail("payload: bad tolerance")
        return OK

    # ContractCall
    if set(payload) != {"contract", "method", "args"}:
        return fail("payload: field set mismatch")
    if not isinstance(payload["contract"], str) or not isinstance(payload["method"], str):
        return fail("payload: bad field type")
    if not isinstance(payload["args"], dict):
        return fail("payload: bad args")
    return OK


def is_registration_call(operation: str, payload: Mapping[str, Any]) -> bool:
    return (
        operation == OP_CONTRACT_CALL
        and payload.get("contract") == "registry"
        and payload.get("method") == "register_participant"
    )


# ---------------------------------------------------------------------------
# Transactions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    id: str
    version: int
    service_provider: str
    machine: str
    operation: str
    timestamp: int
    data_hash: str
    payload: dict
    signature: str

    def preimage(self) -> dict:
        """Fields covered by the id hash (everything but id and signature)."""
        return {
            "version": self.version,
            "service_provider": self.service_provider,
            "machine": self.machine,
            "operation": self.operation,
            "timestamp": self.timestamp,
            "data_hash": self.data_hash,
            "payload": self.payload,
        }

    def to_dict(self) -> dict:
        out = self.preimage()
        out["id"] = self.id
        out["signature"] = self.signature
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Transaction":
        return cls(
            id=data["id"],
            version=data["version"],
            service_provider=data["service_provider"],
            machine=data["machine"],
            operation=data["operation"],
            timestamp=data["timestamp"],
            data_hash=data["data_hash"],
            payload=data["payload"],
            signature=data["signature"],
        )


def transaction_id(preimage: Mapping[str, Any]) -> str:
    return hash_value(dict(preimage))


def make_transaction(
    signer: KeyPair,
    service_provider: str,
    machine: str,
    operation: str,
    payload: dict,
    timestamp: int,
) -> Transaction:
    """Build and sign a transaction.

    The signer's key must derive the service provider address; delegation
    is not supported.
    """
    check = validate_payload(operation, payload)
    if not check:
        raise PayloadError(check.reason or "invalid payload")
    if signer.address != service_provider:
        raise AuthorizationError(
            f"signer address {signer.address} does not match provider {service_provider}"
        )
    if not is_address(machine):
        raise PayloadError("machine is not an address")
    data_hash = hash_value(payload)
    draft = Transaction(
        id="",
        version=TX_VERSION,
        service_provider=service_provider,
        machine=machine,
        operation=operation,
        timestamp=timestamp,
        data_hash=data_hash,
        payload=payload,
        signature="",
    )
    tx_id = transaction_id(draft.preimage())
    signature = signer.sign(bytes.fromhex(tx_id)).hex()
    return replace(draft, id=tx_id, signature=signature)


def verify_transaction(tx: Transaction, registry: Mapping[str, str]) -> Check:
    """Full transaction check against a registry of address -> public key hex.

    A registration call from a not-yet-registered address verifies against
    the public key embedded in its own arguments, provided that key derives
    the sender address. Everything else requires a registered key.
    """
    check = validate_payload(tx.operation, tx.payload)
    if not check:
        return check
    if tx.version != TX_VERSION:
        return fail("version")
    if hash_value(tx.payload) != tx.data_hash:
        return fail("data-hash")
    if transaction_id(tx.preimage()) != tx.id:
        return fail("id")

    public_hex = registry.get(tx.service_provider)
    if public_hex is None:
        if is_registration_call(tx.operation, tx.payload):
            candidate = tx.payload["args"].get("public_key")
            if isinstance(candidate, str):
                try:
                    raw = bytes.fromhex(candidate)
                except ValueError:
                    return fail("unregistered signer")
                if derive_address(raw) == tx.service_provider:
                    public_hex = candidate
        if public_hex is None:
            return fail("unregistered signer")

    try:
        public = bytes.fromhex(public_hex)
        signature = bytes.fromhex(tx.signature)
        message = bytes.fromhex(tx.id)
    except ValueError:
        return fail("signature")
    if not verify_signature(public, message, signature):
        return fail("signature")
    return OK


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockHeader:
    prev_block: str
    timestamp: int
    tx_root: str
    node_pubkey: str
    state_root: str
    nonce: int
    difficulty: int

    def to_dict(self) -> dict:
        return {
            "prev_block": self.prev_block,
            "timestamp": self.timestamp,
            "tx_root": self.tx_root,
            "node_pubkey": self.node_pubkey,
            "state_root": self.state_root,
            "nonce": self.nonce,
            "difficulty": self.difficulty,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BlockHeader":
        return cls(
            prev_block=data["prev_block"],
            timestamp=data["timestamp"],
            tx_root=data["tx_root"],
            node_pubkey=data["node_pubkey"],
            state_root=data["state_root"],
            nonce=data["nonce"],
            difficulty=data["difficulty"],
        )


@dataclass(frozen=True)
class Vote:
    public_key: str
    signature: str

    def to_dict(self) -> dict:
        return {"public_key": self.public_key, "signature": self.signature}


@dataclass(frozen=True)
class Block:
    id: str
    header: BlockHeader
    transactions: tuple[Transaction, ...]
    signature: str
    votes: tuple[Vote, ...]

    @property
    def sealer_address(self) -> str:
        return derive_address(bytes.fromhex(self.header.node_pubkey))

    def is_genesis(self) -> bool:
        return self.header.prev_block == ZERO_HASH

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "header": self.header.to_dict(),
            "transactions": [tx.to_dict() for tx in self.transactions],
            "signature": self.signature,
            "votes": [v.to_dict() for v in self.votes],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Block":
        return cls(
            id=data["id"],
            header=BlockHeader.from_dict(data["header"]),
            transactions=tuple(Transaction.from_dict(t) for t in data["transactions"]),
            signature=data["signature"],
            votes=tuple(Vote(v["public_key"], v["signature"]) for v in data["votes"]),
        )


def compute_tx_root(tx_ids: list[str]) -> str:
    """Flat hash over the concatenated ordered transaction ids."""
    return hash_bytes("".join(tx_ids).encode("ascii"))


def block_id(header: BlockHeader) -> str:
    return hash_value(header.to_dict())


def make_block(
    parent: Block,
    txs: list[Transaction],
    sealer: KeyPair,
    state_root: str,
    timestamp: int,
    nonce: int = 0,
    difficulty: int = 0,
) -> Block:
    """Assemble and seal a block on top of ``parent``. Votes start empty."""
    if not parent.id:
        raise ValueError("parent block has no id")
    if timestamp <= parent.header.timestamp:
        raise ValueError("block timestamp must exceed parent timestamp")
    header = BlockHeader(
        prev_block=parent.id,
        timestamp=timestamp,
        tx_root=compute_tx_root([tx.id for tx in txs]),
        node_pubkey=sealer.public_hex,
        state_root=state_root,
        nonce=nonce,
        difficulty=difficulty,
    )
    bid = block_id(header)
    signature = sealer.sign(bytes.fromhex(bid)).hex()
    return Block(
        id=bid,
        header=header,
        transactions=tuple(txs),
        signature=signature,
        votes=(),
    )


def make_genesis_block(state_root: str, timestamp: int) -> Block:
    """The unsigned genesis block shared by every node of a network."""
    header = BlockHeader(
        prev_block=ZERO_HASH,
        timestamp=timestamp,
        tx_root=compute_tx_root([]),
        node_pubkey="",
        state_root=state_root,
        nonce=0,
        difficulty=0,
    )
    return Block(id=block_id(header), header=header, transactions=(), signature="", votes=())


def validate_block_structure(
    block: Block, parent: Block, registry: Mapping[str, str]
) -> Check:
    """Structure-level block validation (consensus checks live elsewhere).

    Verifies linkage, id recomputation, tx_root, timestamp monotonicity,
    every transaction, and the sealer signature, each with its own reason
    code.
    """
    if block.header.prev_block != parent.id:
        return fail("linkage")
    if block.header.timestamp <= parent.header.timestamp:
        return fail("timestamp")
    if block_id(block.header) != block.id:
        return fail("id")
    tx_ids = [tx.id for tx in block.transactions]
    if compute_tx_root(tx_ids) != block.header.tx_root:
        return fail("tx_root")
    if len(set(tx_ids)) != len(tx_ids):
        return fail("tx-duplicate")
    for i, tx in enumerate(block.transactions):
        check = verify_transaction(tx, registry)
        if not check:
            return fail(f"tx:{i}:{check.reason}")
    try:
        sealer_key = bytes.fromhex(block.header.node_pubkey)
        signature = bytes.fromhex(block.signature)
    except ValueError:
        return fail("sealer-signature")
    if not verify_signature(sealer_key, bytes.fromhex(block.id), signature):
        return fail("sealer-signature")
    return OK


def serialize_block(block: Block) -> bytes:
    """Canonical wire/file encoding of a block."""
    return canonical_serialize(block.to_dict())


def serialize_transaction(tx: Transaction) -> bytes:
    """Canonical wire/file encoding of a transaction."""
    return canonical_serialize(tx.to_dict())
