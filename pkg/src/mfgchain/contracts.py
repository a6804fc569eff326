"""Replicated contract state: registry, participant history, relationships.

Three cooperating state machines executed identically by every node while
applying a block:

* a registrar mapping participant addresses to public keys and vendors to
  their machine inventories,
* per-participant append-only event histories (the "credit report"),
* business-relationship records with a current/voided/completed lifecycle.

All state is immutable; every mutation returns a new ``ContractState``
sharing unchanged substructure. ``state_root`` is the hash of the
canonical serialization of the whole state, so two nodes that applied the
same blocks can prove it by comparing one hex string.

Contract calls arrive as transactions with ``operation="ContractCall"``;
execution failures are recorded in a receipt and skipped — they never
invalidate the enclosing block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

from .codec import ZERO_HASH, hash_value
from .model import (
    Block,
    OP_CAPABILITY,
    OP_CONTRACT_CALL,
    OP_CREATE,
    OP_UTILIZATION,
    Transaction,
    is_registration_call,
)

EV_REGISTERED = "Registered"
EV_MACHINE_ADDED = "MachineAdded"
EV_HOURS_PURCHASED = "HoursPurchased"
EV_UTILIZATION = "UtilizationReported"
EV_CAPABILITY = "CapabilityAttested"
EV_REL_OPENED = "RelationshipOpened"
EV_REL_CLOSED = "RelationshipClosed"

REL_CURRENT = "current"
REL_VOIDED = "voided"
REL_COMPLETED = "completed"
REL_OUTCOMES = frozenset({REL_VOIDED, REL_COMPLETED})

MINUTES_PER_HOUR = 60


class ContractError(Exception):
    """Raised by contract operations; ``reason`` is a stable machine code."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class MachineRecord:
    mname: str
    mac: str
    status: bool
    available_time: int
    m_rate: int

    def to_dict(self) -> dict:
        return {
            "mname": self.mname,
            "mac": self.mac,
            "status": self.status,
            "available_time": self.available_time,
            "m_rate": self.m_rate,
        }


@dataclass(frozen=True)
class VendorRecord:
    owner: str
    machines: tuple[MachineRecord, ...] = ()
    is_exists: bool = True

    @property
    def nom(self) -> int:
        return len(self.machines)

    def to_dict(self) -> dict:
        return {
            "is_exists": self.is_exists,
            "nom": self.nom,
            "machines": [m.to_dict() for m in self.machines],
        }


@dataclass(frozen=True)
class HistoricalEvent:
    seq: int
    at_block: int
    tx_id: str
    kind: str
    counterparty: str | None
    summary: str

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "at_block": self.at_block,
            "tx_id": self.tx_id,
            "kind": self.kind,
            "counterparty": self.counterparty,
            "summary": self.summary,
        }


@dataclass(frozen=True)
class Relationship:
    rel_id: str
    party_a: str
    party_b: str
    terms: str
    status: str
    external_pointer: str | None = None

    def parties(self) -> tuple[str, str]:
        return (self.party_a, self.party_b)

    def to_dict(self) -> dict:
        return {
            "rel_id": self.rel_id,
            "party_a": self.party_a,
            "party_b": self.party_b,
            "terms": self.terms,
            "status": self.status,
            "external_pointer": self.external_pointer,
        }


@dataclass(frozen=True)
class ContractState:
    keys: dict[str, str] = field(default_factory=dict)
    vendors: dict[str, VendorRecord] = field(default_factory=dict)
    histories: dict[str, tuple[HistoricalEvent, ...]] = field(default_factory=dict)
    relationships: dict[str, Relationship] = field(default_factory=dict)

    def is_registered(self, address: str) -> bool:
        return address in self.keys

    def to_dict(self) -> dict:
        return {
            "registrar": {
                "keys": dict(self.keys),
                "vendors": {a: v.to_dict() for a, v in self.vendors.items()},
            },
            "histories": {
                a: [e.to_dict() for e in events] for a, events in self.histories.items()
            },
            "relationships": {r: rel.to_dict() for r, rel in self.relationships.items()},
        }


def state_root(state: ContractState) -> str:
    return hash_value(state.to_dict())


@dataclass(frozen=True)
class CallContext:
    """Execution context a contract call runs under."""

    caller: str
    tx_id: str
    at_block: int


def _append_event(
    state: ContractState,
    participant: str,
    kind: str,
    ctx: CallContext,
    counterparty: str | None = None,
    summary: str = "",
) -> ContractState:
    stream = state.histories.get(participant, ())
    event = HistoricalEvent(
        seq=len(stream) + 1,
        at_block=ctx.at_block,
        tx_id=ctx.tx_id,
        kind=kind,
        counterparty=counterparty,
        summary=summary,
    )
    histories = dict(state.histories)
    histories[participant] = stream + (event,)
    return replace(state, histories=histories)


# ---------------------------------------------------------------------------
# Registrar operations
# ---------------------------------------------------------------------------

def register_participant(
    state: ContractState, ctx: CallContext, public_key: str
) -> ContractState:
    if state.is_registered(ctx.caller):
        raise ContractError("duplicate registration")
    keys = dict(state.keys)
    keys[ctx.caller] = public_key
    vendors = dict(state.vendors)
    vendors[ctx.caller] = VendorRecord(owner=ctx.caller)
    state = replace(state, keys=keys, vendors=vendors)
    return _append_event(state, ctx.caller, EV_REGISTERED, ctx, summary="joined network")


def add_machine(
    state: ContractState,
    ctx: CallContext,
    mname: str,
    mac: str,
    status: bool,
    available_time: int,
    m_rate: int,
) -> ContractState:
    vendor = state.vendors.get(ctx.caller)
    if vendor is None or not vendor.is_exists:
        raise ContractError("not a vendor")
    if any(m.mac == mac for m in vendor.machines):
        raise ContractError("duplicate machine")
    if available_time < 0 or m_rate < 0:
        raise ContractError("bad args")
    record = MachineRecord(mname, mac, status, available_time, m_rate)
    vendors = dict(state.vendors)
    vendors[ctx.caller] = replace(vendor, machines=vendor.machines + (record,))
    state = replace(state, vendors=vendors)
    return _append_event(
        state, ctx.caller, EV_MACHINE_ADDED, ctx, summary=f"{mname} ({mac})"
    )


def set_machine_status(
    state: ContractState, ctx: CallContext, mac: str, status: bool
) -> ContractState:
    """Flip a machine's active flag. Discontinuation keeps the record."""
    vendor = state.vendors.get(ctx.caller)
    if vendor is None or not vendor.is_exists:
        raise ContractError("not a vendor")
    for i, machine in enumerate(vendor.machines):
        if machine.mac == mac:
            machines = (
                vendor.machines[:i]
                + (replace(machine, status=status),)
                + vendor.machines[i + 1 :]
            )
            vendors = dict(state.vendors)
            vendors[ctx.caller] = replace(vendor, machines=machines)
            return replace(state, vendors=vendors)
    raise ContractError("no such machine")


def get_machine_info(
    state: ContractState, vendor_address: str, index: int
) -> tuple[str, bool, int, str]:
    vendor = state.vendors.get(vendor_address)
    if vendor is None or not vendor.is_exists:
        raise ContractError("not a vendor")
    if not 0 <= index < vendor.nom:
        raise ContractError("no such machine")
    m = vendor.machines[index]
    return (m.mname, m.status, m.m_rate, m.mac)


def get_number_of_machines(state: ContractState, vendor_address: str) -> int:
    vendor = state.vendors.get(vendor_address)
    if vendor is None or not vendor.is_exists:
        raise ContractError("not a vendor")
    return vendor.nom


def buy_hours(
    state: ContractState, ctx: CallContext, seller: str, mac: str, hours: int
) -> ContractState:
    """Purchase machine time: debit availability, record on both histories,
    and open a current relationship referencing the purchase."""
    buyer = ctx.caller
    if not state.is_registered(buyer):
        raise ContractError("not registered")
    vendor = state.vendors.get(seller)
    if vendor is None or not vendor.is_exists:
        raise ContractError("seller is not a registered vendor")
    if not isinstance(hours, int) or isinstance(hours, bool) or hours <= 0:
        raise ContractError("bad args")

    index = next((i for i, m in enumerate(vendor.machines) if m.mac == mac), None)
    if index is None:
        raise ContractError("no such machine")
    machine = vendor.machines[index]
    if not machine.status:
        raise ContractError("machine inactive")
    minutes = hours * MINUTES_PER_HOUR
    if machine.available_time < minutes:
        raise ContractError("insufficient availability")

    machines = (
        vendor.machines[:index]
        + (replace(machine, available_time=machine.available_time - minutes),)
        + vendor.machines[index + 1 :]
    )
    vendors = dict(state.vendors)
    vendors[seller] = replace(vendor, machines=machines)
    state = replace(state, vendors=vendors)

    summary = f"{hours}h on {mac}"
    state = _append_event(
        state, buyer, EV_HOURS_PURCHASED, ctx, counterparty=seller, summary=summary
    )
    state = _append_event(
        state, seller, EV_HOURS_PURCHASED, ctx, counterparty=buyer, summary=summary
    )

    rel = Relationship(
        rel_id=derive_rel_id(buyer, seller, summary, ctx.tx_id),
        party_a=buyer,
        party_b=seller,
        terms=f"machine-time purchase: {summary}",
        status=REL_CURRENT,
    )
    relationships = dict(state.relationships)
    relationships[rel.rel_id] = rel
    return replace(state, relationships=relationships)


# ---------------------------------------------------------------------------
# History reads
# ---------------------------------------------------------------------------

def get_history(
    state: ContractState,
    participant: str,
    from_seq: int = 0,
    limit: int | None = None,
) -> list[HistoricalEvent]:
    """Events with seq > from_seq, in order, at most ``limit`` of them.

    ``from_seq`` is an exclusive resume token: passing the seq of the last
    event you saw walks the stream without gaps or duplicates.
    """
    if not state.is_registered(participant):
        raise ContractError("not registered")
    events = [e for e in state.histories.get(participant, ()) if e.seq > from_seq]
    if limit is not None:
        events = events[:limit]
    return events


def can_read_history(
    state: ContractState,
    requester: str,
    subject: str,
    regulators: Iterable[str] = (),
) -> bool:
    """Read-time access policy: self, a regulator, or a current partner.

    Per-node policy, not consensus-critical; nodes replicate all state and
    apply this at their read interfaces.
    """
    if requester == subject or requester in set(regulators):
        return True
    return any(
        rel.status == REL_CURRENT and {requester, subject} == set(rel.parties())
        for rel in state.relationships.values()
    )


# ---------------------------------------------------------------------------
# Relationship operations
# ---------------------------------------------------------------------------

def derive_rel_id(party_a: str, party_b: str, terms: str, opening_tx_id: str) -> str:
    return hash_value([party_a, party_b, terms, opening_tx_id])


def open_relationship(
    state: ContractState,
    ctx: CallContext,
    counterparty: str,
    terms: str,
    external_pointer: str | None = None,
) -> tuple[ContractState, str]:
    caller = ctx.caller
    if caller == counterparty:
        raise ContractError("self-relationship")
    if not state.is_registered(caller) or not state.is_registered(counterparty):
        raise ContractError("not registered")
    rel = Relationship(
        rel_id=derive_rel_id(caller, counterparty, terms, ctx.tx_id),
        party_a=caller,
        party_b=counterparty,
        terms=terms,
        status=REL_CURRENT,
        external_pointer=external_pointer,
    )
    relationships = dict(state.relationships)
    relationships[rel.rel_id] = rel
    state = replace(state, relationships=relationships)
    summary = f"rel {rel.rel_id[:12]}: {terms}"
    state = _append_event(
        state, caller, EV_REL_OPENED, ctx, counterparty=counterparty, summary=summary
    )
    state = _append_event(
        state, counterparty, EV_REL_OPENED, ctx, counterparty=caller, summary=summary
    )
    return state, rel.rel_id


def close_relationship(
    state: ContractState, ctx: CallContext, rel_id: str, outcome: str
) -> ContractState:
    rel = state.relationships.get(rel_id)
    if rel is None:
        raise ContractError("unknown relationship")
    if ctx.caller not in rel.parties():
        raise ContractError("not a party")
    if rel.status != REL_CURRENT:
        raise ContractError("already closed")
    if outcome not in REL_OUTCOMES:
        raise ContractError("bad outcome")
    relationships = dict(state.relationships)
    relationships[rel_id] = replace(rel, status=outcome)
    state = replace(state, relationships=relationships)
    other = rel.party_b if ctx.caller == rel.party_a else rel.party_a
    summary = f"rel {rel_id[:12]}: {outcome}"
    state = _append_event(
        state, ctx.caller, EV_REL_CLOSED, ctx, counterparty=other, summary=summary
    )
    state = _append_event(
        state, other, EV_REL_CLOSED, ctx, counterparty=ctx.caller, summary=summary
    )
    return state


# ---------------------------------------------------------------------------
# Call dispatch and block application
# ---------------------------------------------------------------------------

_METHOD_ARGS: dict[tuple[str, str], tuple[frozenset[str], frozenset[str]]] = {
    # (contract, method): (required args, optional args)
    ("registry", "register_participant"): (frozenset({"public_key"}), frozenset()),
    ("registry", "add_machine"): (
        frozenset({"mname", "mac", "status", "available_time", "m_rate"}),
        frozenset(),
    ),
    ("registry", "set_machine_status"): (frozenset({"mac", "status"}), frozenset()),
    ("registry", "buy_hours"): (frozenset({"seller", "mac", "hours"}), frozenset()),
    ("relationship", "open"): (
        frozenset({"counterparty", "terms"}),
        frozenset({"external_pointer"}),
    ),
    ("relationship", "close"): (frozenset({"rel_id", "outcome"}), frozenset()),
}


def _check_args(contract: str, method: str, args: Mapping[str, Any]) -> None:
    try:
        required, optional = _METHOD_ARGS[(contract, method)]
    except KeyError:
        known_contracts = {c for c, _ in _METHOD_ARGS}
        if contract not in known_contracts:
            raise ContractError("unknown contract") from None
        raise ContractError("unknown method") from None
    names = set(args)
    if not required <= names or not names <= required | optional:
        raise ContractError("bad args")


def apply_call(
    state: ContractState, ctx: CallContext, contract: str, method: str, args: dict
) -> tuple[ContractState, str]:
    """Route one contract call; returns the new state and a receipt note."""
    _check_args(contract, method, args)
    if contract == "registry":
        if method == "register_participant":
            return register_participant(state, ctx, args["public_key"]), "registered"
        if method == "add_machine":
            state = add_machine(
                state,
                ctx,
                mname=args["mname"],
                mac=args["mac"],
                status=args["status"],
                available_time=args["available_time"],
                m_rate=args["m_rate"],
            )
            return state, f"machine {args['mac']} added"
        if method == "set_machine_status":
            state = set_machine_status(state, ctx, args["mac"], args["status"])
            return state, f"machine {args['mac']} status={args['status']}"
        if method == "buy_hours":
            state = buy_hours(state, ctx, args["seller"], args["mac"], args["hours"])
            return state, f"bought {args['hours']}h on {args['mac']}"
    if contract == "relationship":
        if method == "open":
            state, rel_id = open_relationship(
                state,
                ctx,
                counterparty=args["counterparty"],
                terms=args["terms"],
                external_pointer=args.get("external_pointer"),
            )
            return state, f"opened {rel_id}"
        if method == "close":
            state = close_relationship(state, ctx, args["rel_id"], args["outcome"])
            return state, f"closed {args['rel_id']}"
    raise ContractError("unknown method")


def _utilization_summaries(tx: Transaction) -> list[str]:
    readings = tx.payload.get("readings")
    if readings:
        return [
            f"{r['state']} {r['duration_minutes']}min at={r['at']}" for r in readings
        ]
    p = tx.payload
    return [f"{p['state']} {p['duration_minutes']}min oee={p['oee']}"]


def apply_transaction(
    state: ContractState, tx: Transaction, height: int
) -> tuple[ContractState, dict]:
    """Execute one transaction's state effects; never raises.

    The receipt records success or the failure reason. Asset-lifecycle
    transactions are pure chain records with no contract-state effect.
    """
    receipt: dict[str, Any] = {"tx_id": tx.id, "operation": tx.operation, "ok": True}
    ctx = CallContext(caller=tx.service_provider, tx_id=tx.id, at_block=height)

    if tx.operation == OP_CONTRACT_CALL:
        contract = tx.payload["contract"]
        method = tx.payload["method"]
        receipt["method"] = f"{contract}.{method}"
        try:
            state, note = apply_call(state, ctx, contract, method, tx.payload["args"])
            receipt["note"] = note
        except ContractError as err:
            receipt["ok"] = False
            receipt["note"] = err.reason
        return state, receipt

    if tx.operation == OP_UTILIZATION:
        if not state.is_registered(tx.machine):
            receipt["ok"] = False
            receipt["note"] = "machine not registered"
            return state, receipt
        counterparty = tx.service_provider if tx.service_provider != tx.machine else None
        for summary in _utilization_summaries(tx):
            state = _append_event(
                state, tx.machine, EV_UTILIZATION, ctx, counterparty, summary
            )
        receipt["note"] = "utilization recorded"
        return state, receipt

    if tx.operation == OP_CAPABILITY:
        if not state.is_registered(tx.service_provider):
            receipt["ok"] = False
            receipt["note"] = "provider not registered"
            return state, receipt
        p = tx.payload
        summary = (
            f"materials={','.join(p['materials'])}"
            f" tol={p['tolerance_um']}um"
        )
        state = _append_event(
            state, tx.service_provider, EV_CAPABILITY, ctx, tx.machine, summary
        )
        receipt["note"] = "capability recorded"
        return state, receipt

    # Asset lifecycle (Create): the transaction itself is the durable record.
    receipt["note"] = f"asset event: {tx.payload.get('action', '?')}"
    return state, receipt


def apply_block(
    state: ContractState, block: Block, height: int
) -> tuple[ContractState, str, list[dict]]:
    receipts = []
    for tx in block.transactions:
        state, receipt = apply_transaction(state, tx, height)
        receipts.append(receipt)
    return state, state_root(state), receipts


def genesis_state(participants: Mapping[str, str]) -> ContractState:
    """Pre-registered participants (address → public key hex) at height 0."""
    state = ContractState()
    ctx_tx = ZERO_HASH
    for address, public_key in participants.items():
        ctx = CallContext(caller=address, tx_id=ctx_tx, at_block=0)
        state = register_participant(state, ctx, public_key)
    return state
