"""The cyber-physical edge: machine twin, chain-watching oracle, actuator.

The virtual twin batches raw machine events (ON/OFF/WORKING intervals)
into utilization transactions. The oracle sits next to an observer node,
polls its confirmed chain prefix, and drives a simulated actuator when a
trigger rule is satisfied:

* ``hex_string_match`` — some confirmed transaction payload's canonical
  serialization contains a given hex pattern as a substring of its hex
  encoding.
* ``continuous_operation`` — the machine's on-chain history shows an
  unbroken WORKING run of at least N minutes (OFF resets the run; plain
  ON intervals neither extend nor break it).

A rule only ever looks at blocks buried at least ``min_confirmations``
deep, and each (rule, evidence-set) pair fires at most once — across
restarts too, via a small persisted state file. Commands sent to a
physical device cannot be unsent; if a deep reorg evicts evidence that
already fired, the oracle records a compensating RETRACT entry instead.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .chainview import ChainView
from .codec import canonical_serialize, hash_value
from .keys import KeyPair
from .model import (
    MACHINE_STATES,
    OP_UTILIZATION,
    Transaction,
    make_transaction,
    utilization_payload,
)

log = logging.getLogger(__name__)

KIND_HEX = "hex_string_match"
KIND_CONTINUOUS = "continuous_operation"

STATE_ON = "ON"
STATE_OFF = "OFF"
STATE_WORKING = "WORKING"

DEFAULT_MIN_CONFIRMATIONS = 12


@dataclass(frozen=True)
class MachineEvent:
    """One observed machine interval. WORKING implies the machine is on."""

    machine: str
    state: str
    at: int
    duration_minutes: int

    def __post_init__(self):
        if self.state not in MACHINE_STATES:
            raise ValueError(f"unknown machine state: {self.state}")
        if self.duration_minutes < 0 or self.at < 0:
            raise ValueError("negative event numbers")


@dataclass(frozen=True)
class ActuatorCommand:
    target: str
    command: str  # "ON" | "OFF"


@dataclass(frozen=True)
class TriggerRule:
    rule_id: str
    kind: str
    action: ActuatorCommand
    hex_pattern: str | None = None
    machine: str | None = None
    min_continuous_minutes: int | None = None
    min_confirmations: int = DEFAULT_MIN_CONFIRMATIONS

    def __post_init__(self):
        if self.min_confirmations < 1:
            raise ValueError("min_confirmations must be >= 1")
        if self.kind == KIND_HEX:
            if not self.hex_pattern or self.machine or self.min_continuous_minutes:
                raise ValueError("hex rule takes exactly hex_pattern")
            if set(self.hex_pattern) - set("0123456789abcdef"):
                raise ValueError("hex_pattern must be lowercase hex")
        elif self.kind == KIND_CONTINUOUS:
            if (
                not self.machine
                or not self.min_continuous_minutes
                or self.min_continuous_minutes <= 0
                or self.hex_pattern
            ):
                raise ValueError(
                    "continuous rule takes exactly machine + min_continuous_minutes"
                )
        else:
            raise ValueError(f"unknown rule kind: {self.kind}")


@dataclass(frozen=True)
class ActuatorState:
    device: str
    powered: bool = False
    last_command_at: int | None = None
    command_log: tuple[tuple[int, str], ...] = ()

    def apply(self, command: str, at: int) -> "ActuatorState":
        return replace(
            self,
            powered=(command == "ON"),
            last_command_at=at,
            command_log=self.command_log + ((at, command),),
        )


class CommandSink:
    """Append-only record of emitted device commands.

    Backed by an optional file (one canonical record per line) and always
    mirrored in memory for assertions.
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "ab") as fh:
                fh.write(canonical_serialize(record) + b"\n")


# ---------------------------------------------------------------------------
# Virtual twin
# ---------------------------------------------------------------------------

def batch_events(
    events: Sequence[MachineEvent], batch_size: int
) -> list[list[MachineEvent]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [list(events[i : i + batch_size]) for i in range(0, len(events), batch_size)]


def _batch_payload(batch: Sequence[MachineEvent], power_kw: float) -> dict:
    total = sum(e.duration_minutes for e in batch)
    uptime = sum(e.duration_minutes for e in batch if e.state != STATE_OFF)
    working = sum(e.duration_minutes for e in batch if e.state == STATE_WORKING)
    oee = round(working / total, 6) if total else 0.0
    return utilization_payload(
        oee=oee,
        uptime_minutes=uptime,
        power_kwh=round(working / 60.0 * power_kw, 6),
        state=batch[-1].state,
        duration_minutes=total,
        readings=[
            {"state": e.state, "at": e.at, "duration_minutes": e.duration_minutes}
            for e in batch
        ],
    )


def twin_emit(
    machine_key: KeyPair,
    events: Sequence[MachineEvent],
    batch_size: int,
    power_kw: float = 1.0,
) -> list[Transaction]:
    """Turn ordered machine events into one utilization tx per batch.

    The machine reports about itself: it is both the signer and the
    subject, and each transaction embeds its batch as individual readings
    so the interval sequence survives the round trip through the chain.
    """
    for earlier, later in zip(events, events[1:]):
        if later.at < earlier.at:
            raise ValueError("events must be timestamp-ordered")
    machine = machine_key.address
    if any(e.machine != machine for e in events):
        raise ValueError("event machine does not match signing key")
    txs = []
    for batch in batch_events(events, batch_size):
        txs.append(
            make_transaction(
                signer=machine_key,
                service_provider=machine,
                machine=machine,
                operation=OP_UTILIZATION,
                payload=_batch_payload(batch, power_kw),
                timestamp=batch[-1].at,
            )
        )
    return txs


class VirtualTwin:
    """A machine's software counterpart bound to a submitting node."""

    def __init__(self, machine_key: KeyPair, node, power_kw: float = 1.0):
        self.machine_key = machine_key
        self.node = node
        self.power_kw = power_kw

    def emit(self, events: Sequence[MachineEvent], batch_size: int) -> list[Transaction]:
        """Build and submit; refuses to submit for an unregistered machine."""
        state = self.node.view.canonical_state()
        if not state.is_registered(self.machine_key.address):
            raise ValueError("machine not registered")
        txs = twin_emit(self.machine_key, events, batch_size, self.power_kw)
        for tx in txs:
            self.node.submit_transaction(tx)
        return txs


def reconstruct_timeline(
    view: ChainView, machine: str, up_to_height: int
) -> list[MachineEvent]:
    """Rebuild the machine's interval sequence from the canonical chain."""
    out: list[MachineEvent] = []
    for h in range(1, up_to_height + 1):
        block = view.canonical_block_at(h)
        for tx in block.transactions:
            if tx.operation != OP_UTILIZATION or tx.machine != machine:
                continue
            readings = tx.payload.get("readings")
            if readings:
                for r in readings:
                    out.append(
                        MachineEvent(machine, r["state"], r["at"], r["duration_minutes"])
                    )
            else:
                out.append(
                    MachineEvent(
                        machine,
                        tx.payload["state"],
                        tx.timestamp,
                        tx.payload["duration_minutes"],
                    )
                )
    return out


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------

def evidence_hash(rule_id: str, tx_ids: Iterable[str]) -> str:
    return hash_value({"rule": rule_id, "txs": sorted(tx_ids)})


@dataclass
class _Fired:
    rule_id: str
    tx_ids: list[str]
    retracted: bool = False


class Oracle:
    """Sequential poller bridging confirmed chain state to the actuator.

    Holds no signing authority; reads its node's view and writes only to
    the command sink and its own cursor file.
    """

    def __init__(
        self,
        node,
        rules: Sequence[TriggerRule],
        devices: Iterable[str],
        sink: CommandSink | None = None,
        state_path: str | None = None,
    ):
        ids = [r.rule_id for r in rules]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate rule ids")
        self.node = node
        self.rules = list(rules)
        self.sink = sink or CommandSink()
        self.state_path = state_path
        self.actuators: dict[str, ActuatorState] = {
            d: ActuatorState(device=d) for d in devices
        }
        self.cursors: dict[str, int] = {r.rule_id: 0 for r in self.rules}
        self.processed: dict[int, str] = {}  # height → block id, confirmed prefix
        self.fired: dict[str, _Fired] = {}  # evidence hash → record
        self._last_polled_tip: str | None = None
        if state_path and os.path.exists(state_path):
            self._load_state()

    # -- persistence -------------------------------------------------------

    def _load_state(self) -> None:
        with open(self.state_path) as fh:
            data = json.load(fh)
        self.cursors.update({k: int(v) for k, v in data.get("cursors", {}).items()})
        self.processed = {int(h): b for h, b in data.get("processed", {}).items()}
        self.fired = {
            k: _Fired(v["rule_id"], list(v["tx_ids"]), v.get("retracted", False))
            for k, v in data.get("fired", {}).items()
        }

    def _save_state(self) -> None:
        if not self.state_path:
            return
        data = {
            "cursors": self.cursors,
            "processed": {str(h): b for h, b in self.processed.items()},
            "fired": {
                k: {"rule_id": f.rule_id, "tx_ids": f.tx_ids, "retracted": f.retracted}
                for k, f in self.fired.items()
            },
        }
        with open(self.state_path, "w") as fh:
            json.dump(data, fh, sort_keys=True)

    # -- actuation ----------------------------------------------------------

    def _actuate(self, rule: TriggerRule, tx_ids: list[str], at: int) -> dict | None:
        key = evidence_hash(rule.rule_id, tx_ids)
        if key in self.fired:
            return None
        self.fired[key] = _Fired(rule.rule_id, sorted(tx_ids))
        target = rule.action.target
        record = {
            "device": target,
            "command": rule.action.command,
            "at": at,
            "rule_id": rule.rule_id,
            "evidence_hash": key,
        }
        if target not in self.actuators:
            log.warning("dropping command for unknown device %r", target)
            return None
        self.actuators[target] = self.actuators[target].apply(rule.action.command, at)
        self.sink.append(record)
        return record

    def _retract(self, key: str, fired: _Fired, at: int) -> None:
        rule = next((r for r in self.rules if r.rule_id == fired.rule_id), None)
        fired.retracted = True
        target = rule.action.target if rule else "?"
        self.sink.append(
            {
                "device": target,
                "command": "RETRACT",
                "at": at,
                "rule_id": fired.rule_id,
                "evidence_hash": key,
            }
        )

    # -- reorg handling -------------------------------------------------------

    def _rollback_if_reorged(self, at: int) -> None:
        """Detect canonical-chain changes under our processed prefix."""
        view = self.node.view
        divergence = None
        for h in sorted(self.processed):
            if h > view.canonical_height or view.canonical_block_at(h).id != self.processed[h]:
                divergence = h
                break
        if divergence is None:
            return
        for h in [h for h in self.processed if h >= divergence]:
            del self.processed[h]
        for rule_id in self.cursors:
            self.cursors[rule_id] = min(self.cursors[rule_id], divergence - 1)
        # Fired evidence that fell off the chain cannot be unfired; compensate.
        for key, fired in self.fired.items():
            if fired.retracted:
                continue
            if any(view.inclusion_height(tx_id) is None for tx_id in fired.tx_ids):
                self._retract(key, fired, at)

    # -- rule evaluation ---------------------------------------------------------

    def _confirmed_frontier(self, rule: TriggerRule) -> int:
        return self.node.view.canonical_height - rule.min_confirmations + 1

    def _poll_hex(self, rule: TriggerRule, at: int) -> list[dict]:
        view = self.node.view
        frontier = self._confirmed_frontier(rule)
        fired = []
        pattern = rule.hex_pattern
        for h in range(self.cursors[rule.rule_id] + 1, frontier + 1):
            for tx in view.canonical_block_at(h).transactions:
                payload_hex = canonical_serialize(tx.payload).hex()
                if pattern in payload_hex:
                    record = self._actuate(rule, [tx.id], at)
                    if record:
                        fired.append(record)
        if frontier > self.cursors[rule.rule_id]:
            self.cursors[rule.rule_id] = frontier
        return fired

    def _poll_continuous(self, rule: TriggerRule, at: int) -> list[dict]:
        """Re-walk the confirmed history and fire on each unbroken run.

        The walk is recomputed from genesis each time — cheap at this
        scale and automatically consistent after reorgs; the fired-set
        keeps repeated evaluations idempotent.
        """
        view = self.node.view
        frontier = self._confirmed_frontier(rule)
        fired = []
        run = 0
        contributing: list[str] = []
        for h in range(1, frontier + 1):
            for tx in view.canonical_block_at(h).transactions:
                if tx.operation != OP_UTILIZATION or tx.machine != rule.machine:
                    continue
                readings = tx.payload.get("readings") or [
                    {
                        "state": tx.payload["state"],
                        "duration_minutes": tx.payload["duration_minutes"],
                    }
                ]
                for r in readings:
                    if r["state"] == STATE_WORKING:
                        run += r["duration_minutes"]
                        if tx.id not in contributing:
                            contributing.append(tx.id)
                        if run >= rule.min_continuous_minutes:
                            record = self._actuate(rule, contributing, at)
                            if record:
                                fired.append(record)
                            run = 0
                            contributing = []
                    elif r["state"] == STATE_OFF:
                        run = 0
                        contributing = []
        if frontier > self.cursors[rule.rule_id]:
            self.cursors[rule.rule_id] = frontier
        return fired

    # -- entry point ----------------------------------------------------------------

    def poll(self, now: int) -> list[dict]:
        """One polling step; returns the commands emitted this step."""
        view = self.node.view
        if view.canonical_tip == self._last_polled_tip:
            return []
        self._last_polled_tip = view.canonical_tip

        self._rollback_if_reorged(now)
        commands = []
        for rule in self.rules:
            if self._confirmed_frontier(rule) < 1:
                continue
            if rule.kind == KIND_HEX:
                commands.extend(self._poll_hex(rule, now))
            else:
                commands.extend(self._poll_continuous(rule, now))
        # Remember the confirmed prefix we have acted on.
        deepest = max(
            (self._confirmed_frontier(r) for r in self.rules), default=0
        )
        for h in range(1, max(deepest, 0) + 1):
            self.processed[h] = view.canonical_block_at(h).id
        self._save_state()
        for record in commands:
            self.node.runtime.emit(
                {
                    "event": "actuator_command",
                    "node": self.node.name,
                    "at": now,
                    **record,
                }
            )
        return commands
