"""Trace files: the append-only record of everything a run did.

One canonical-serialization record per line. The first record describes
the scenario (including the consensus parameters needed to re-validate),
the second carries the genesis block and the pre-registered participants,
and the rest are node events in virtual-time order. Because every
produced block is embedded in full, a trace is self-contained: the chain,
the contract state, and the receipts can all be rebuilt offline — which
is exactly what the inspection commands do.
"""

from __future__ import annotations

from typing import Iterable

from .chainview import ChainView, bootstrap
from .codec import CanonicalizationError, canonical_parse, canonical_serialize
from .model import Block
from .node import NetParams, validate_block_for_view


class TraceError(ValueError):
    pass


def write_trace(records: Iterable[dict], path: str) -> None:
    with open(path, "wb") as fh:
        for record in records:
            fh.write(canonical_serialize(record) + b"\n")


def read_trace(path: str) -> list[dict]:
    records = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(canonical_parse(line))
            except CanonicalizationError as err:
                raise TraceError(f"{path}:{lineno}: {err}") from None
    return records


def scenario_record(records: list[dict]) -> dict:
    if not records or records[0].get("event") != "scenario":
        raise TraceError("trace does not start with a scenario record")
    return records[0]


def genesis_record(records: list[dict]) -> dict:
    if len(records) < 2 or records[1].get("event") != "genesis":
        raise TraceError("trace has no genesis record")
    return records[1]


def end_record(records: list[dict]) -> dict | None:
    for record in reversed(records):
        if record.get("event") == "end":
            return record
    return None


def rebuild_view(records: list[dict]) -> tuple[ChainView, NetParams]:
    """Replay a trace's blocks through full validation into a fresh view.

    Every embedded block must pass the same pipeline a live node runs, so
    inspection doubles as an offline audit of the run.
    """
    scenario = scenario_record(records)
    genesis = genesis_record(records)
    raw_params = scenario.get("params")
    if not isinstance(raw_params, dict):
        raise TraceError("scenario record lacks consensus params")
    params = NetParams(
        mode=raw_params["mode"],
        difficulty_bits=raw_params.get("difficulty_bits", 8),
        authorities=tuple(raw_params.get("authorities", ())),
        block_period_ms=raw_params.get("block_period_ms", 1000),
        max_block_txs=raw_params.get("max_block_txs", 100),
        confirm_depth=raw_params.get("confirm_depth", 12),
    )
    participants = genesis.get("participants", {})
    genesis_block = Block.from_dict(genesis["block"])
    view = bootstrap(participants, genesis_block.header.timestamp, params.mode)
    if view.genesis.id != genesis_block.id:
        raise TraceError("genesis block does not match its participant set")

    for record in records:
        if record.get("event") != "block_produced":
            continue
        block = Block.from_dict(record["block"])
        if block.id in view:
            continue
        if block.header.prev_block not in view:
            raise TraceError(f"block {block.id[:12]} arrives before its parent")
        check, state, receipts = validate_block_for_view(view, params, block)
        if not check:
            raise TraceError(f"block {block.id[:12]} fails revalidation: {check.reason}")
        view.insert(block, state, receipts)
    return view, params
