"""A node's local view of the block tree: storage, fork choice, reorgs.

Every validated block is kept together with the contract state snapshot
reached by executing it, so validation of children and registry lookups
never recompute history. The canonical chain is the path from genesis to
the tip with the highest cumulative sealing weight; ties fall to the
greater height, then to the lexicographically smaller block id, so every
node picks the same winner.

Blocks whose parent has not arrived yet sit in a bounded orphan buffer
(oldest evicted first) until the parent shows up.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from .consensus import block_weight
from .contracts import ContractState, genesis_state, state_root
from .model import Block, Transaction, make_genesis_block

ORPHAN_BUFFER_LIMIT = 64


@dataclass(frozen=True)
class ReorgInfo:
    """What changed when the canonical tip moved."""

    old_tip: str
    new_tip: str
    fork_height: int
    evicted_block_ids: tuple[str, ...]
    evicted_txs: tuple[Transaction, ...]
    adopted_tx_ids: frozenset[str]

    @property
    def is_reorg(self) -> bool:
        """True when blocks were evicted, not merely extended."""
        return bool(self.evicted_block_ids)


class ChainView:
    def __init__(self, genesis: Block, genesis_contract_state: ContractState, mode: str):
        self.mode = mode
        self.genesis = genesis
        self.blocks: dict[str, Block] = {genesis.id: genesis}
        self.heights: dict[str, int] = {genesis.id: 0}
        self.weights: dict[str, int] = {genesis.id: 0}
        self.states: dict[str, ContractState] = {genesis.id: genesis_contract_state}
        self.receipts: dict[str, list[dict]] = {genesis.id: []}
        self.children: dict[str, list[str]] = {}
        self.tips: set[str] = {genesis.id}
        self._canonical: list[str] = [genesis.id]
        self._tx_height: dict[str, int] = {}
        self._orphans: OrderedDict[str, Block] = OrderedDict()

    # -- basic lookups ------------------------------------------------------

    @property
    def canonical_tip(self) -> str:
        return self._canonical[-1]

    @property
    def canonical_height(self) -> int:
        return len(self._canonical) - 1

    def __contains__(self, block_id: str) -> bool:
        return block_id in self.blocks

    def height_of(self, block_id: str) -> int:
        return self.heights[block_id]

    def state_at(self, block_id: str) -> ContractState:
        return self.states[block_id]

    def canonical_state(self) -> ContractState:
        return self.states[self.canonical_tip]

    def canonical_root(self) -> str:
        return self.blocks[self.canonical_tip].header.state_root

    def canonical_block_at(self, height: int) -> Block:
        return self.blocks[self._canonical[height]]

    def canonical_chain(self) -> list[str]:
        return list(self._canonical)

    def is_canonical(self, block_id: str) -> bool:
        h = self.heights.get(block_id)
        return h is not None and h < len(self._canonical) and self._canonical[h] == block_id

    def registry_at(self, block_id: str) -> dict[str, str]:
        """Address → public key map as of the given block (for tx checks)."""
        return self.states[block_id].keys

    def recent_sealers(self, parent_id: str, window: int) -> list[str]:
        """Sealer addresses of up to ``window`` ancestors ending at parent_id."""
        sealers = []
        cursor = parent_id
        for _ in range(window):
            block = self.blocks[cursor]
            if block.is_genesis():
                break
            sealers.append(block.sealer_address)
            cursor = block.header.prev_block
        return sealers

    # -- confirmation counting ----------------------------------------------

    def inclusion_height(self, tx_id: str) -> int | None:
        return self._tx_height.get(tx_id)

    def confirmations(self, tx_id: str) -> int | None:
        """Depth of the tx below the canonical tip; None if not on chain."""
        h = self._tx_height.get(tx_id)
        if h is None:
            return None
        return self.canonical_height - h + 1

    # -- insertion and fork choice ------------------------------------------

    def insert(
        self, block: Block, state: ContractState, receipts: list[dict]
    ) -> ReorgInfo | None:
        """Store an already-validated block and re-run fork choice.

        Returns a ReorgInfo when the canonical tip changed, else None.
        The parent must already be present.
        """
        parent_id = block.header.prev_block
        if block.id in self.blocks:
            return None
        if parent_id not in self.blocks:
            raise KeyError(f"parent not present: {parent_id}")
        self.blocks[block.id] = block
        self.heights[block.id] = self.heights[parent_id] + 1
        self.weights[block.id] = self.weights[parent_id] + block_weight(block, self.mode)
        self.states[block.id] = state
        self.receipts[block.id] = receipts
        self.children.setdefault(parent_id, []).append(block.id)
        self.tips.discard(parent_id)
        self.tips.add(block.id)
        return self._update_canonical()

    def _better(self, a: str, b: str) -> bool:
        """Fork-choice preference: does tip a beat tip b?"""
        wa, wb = self.weights[a], self.weights[b]
        if wa != wb:
            return wa > wb
        ha, hb = self.heights[a], self.heights[b]
        if ha != hb:
            return ha > hb
        return a < b

    def _update_canonical(self) -> ReorgInfo | None:
        best = self.canonical_tip
        for tip in self.tips:
            if tip != best and self._better(tip, best):
                best = tip
        if best == self.canonical_tip:
            return None
        return self._adopt_tip(best)

    def _adopt_tip(self, new_tip: str) -> ReorgInfo:
        old_tip = self.canonical_tip
        # Path from genesis to the new tip.
        path = []
        cursor = new_tip
        while True:
            path.append(cursor)
            block = self.blocks[cursor]
            if block.is_genesis():
                break
            cursor = block.header.prev_block
        path.reverse()

        # Longest common prefix with the current canonical list.
        fork_height = 0
        for h in range(min(len(path), len(self._canonical))):
            if path[h] != self._canonical[h]:
                break
            fork_height = h

        evicted_blocks = tuple(self._canonical[fork_height + 1 :])
        evicted: list[Transaction] = []
        for block_id in evicted_blocks:
            block = self.blocks[block_id]
            for tx in block.transactions:
                del self._tx_height[tx.id]
                evicted.append(tx)

        adopted: set[str] = set()
        for h in range(fork_height + 1, len(path)):
            for tx in self.blocks[path[h]].transactions:
                self._tx_height[tx.id] = h
                adopted.add(tx.id)

        self._canonical = path
        # Transactions present on both branches were never really evicted.
        truly_evicted = tuple(tx for tx in evicted if tx.id not in adopted)
        return ReorgInfo(
            old_tip=old_tip,
            new_tip=new_tip,
            fork_height=fork_height,
            evicted_block_ids=evicted_blocks,
            evicted_txs=truly_evicted,
            adopted_tx_ids=frozenset(adopted),
        )

    # -- orphan buffer --------------------------------------------------------

    def buffer_orphan(self, block: Block) -> None:
        if block.id in self._orphans or block.id in self.blocks:
            return
        while len(self._orphans) >= ORPHAN_BUFFER_LIMIT:
            self._orphans.popitem(last=False)
        self._orphans[block.id] = block

    def take_orphans_of(self, parent_id: str) -> list[Block]:
        """Remove and return buffered blocks waiting on the given parent."""
        ready = [b for b in self._orphans.values() if b.header.prev_block == parent_id]
        for block in ready:
            del self._orphans[block.id]
        return ready

    def orphan_count(self) -> int:
        return len(self._orphans)

    # -- reporting ------------------------------------------------------------

    def summary(self) -> dict:
        tip = self.canonical_tip
        return {
            "canonical_tip": tip,
            "height": self.canonical_height,
            "weight": self.weights[tip],
            "state_root": self.canonical_root(),
            "blocks": len(self.blocks),
            "tips": sorted(self.tips),
            "orphans": len(self._orphans),
        }


def bootstrap(
    participants: dict[str, str], genesis_timestamp: int, mode: str
) -> ChainView:
    """Build a view whose genesis commits to the pre-registered participants."""
    state = genesis_state(participants)
    genesis = make_genesis_block(state_root(state), genesis_timestamp)
    return ChainView(genesis, state, mode)
