"""Federation node: mempool, gossip handling, block production, confirmations.

A node is a single logical event loop. The surrounding driver (the
deterministic simulator or the live transport loop) owns timers and
message delivery and calls into the node; the node talks back through a
small runtime interface: ``now()``, ``send(to, msg)``, ``emit(record)``,
``rng(label)``, and ``collect_votes(...)`` for the authority round.

The validation pipeline for every incoming block, own blocks included:

1. structure — linkage, ids, tx_root, timestamps, signatures, every tx
2. consensus — difficulty target (PoW) or schedule/weight/votes (PoA)
3. replay — execute contracts from the parent state snapshot
4. commitment — computed root must equal header.state_root

Only blocks passing all four are inserted into the chain view.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Iterable

from . import consensus
from .chainview import ChainView, ReorgInfo
from .consensus import MODE_POA, MODE_POW
from .contracts import ContractState, apply_block
from .keys import KeyPair, derive_address
from .model import (
    Block,
    BlockHeader,
    Check,
    Transaction,
    Vote,
    block_id,
    compute_tx_root,
    fail,
    make_block,
    validate_block_structure,
    verify_transaction,
)

ROLE_AUTHORITY = "authority"
ROLE_MINER = "miner"
ROLE_OBSERVER = "observer"
ROLE_MACHINE_AGENT = "machine_agent"
ROLES = frozenset({ROLE_AUTHORITY, ROLE_MINER, ROLE_OBSERVER, ROLE_MACHINE_AGENT})


@dataclass(frozen=True)
class NetParams:
    """Consensus and production parameters shared by every node of a network."""

    mode: str
    difficulty_bits: int = 8
    authorities: tuple[str, ...] = ()
    block_period_ms: int = 1000
    max_block_txs: int = 100
    confirm_depth: int = 12

    def __post_init__(self):
        if self.mode not in (MODE_POW, MODE_POA):
            raise ValueError(f"unknown consensus mode: {self.mode}")
        if self.mode == MODE_POA and not self.authorities:
            raise ValueError("authority set must not be empty")


class Mempool:
    """Pending transactions in arrival order, ties broken by id."""

    def __init__(self):
        self._txs: dict[str, Transaction] = {}
        self._order: dict[str, int] = {}
        self._history: dict[str, int] = {}  # arrival seq survives inclusion
        self._next = 0

    def __contains__(self, tx_id: str) -> bool:
        return tx_id in self._txs

    def __len__(self) -> int:
        return len(self._txs)

    def add(self, tx: Transaction) -> bool:
        if tx.id in self._txs:
            return False
        seq = self._history.get(tx.id)
        if seq is None:
            seq = self._next
            self._next += 1
            self._history[tx.id] = seq
        self._txs[tx.id] = tx
        self._order[tx.id] = seq
        return True

    def remove(self, tx_ids: Iterable[str]) -> None:
        for tx_id in tx_ids:
            self._txs.pop(tx_id, None)
            self._order.pop(tx_id, None)

    def select(self, limit: int) -> list[Transaction]:
        """Up to ``limit`` transactions in arrival order; non-destructive."""
        ordered = sorted(self._txs, key=lambda i: (self._order[i], i))
        return [self._txs[i] for i in ordered[:limit]]

    def ids(self) -> set[str]:
        return set(self._txs)

    def all_pending(self) -> list[Transaction]:
        return self.select(len(self._txs))


@dataclass(frozen=True)
class Candidate:
    """A block's worth of work assembled from the mempool, pre-seal."""

    parent_id: str
    txs: tuple[Transaction, ...]
    state: ContractState
    state_root: str
    receipts: tuple[dict, ...]


@dataclass
class MiningJob:
    """An in-flight nonce search pinned to a parent and a tx set."""

    candidate: Candidate
    header: BlockHeader
    nonce: int | None
    attempts: int
    started_at: int
    selection_ids: frozenset[str]  # mempool selection the template was cut from


def validate_block_for_view(
    view: ChainView, params: NetParams, block: Block, check_votes: bool = True
) -> tuple[Check, ContractState | None, list]:
    """The full acceptance pipeline against an arbitrary view.

    Stage 1 structure, stage 2 consensus, stage 3 contract replay from the
    parent snapshot, stage 4 state-root commitment. The block's parent must
    already be in the view.
    """
    parent = view.blocks[block.header.prev_block]
    registry = view.registry_at(parent.id)
    check = validate_block_structure(block, parent, registry)
    if not check:
        return check, None, []

    height = view.height_of(parent.id) + 1
    if params.mode == MODE_POW:
        check = consensus.pow_validate(block, params.difficulty_bits)
    else:
        window = consensus.recency_window(len(params.authorities))
        recent = view.recent_sealers(parent.id, window)
        check = consensus.poa_validate(
            block, height, params.authorities, recent, check_votes
        )
    if not check:
        return check, None, []

    state, root, receipts = apply_block(view.state_at(parent.id), block, height)
    if root != block.header.state_root:
        return fail("state-root"), None, []
    return Check(True), state, receipts


class Node:
    def __init__(
        self,
        name: str,
        identity: KeyPair,
        role: str,
        view: ChainView,
        params: NetParams,
        runtime: Any,
        peers: tuple[str, ...] = (),
    ):
        if role not in ROLES:
            raise ValueError(f"unknown role: {role}")
        if role == ROLE_AUTHORITY and identity.address not in params.authorities:
            raise ValueError(f"{name}: authority role without authority membership")
        self.name = name
        self.identity = identity
        self.role = role
        self.view = view
        self.params = params
        self.runtime = runtime
        self.peers = tuple(peers)
        self.mempool = Mempool()
        self.crashed = False
        self._seen_txs: set[str] = set()
        self._watched: dict[str, set[int]] = {}

    @property
    def address(self) -> str:
        return self.identity.address

    def _emit(self, event: str, **fields) -> None:
        record = {"event": event, "node": self.name, "at": self.runtime.now()}
        record.update(fields)
        self.runtime.emit(record)

    def _broadcast(self, message: dict, exclude: str | None = None) -> None:
        for peer in self.peers:
            if peer != exclude:
                self.runtime.send(peer, message)

    # -- transaction intake ---------------------------------------------------

    def submit_transaction(self, tx: Transaction, watch: bool = True) -> Check:
        """Local submission: validate, pool, gossip, start latency tracking."""
        check = self._admit_transaction(tx)
        if check:
            if watch:
                self._watched.setdefault(tx.id, set())
            self._emit("tx_submitted", tx_id=tx.id)
            self._broadcast({"type": "tx", "body": tx.to_dict(), "sender": self.address})
        else:
            self._emit("tx_rejected", tx_id=tx.id, reason=check.reason)
        return check

    def _admit_transaction(self, tx: Transaction) -> Check:
        if tx.id in self.mempool:
            return fail("duplicate")
        if self.view.inclusion_height(tx.id) is not None:
            return fail("duplicate")
        check = verify_transaction(tx, self.view.canonical_state().keys)
        if not check:
            return check
        self.mempool.add(tx)
        return Check(True)

    def receive_transaction(self, tx: Transaction, sender: str) -> None:
        if tx.id in self._seen_txs and tx.id in self.mempool:
            return
        newly_added = bool(self._admit_transaction(tx))
        self._seen_txs.add(tx.id)
        if newly_added:
            # Flood-with-dedup: forward only on first acceptance.
            self._broadcast(
                {"type": "tx", "body": tx.to_dict(), "sender": self.address},
                exclude=sender,
            )

    # -- block intake -----------------------------------------------------------

    def validate_block(
        self, block: Block, check_votes: bool = True
    ) -> tuple[Check, ContractState | None, list]:
        """Pipeline stages 1–4 against this node's view. Parent must exist."""
        return validate_block_for_view(self.view, self.params, block, check_votes)

    def receive_block(self, block: Block, sender: str | None) -> str:
        """Returns "accepted", "duplicate", "orphan", or "rejected:<reason>"."""
        if block.id in self.view:
            return "duplicate"
        if block.header.prev_block not in self.view:
            self.view.buffer_orphan(block)
            self._emit("orphan_buffered", block_id=block.id)
            if sender is not None:
                self.runtime.send(
                    sender,
                    {
                        "type": "request_block",
                        "body": {"id": block.header.prev_block},
                        "sender": self.address,
                    },
                )
            return "orphan"

        check, state, receipts = self.validate_block(block)
        if not check:
            self._emit("block_rejected", block_id=block.id, reason=check.reason)
            return f"rejected:{check.reason}"

        self._adopt(block, state, receipts)
        self._broadcast(
            {"type": "block", "body": block.to_dict(), "sender": self.address},
            exclude=sender,
        )
        # Anything orphaned on this block can now be re-examined.
        for orphan in self.view.take_orphans_of(block.id):
            self.receive_block(orphan, None)
        return "accepted"

    def _adopt(self, block: Block, state: ContractState, receipts: list) -> None:
        reorg = self.view.insert(block, state, receipts)
        height = self.view.height_of(block.id)
        self._emit("block_accepted", block_id=block.id, height=height)
        included = {tx.id for tx in block.transactions}
        self.mempool.remove(included)
        if reorg is not None:
            self._handle_reorg(reorg)
        self._scan_confirmations()

    def _handle_reorg(self, reorg: ReorgInfo) -> None:
        self.mempool.remove(reorg.adopted_tx_ids)
        restored = []
        for tx in reorg.evicted_txs:
            if self.mempool.add(tx):
                restored.append(tx.id)
            # Txs knocked off the chain must start confirmation over.
            if tx.id in self._watched:
                self._watched[tx.id] = set()
        if reorg.is_reorg:
            self._emit(
                "reorg",
                old_tip=reorg.old_tip,
                new_tip=reorg.new_tip,
                fork_height=reorg.fork_height,
                evicted_blocks=list(reorg.evicted_block_ids),
                restored_txs=restored,
            )

    def _scan_confirmations(self) -> None:
        thresholds = (1, self.params.confirm_depth)
        for tx_id, fired in self._watched.items():
            depth = self.view.confirmations(tx_id)
            if depth is None:
                continue
            for threshold in thresholds:
                if depth >= threshold and threshold not in fired:
                    fired.add(threshold)
                    event = "tx_included" if threshold == 1 else "tx_confirmed"
                    self._emit(
                        event,
                        tx_id=tx_id,
                        depth=threshold,
                        height=self.view.inclusion_height(tx_id),
                    )

    # -- other message types --------------------------------------------------

    def receive_hello(self, body: dict, sender: str) -> None:
        tip = body.get("tip")
        if isinstance(tip, str) and tip not in self.view:
            self.runtime.send(
                sender,
                {"type": "request_block", "body": {"id": tip}, "sender": self.address},
            )

    def receive_request_block(self, body: dict, sender: str) -> None:
        block = self.view.blocks.get(body.get("id"))
        if block is not None:
            self.runtime.send(
                sender,
                {"type": "block", "body": block.to_dict(), "sender": self.address},
            )

    def handle_message(self, message: dict) -> None:
        if self.crashed:
            return
        kind = message.get("type")
        body = message.get("body")
        sender = message.get("sender")
        if kind == "tx":
            self.receive_transaction(Transaction.from_dict(body), sender)
        elif kind == "block":
            self.receive_block(Block.from_dict(body), sender)
        elif kind == "hello":
            self.receive_hello(body, sender)
        elif kind == "request_block":
            self.receive_request_block(body, sender)

    def sync_tick(self) -> None:
        """Periodic anti-entropy: advertise the tip, re-offer pending txs."""
        if self.crashed:
            return
        self._broadcast(
            {
                "type": "hello",
                "body": {"tip": self.view.canonical_tip, "height": self.view.canonical_height},
                "sender": self.address,
            }
        )
        for tx in self.mempool.all_pending():
            self._broadcast({"type": "tx", "body": tx.to_dict(), "sender": self.address})

    # -- block production -------------------------------------------------------

    def build_candidate(self) -> Candidate:
        """Select, re-verify, and execute pending txs on top of the tip."""
        parent_id = self.view.canonical_tip
        parent_state = self.view.state_at(parent_id)
        height = self.view.height_of(parent_id) + 1
        registry = parent_state.keys
        chosen = []
        for tx in self.mempool.select(self.params.max_block_txs):
            # A tx can be valid at submission yet premature here (e.g. its
            # registration is still pending); leave those pooled for later.
            if verify_transaction(tx, registry):
                chosen.append(tx)

        trial = Block(  # throwaway container for apply_block
            id="",
            header=BlockHeader(parent_id, 0, "", "", "", 0, 0),
            transactions=tuple(chosen),
            signature="",
            votes=(),
        )
        state, root, receipts = apply_block(parent_state, trial, height)
        return Candidate(parent_id, tuple(chosen), state, root, tuple(receipts))

    def _block_timestamp(self) -> int:
        parent_ts = self.view.blocks[self.view.canonical_tip].header.timestamp
        return max(self.runtime.now(), parent_ts + 1)

    # PoW ---------------------------------------------------------------------

    def start_mining(self, max_attempts: int = 1 << 22) -> MiningJob | None:
        """Run the nonce search for a fresh candidate; timing is the driver's."""
        if self.role != ROLE_MINER or self.crashed:
            return None
        selection = frozenset(
            tx.id for tx in self.mempool.select(self.params.max_block_txs)
        )
        candidate = self.build_candidate()
        header = BlockHeader(
            prev_block=candidate.parent_id,
            timestamp=self._block_timestamp(),
            tx_root=compute_tx_root([tx.id for tx in candidate.txs]),
            node_pubkey=self.identity.public_hex,
            state_root=candidate.state_root,
            nonce=0,
            difficulty=self.params.difficulty_bits,
        )
        rng = self.runtime.rng(f"mine/{self.name}")
        result = consensus.pow_mine(header, self.params.difficulty_bits, rng, max_attempts)
        return MiningJob(
            candidate=candidate,
            header=header,
            nonce=result.nonce,
            attempts=result.attempts,
            started_at=self.runtime.now(),
            selection_ids=selection,
        )

    def job_is_stale(self, job: MiningJob) -> bool:
        """Tip moved, or the mempool would cut a different template now.

        With a fixed parent the registry is fixed too, so comparing the raw
        selection is as strong as rebuilding the candidate — and far cheaper,
        since the driver polls this after every event.
        """
        if self.view.canonical_tip != job.candidate.parent_id:
            return True
        current = frozenset(
            tx.id for tx in self.mempool.select(self.params.max_block_txs)
        )
        return current != job.selection_ids

    def finish_mining(self, job: MiningJob) -> Block | None:
        """Seal and adopt the mined block, unless the world moved on."""
        if self.crashed or job.nonce is None or self.job_is_stale(job):
            return None
        header = replace(job.header, nonce=job.nonce)
        bid = block_id(header)
        block = Block(
            id=bid,
            header=header,
            transactions=job.candidate.txs,
            signature=self.identity.sign(bytes.fromhex(bid)).hex(),
            votes=(),
        )
        return self._publish_own(block)

    def mine_block(self, max_attempts: int = 1 << 22) -> Block | None:
        """Synchronous mining round (live mode and direct tests)."""
        job = self.start_mining(max_attempts)
        if job is None or job.nonce is None:
            return None
        return self.finish_mining(job)

    # PoA ---------------------------------------------------------------------

    def poa_eligibility(self) -> str:
        """"in-turn", "out-of-turn", or "forbidden" for the next height."""
        if self.role != ROLE_AUTHORITY:
            return "forbidden"
        authorities = self.params.authorities
        height = self.view.canonical_height + 1
        window = consensus.recency_window(len(authorities))
        recent = self.view.recent_sealers(self.view.canonical_tip, window)
        if self.address in recent:
            return "forbidden"
        if consensus.in_turn_signer(authorities, height) == self.address:
            return "in-turn"
        return "out-of-turn"

    def seal_poa_block(self) -> Block | None:
        """Assemble, seal, gather endorsements, and adopt a PoA block."""
        if self.crashed:
            return None
        eligibility = self.poa_eligibility()
        if eligibility == "forbidden":
            return None
        candidate = self.build_candidate()
        height = self.view.height_of(candidate.parent_id) + 1
        difficulty = consensus.poa_difficulty(
            self.params.authorities, height, self.address
        )
        parent_block = self.view.blocks[candidate.parent_id]
        block = make_block(
            parent=parent_block,
            txs=list(candidate.txs),
            sealer=self.identity,
            state_root=candidate.state_root,
            timestamp=self._block_timestamp(),
            nonce=0,
            difficulty=difficulty,
        )
        votes = self.runtime.collect_votes(self, block, height)
        needed = consensus.vote_threshold(len(self.params.authorities))
        endorsers = {self.address} | {
            derive_address(bytes.fromhex(v.public_key)) for v in votes
        }
        if len(endorsers) < needed:
            self._emit("seal_abandoned", block_id=block.id, votes=len(votes))
            return None
        block = replace(block, votes=tuple(votes))
        return self._publish_own(block)

    def vote_on(self, block: Block, height: int) -> Vote | None:
        """Endorse another authority's proposal after full validation."""
        if self.crashed or self.role != ROLE_AUTHORITY:
            return None
        if block.header.prev_block not in self.view:
            return None
        if self.view.height_of(block.header.prev_block) + 1 != height:
            return None
        check, _, _ = self.validate_block(block, check_votes=False)
        if not check:
            return None
        return consensus.sign_vote(self.identity, block.id)

    def _publish_own(self, block: Block) -> Block | None:
        """Own blocks go through the same pipeline as everyone else's."""
        check, state, receipts = self.validate_block(block)
        if not check:
            self._emit("block_rejected", block_id=block.id, reason=check.reason)
            return None
        height = self.view.height_of(block.header.prev_block) + 1
        self._emit("block_produced", height=height, block=block.to_dict())
        self._adopt(block, state, receipts)
        self._broadcast({"type": "block", "body": block.to_dict(), "sender": self.address})
        return block
