"""Node behaviour: mempool, gossip intake, production, watch lifecycle."""

from __future__ import annotations

from dataclasses import replace

import pytest
from conftest import StubRuntime, make_poa_node, make_pow_node

from mfgchain import consensus
from mfgchain.keys import generate_keypair
from mfgchain.model import (
    OP_CONTRACT_CALL,
    OP_UTILIZATION,
    contract_call_payload,
    make_transaction,
    utilization_payload,
)
from mfgchain.node import MODE_POW, NetParams, Node

MAC = "0x" + "cd" * 20


def _util_tx(signer, ts=1, minutes=30):
    """A self-reported utilization tx; always valid for a registered signer."""
    return make_transaction(
        signer,
        signer.address,
        signer.address,
        OP_UTILIZATION,
        utilization_payload(
            oee=0.8,
            uptime_minutes=minutes,
            power_kwh=1.5,
            state="WORKING",
            duration_minutes=minutes,
        ),
        ts,
    )


def _register_tx(newcomer, ts=1):
    return make_transaction(
        newcomer,
        newcomer.address,
        newcomer.address,
        OP_CONTRACT_CALL,
        contract_call_payload(
            "registry", "register_participant", {"public_key": newcomer.public_hex}
        ),
        ts,
    )


def _sent_of_type(runtime: StubRuntime, kind: str):
    return [(to, msg) for to, msg in runtime.sent if msg["type"] == kind]


def _events(runtime: StubRuntime, kind: str):
    return [r for r in runtime.records if r["event"] == kind]


# ---------------------------------------------------------------------------
# Mempool ordering
# ---------------------------------------------------------------------------

class TestMempool:
    def test_arrival_order_preserved(self, registry, alice):
        node = make_pow_node("m", "pool-seed", registry)
        txs = [_util_tx(alice, ts=t) for t in (5, 3, 9, 1)]
        for tx in txs:
            assert node.mempool.add(tx)
        assert node.mempool.select(10) == txs  # arrival, not timestamp, order
        assert node.mempool.select(2) == txs[:2]

    def test_duplicate_add_refused(self, registry, alice):
        node = make_pow_node("m", "pool-seed", registry)
        tx = _util_tx(alice)
        assert node.mempool.add(tx)
        assert not node.mempool.add(tx)
        assert len(node.mempool) == 1

    def test_readd_keeps_original_position(self, registry, alice):
        # A tx evicted by a reorg must rejoin the queue where it first stood,
        # not behind txs that arrived while it was included.
        node = make_pow_node("m", "pool-seed", registry)
        first, second, third = (_util_tx(alice, ts=t) for t in (1, 2, 3))
        node.mempool.add(first)
        node.mempool.add(second)
        node.mempool.remove([first.id])
        node.mempool.add(third)
        node.mempool.add(first)
        assert node.mempool.select(10) == [first, second, third]


# ---------------------------------------------------------------------------
# Transaction intake and gossip
# ---------------------------------------------------------------------------

class TestTxIntake:
    def test_submit_pools_and_floods(self, registry, alice):
        rt = StubRuntime()
        node = make_pow_node("m", "intake-seed", registry, runtime=rt)
        node.peers = ("0xp1", "0xp2")
        tx = _util_tx(alice)
        assert node.submit_transaction(tx)
        assert tx.id in node.mempool
        assert [r["tx_id"] for r in _events(rt, "tx_submitted")] == [tx.id]
        offers = _sent_of_type(rt, "tx")
        assert {to for to, _ in offers} == {"0xp1", "0xp2"}
        assert all(msg["sender"] == node.address for _, msg in offers)

    def test_submit_duplicate_rejected(self, registry, alice):
        rt = StubRuntime()
        node = make_pow_node("m", "intake-seed", registry, runtime=rt)
        tx = _util_tx(alice)
        assert node.submit_transaction(tx)
        check = node.submit_transaction(tx)
        assert not check and check.reason == "duplicate"
        assert _events(rt, "tx_rejected")[0]["reason"] == "duplicate"

    def test_submit_already_on_chain_rejected(self, registry, alice):
        node = make_pow_node("m", "intake-seed", registry)
        tx = _util_tx(alice)
        node.submit_transaction(tx)
        assert node.mine_block() is not None
        assert tx.id not in node.mempool
        check = node.submit_transaction(tx)
        assert not check and check.reason == "duplicate"

    def test_submit_from_unregistered_signer_rejected(self, registry):
        node = make_pow_node("m", "intake-seed", registry)
        stranger = generate_keypair("node-stranger")
        check = node.submit_transaction(_util_tx(stranger))
        assert not check and check.reason == "unregistered signer"
        assert len(node.mempool) == 0

    def test_receive_floods_once_excluding_sender(self, registry, alice):
        rt = StubRuntime()
        node = make_pow_node("m", "intake-seed", registry, runtime=rt)
        node.peers = ("0xp1", "0xp2", "0xp3")
        tx = _util_tx(alice)
        node.receive_transaction(tx, sender="0xp2")
        offers = _sent_of_type(rt, "tx")
        assert {to for to, _ in offers} == {"0xp1", "0xp3"}  # not back to origin
        node.receive_transaction(tx, sender="0xp3")  # second copy: silence
        assert len(_sent_of_type(rt, "tx")) == 2


# ---------------------------------------------------------------------------
# Block intake: accept / duplicate / orphan / reject
# ---------------------------------------------------------------------------

class TestBlockIntake:
    def test_accepts_peer_block(self, registry, alice):
        miner = make_pow_node("a", "ba-seed", registry)
        other = make_pow_node("b", "bb-seed", registry)
        miner.submit_transaction(_util_tx(alice), watch=False)
        block = miner.mine_block()
        assert other.receive_block(block, sender="0xa") == "accepted"
        assert other.view.canonical_tip == block.id
        assert other.receive_block(block, sender="0xa") == "duplicate"

    def test_accepted_block_clears_mempool_overlap(self, registry, alice):
        miner = make_pow_node("a", "ba-seed", registry)
        other = make_pow_node("b", "bb-seed", registry)
        tx = _util_tx(alice)
        miner.submit_transaction(tx, watch=False)
        other.submit_transaction(tx, watch=False)
        block = miner.mine_block()
        other.receive_block(block, sender=None)
        assert tx.id not in other.mempool

    def test_orphan_buffered_and_parent_requested(self, registry):
        miner = make_pow_node("a", "ba-seed", registry)
        b1 = miner.mine_block()
        b2 = miner.mine_block()
        rt = StubRuntime()
        node = make_pow_node("b", "bb-seed", registry, runtime=rt)
        assert node.receive_block(b2, sender="0xorigin") == "orphan"
        assert node.view.canonical_height == 0
        requests = _sent_of_type(rt, "request_block")
        assert requests == [
            ("0xorigin", {"type": "request_block", "body": {"id": b1.id}, "sender": node.address})
        ]

    def test_orphans_drain_recursively(self, registry):
        miner = make_pow_node("a", "ba-seed", registry)
        b1, b2, b3 = miner.mine_block(), miner.mine_block(), miner.mine_block()
        node = make_pow_node("b", "bb-seed", registry)
        assert node.receive_block(b3, sender=None) == "orphan"
        assert node.receive_block(b2, sender=None) == "orphan"
        # The missing ancestor arrives last; the buffer unwinds in one call.
        assert node.receive_block(b1, sender=None) == "accepted"
        assert node.view.canonical_tip == b3.id
        assert node.view.canonical_height == 3

    def test_rejects_tx_root_mismatch(self, registry, alice):
        miner = make_pow_node("a", "ba-seed", registry)
        node = make_pow_node("b", "bb-seed", registry)
        block = miner.mine_block()
        smuggled = replace(block, transactions=(_util_tx(alice),))
        assert node.receive_block(smuggled, sender=None) == "rejected:tx_root"
        assert node.view.canonical_height == 0

    def test_rejects_wrong_difficulty_declaration(self, registry):
        miner = make_pow_node("a", "ba-seed", registry, bits=4)
        node = make_pow_node("b", "bb-seed", registry, bits=8)
        block = miner.mine_block()
        assert node.receive_block(block, sender=None) == "rejected:difficulty"

    def test_rebroadcasts_excluding_sender(self, registry):
        miner = make_pow_node("a", "ba-seed", registry)
        block = miner.mine_block()
        rt = StubRuntime()
        node = make_pow_node("b", "bb-seed", registry, runtime=rt)
        node.peers = ("0xp1", "0xp2")
        node.receive_block(block, sender="0xp1")
        relays = _sent_of_type(rt, "block")
        assert [to for to, _ in relays] == ["0xp2"]


# ---------------------------------------------------------------------------
# Candidate assembly
# ---------------------------------------------------------------------------

class TestCandidates:
    def test_premature_tx_left_pooled(self, registry, alice):
        # A tx whose signer registration is still pending can sit in the pool
        # but must not be cut into a block before the registration lands.
        node = make_pow_node("m", "cand-seed", registry)
        dave = generate_keypair("node-dave")
        early = _util_tx(dave, ts=2)
        node.mempool.add(early)
        node.submit_transaction(_register_tx(dave, ts=1), watch=False)

        candidate = node.build_candidate()
        assert early not in candidate.txs
        assert early.id in node.mempool

        block = node.mine_block()  # includes the registration only
        assert [t.operation for t in block.transactions] == [OP_CONTRACT_CALL]
        follow_up = node.build_candidate()  # now dave is registered
        assert follow_up.txs == (early,)

    def test_block_size_cap(self, registry, alice):
        params = NetParams(mode=MODE_POW, difficulty_bits=4, max_block_txs=2)
        from mfgchain.chainview import bootstrap

        node = Node(
            "m",
            generate_keypair("cap-seed"),
            "miner",
            bootstrap(registry, genesis_timestamp=0, mode=MODE_POW),
            params,
            StubRuntime(),
        )
        txs = [_util_tx(alice, ts=t) for t in (1, 2, 3)]
        for tx in txs:
            node.submit_transaction(tx, watch=False)
        block = node.mine_block()
        assert list(block.transactions) == txs[:2]
        assert node.mempool.select(10) == [txs[2]]


# ---------------------------------------------------------------------------
# Proof-of-work production
# ---------------------------------------------------------------------------

class TestMining:
    def test_mined_block_meets_target_and_is_adopted(self, registry, alice):
        rt = StubRuntime()
        node = make_pow_node("m", "mine-seed", registry, bits=4, runtime=rt)
        node.submit_transaction(_util_tx(alice), watch=False)
        block = node.mine_block()
        assert block is not None
        assert int(block.id, 16) < consensus.pow_target(4)
        assert node.view.canonical_tip == block.id
        produced = _events(rt, "block_produced")
        assert len(produced) == 1 and produced[0]["height"] == 1

    def test_job_goes_stale_when_tip_moves(self, registry):
        node = make_pow_node("m", "mine-seed", registry)
        rival = make_pow_node("r", "rival-seed", registry)
        job = node.start_mining()
        assert not node.job_is_stale(job)
        node.receive_block(rival.mine_block(), sender=None)
        assert node.job_is_stale(job)
        assert node.finish_mining(job) is None

    def test_job_goes_stale_when_selection_changes(self, registry, alice):
        node = make_pow_node("m", "mine-seed", registry)
        job = node.start_mining()
        node.submit_transaction(_util_tx(alice), watch=False)
        assert node.job_is_stale(job)

    def test_mining_gives_up_within_budget(self, registry):
        node = make_pow_node("m", "mine-seed", registry, bits=64)
        job = node.start_mining(max_attempts=8)
        assert job.nonce is None and job.attempts == 8
        assert node.finish_mining(job) is None

    def test_only_miners_mine(self, registry):
        observer = make_pow_node("w", "watch-seed", registry)
        observer.role = "observer"
        assert observer.start_mining() is None

    def test_crashed_node_refuses_everything(self, registry, alice):
        rt = StubRuntime()
        node = make_pow_node("m", "mine-seed", registry, runtime=rt)
        other = make_pow_node("r", "rival-seed", registry)
        block = other.mine_block()
        node.crashed = True
        assert node.start_mining() is None
        node.handle_message({"type": "block", "body": block.to_dict(), "sender": "0xr"})
        assert node.view.canonical_height == 0
        node.sync_tick()
        assert rt.sent == []


# ---------------------------------------------------------------------------
# Authority-round production
# ---------------------------------------------------------------------------

class VotingRuntime(StubRuntime):
    """Synchronous endorsement round across a registered set of nodes."""

    def __init__(self):
        super().__init__()
        self.nodes: list[Node] = []

    def collect_votes(self, proposer, block, height):
        votes = []
        for node in self.nodes:
            if node is not proposer:
                vote = node.vote_on(block, height)
                if vote is not None:
                    votes.append(vote)
        return votes


def _poa_trio(registry):
    rt = VotingRuntime()
    keys = [generate_keypair(f"node-auth-{i}") for i in range(3)]
    auths = tuple(k.address for k in keys)
    nodes = [
        make_poa_node(f"n{i}", keys[i], auths, registry, runtime=rt)
        for i in range(3)
    ]
    rt.nodes = nodes
    return nodes, auths


class TestPoaProduction:
    def test_single_authority_seals_alone(self, registry):
        key = generate_keypair("solo-auth")
        node = make_poa_node("solo", key, (key.address,), registry)
        block = node.seal_poa_block()
        assert block is not None and block.votes == ()
        assert node.view.canonical_height == 1

    def test_seal_abandoned_without_quorum(self, registry):
        # StubRuntime collects no votes; threshold for N=3 is 2 endorsers.
        rt = StubRuntime()
        keys = [generate_keypair(f"node-auth-{i}") for i in range(3)]
        auths = tuple(k.address for k in keys)
        sealer_key = next(
            k for k in keys if consensus.in_turn_signer(auths, 1) == k.address
        )
        node = make_poa_node("lonely", sealer_key, auths, registry, runtime=rt)
        assert node.seal_poa_block() is None
        abandoned = _events(rt, "seal_abandoned")
        assert len(abandoned) == 1 and abandoned[0]["votes"] == 0
        assert node.view.canonical_height == 0

    def test_in_turn_seal_with_endorsements(self, registry, alice):
        nodes, auths = _poa_trio(registry)
        sealer = next(n for n in nodes if n.poa_eligibility() == "in-turn")
        sealer.submit_transaction(_util_tx(alice), watch=False)
        block = sealer.seal_poa_block()
        assert block is not None
        assert block.header.difficulty == 2  # preferred-slot weight
        assert len(block.votes) == 2  # both peers endorsed
        for node in nodes:
            if node is not sealer:
                assert node.receive_block(block, sender=None) == "accepted"
        assert {n.view.canonical_tip for n in nodes} == {block.id}

    def test_out_of_turn_seal_has_lower_weight(self, registry):
        nodes, auths = _poa_trio(registry)
        backup = next(n for n in nodes if n.poa_eligibility() == "out-of-turn")
        block = backup.seal_poa_block()
        assert block is not None and block.header.difficulty == 1

    def test_recent_sealer_is_barred(self, registry):
        nodes, auths = _poa_trio(registry)
        sealer = next(n for n in nodes if n.poa_eligibility() == "in-turn")
        block = sealer.seal_poa_block()
        for node in nodes:
            if node is not sealer:
                node.receive_block(block, sender=None)
        # window = floor(3/2) = 1: the sealer must sit the next height out
        assert sealer.poa_eligibility() == "forbidden"
        assert sealer.seal_poa_block() is None
        assert sum(n.poa_eligibility() != "forbidden" for n in nodes) == 2

    def test_vote_requires_matching_height(self, registry):
        nodes, auths = _poa_trio(registry)
        sealer = next(n for n in nodes if n.poa_eligibility() == "in-turn")
        voter = next(n for n in nodes if n is not sealer)
        block = sealer.seal_poa_block()
        assert voter.vote_on(block, 1) is not None  # parent + 1: endorsable
        assert voter.vote_on(block, 2) is None  # height claim is off by one

    def test_vote_from_non_authority_is_refused(self, registry):
        nodes, auths = _poa_trio(registry)
        sealer = next(n for n in nodes if n.poa_eligibility() == "in-turn")
        block = sealer.seal_poa_block()
        spectator = make_poa_node(
            "spec", generate_keypair("node-spectator"), auths, registry, role="observer"
        )
        assert spectator.vote_on(block, 1) is None

    def test_vote_with_unknown_parent_is_refused(self, registry):
        nodes, auths = _poa_trio(registry)
        sealer = next(n for n in nodes if n.poa_eligibility() == "in-turn")
        first = sealer.seal_poa_block()
        for node in nodes:
            if node is not sealer:
                node.receive_block(first, sender=None)
        behind = make_poa_node(
            "behind",
            generate_keypair("node-auth-0"),
            auths,
            registry,
            role="observer",
        )
        nxt = next(n for n in nodes if n.poa_eligibility() == "in-turn")
        second = nxt.seal_poa_block()
        assert behind.vote_on(second, 2) is None  # never saw height 1


# ---------------------------------------------------------------------------
# Hello / request-block / dispatch
# ---------------------------------------------------------------------------

class TestMessages:
    def test_hello_with_unknown_tip_requests_it(self, registry):
        miner = make_pow_node("a", "msg-seed", registry)
        block = miner.mine_block()
        rt = StubRuntime()
        node = make_pow_node("b", "msg2-seed", registry, runtime=rt)
        node.handle_message(
            {"type": "hello", "body": {"tip": block.id, "height": 1}, "sender": "0xa"}
        )
        assert _sent_of_type(rt, "request_block") == [
            ("0xa", {"type": "request_block", "body": {"id": block.id}, "sender": node.address})
        ]
        node.handle_message(  # known tip: no request
            {"type": "hello", "body": {"tip": node.view.genesis.id, "height": 0}, "sender": "0xa"}
        )
        assert len(_sent_of_type(rt, "request_block")) == 1

    def test_request_block_served_when_known(self, registry):
        rt = StubRuntime()
        node = make_pow_node("a", "msg-seed", registry, runtime=rt)
        block = node.mine_block()
        node.handle_message(
            {"type": "request_block", "body": {"id": block.id}, "sender": "0xb"}
        )
        served = _sent_of_type(rt, "block")
        assert [to for to, _ in served] == ["0xb"]
        assert served[0][1]["body"] == block.to_dict()
        node.handle_message(
            {"type": "request_block", "body": {"id": "f" * 64}, "sender": "0xb"}
        )
        assert len(_sent_of_type(rt, "block")) == 1  # unknown id: silence

    def test_sync_tick_advertises_tip_and_reoffers(self, registry, alice):
        rt = StubRuntime()
        node = make_pow_node("a", "msg-seed", registry, runtime=rt)
        node.peers = ("0xp1",)
        tx = _util_tx(alice)
        node.submit_transaction(tx, watch=False)
        rt.sent.clear()
        node.sync_tick()
        kinds = [msg["type"] for _, msg in rt.sent]
        assert kinds == ["hello", "tx"]
        hello = rt.sent[0][1]
        assert hello["body"] == {"tip": node.view.canonical_tip, "height": 0}

    def test_tx_message_routes_to_mempool(self, registry, alice):
        node = make_pow_node("a", "msg-seed", registry)
        tx = _util_tx(alice)
        node.handle_message({"type": "tx", "body": tx.to_dict(), "sender": "0xb"})
        assert tx.id in node.mempool


# ---------------------------------------------------------------------------
# Watch lifecycle through a reorg
# ---------------------------------------------------------------------------

class TestWatchAndReorg:
    def test_included_then_confirmed(self, registry, alice):
        rt = StubRuntime()
        node = make_pow_node("a", "wr-seed", registry, runtime=rt, confirm_depth=3)
        tx = _util_tx(alice)
        node.submit_transaction(tx)  # watch=True
        node.mine_block()
        included = _events(rt, "tx_included")
        assert len(included) == 1
        assert included[0] == {
            "event": "tx_included",
            "node": "a",
            "at": 0,
            "tx_id": tx.id,
            "depth": 1,
            "height": 1,
        }
        assert _events(rt, "tx_confirmed") == []
        node.mine_block()
        node.mine_block()
        confirmed = _events(rt, "tx_confirmed")
        assert len(confirmed) == 1
        assert confirmed[0]["depth"] == 3 and confirmed[0]["height"] == 1
        node.mine_block()  # deeper burial must not re-fire
        assert len(_events(rt, "tx_confirmed")) == 1

    def test_reorg_restores_and_rewatches(self, registry, alice):
        # Rival fork built privately by B; C watches a tx that gets evicted.
        builder_a = make_pow_node("a", "wr-a", registry)
        builder_b = make_pow_node("b", "wr-b", registry)
        rt = StubRuntime()
        watcher = make_pow_node("c", "wr-c", registry, runtime=rt, confirm_depth=3)

        tx = _util_tx(alice)
        builder_a.submit_transaction(tx, watch=False)
        short_block = builder_a.mine_block()  # height 1, carries the tx
        long_one = builder_b.mine_block()  # rival height 1, empty
        long_two = builder_b.mine_block()  # rival height 2

        watcher.submit_transaction(tx)
        assert watcher.receive_block(short_block, sender=None) == "accepted"
        assert len(_events(rt, "tx_included")) == 1

        # Heavier rival arrives child-first to exercise the orphan path too.
        assert watcher.receive_block(long_two, sender=None) == "orphan"
        assert watcher.receive_block(long_one, sender=None) == "accepted"
        assert watcher.view.canonical_tip == long_two.id

        reorgs = _events(rt, "reorg")
        assert len(reorgs) == 1
        assert reorgs[0]["old_tip"] == short_block.id
        assert reorgs[0]["new_tip"] == long_two.id
        assert reorgs[0]["fork_height"] == 0
        assert reorgs[0]["evicted_blocks"] == [short_block.id]
        assert reorgs[0]["restored_txs"] == [tx.id]
        assert tx.id in watcher.mempool

        # Once re-included on the rival chain the watch fires afresh.
        builder_b.receive_transaction(tx, sender="0xc")
        third = builder_b.mine_block()
        assert watcher.receive_block(third, sender=None) == "accepted"
        included = _events(rt, "tx_included")
        assert len(included) == 2 and included[-1]["height"] == 3

    def test_shared_tx_not_restored(self, registry, alice, bob):
        # A tx present on both sides of the fork must not reappear pooled.
        shared = _util_tx(alice)
        lone = _util_tx(bob)
        builder_a = make_pow_node("a", "wr-a", registry)
        builder_a.submit_transaction(shared, watch=False)
        builder_a.submit_transaction(lone, watch=False)
        short_block = builder_a.mine_block()

        builder_b = make_pow_node("b", "wr-b", registry)
        builder_b.submit_transaction(shared, watch=False)
        rival_one = builder_b.mine_block()
        rival_two = builder_b.mine_block()

        rt = StubRuntime()
        watcher = make_pow_node("c", "wr-c", registry, runtime=rt)
        watcher.receive_block(short_block, sender=None)
        watcher.receive_block(rival_one, sender=None)
        watcher.receive_block(rival_two, sender=None)
        assert watcher.view.canonical_tip == rival_two.id
        restored = _events(rt, "reorg")[0]["restored_txs"]
        assert restored == [lone.id]
        assert shared.id not in watcher.mempool
        assert lone.id in watcher.mempool


# ---------------------------------------------------------------------------
# Parameter validation
# ---------------------------------------------------------------------------

class TestParams:
    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="unknown consensus mode"):
            NetParams(mode="pos")

    def test_poa_requires_authorities(self):
        with pytest.raises(ValueError, match="authority set"):
            NetParams(mode="poa")

    def test_unknown_role_rejected(self, registry):
        from mfgchain.chainview import bootstrap

        with pytest.raises(ValueError, match="unknown role"):
            Node(
                "x",
                generate_keypair("role-seed"),
                "pirate",
                bootstrap(registry, genesis_timestamp=0, mode=MODE_POW),
                NetParams(mode=MODE_POW),
                StubRuntime(),
            )

    def test_authority_role_requires_membership(self, registry):
        from mfgchain.chainview import bootstrap

        key = generate_keypair("outsider-seed")
        with pytest.raises(ValueError, match="authority membership"):
            Node(
                "x",
                key,
                "authority",
                bootstrap(registry, genesis_timestamp=0, mode="poa"),
                NetParams(mode="poa", authorities=("0x" + "11" * 20,)),
                StubRuntime(),
            )
