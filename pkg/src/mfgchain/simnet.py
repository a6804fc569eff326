"""Deterministic multi-node network simulation on a virtual clock.

Time is an integer millisecond counter that only moves when the event
heap says so. All randomness comes from named streams derived from the
scenario seed, so a scenario runs to a byte-identical trace every time:
the same latency draws, the same drops, the same nonce searches, the
same block ids.

The simulator owns timers and message passing; protocol behavior lives
entirely in ``node.Node``. Per-message latency is a uniform draw, losses
are Bernoulli, and periodic hello ticks provide the anti-entropy that
recovers from dropped packets.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass
from typing import Callable

from . import oracle as oracle_mod
from .chainview import bootstrap
from .codec import canonical_serialize
from .consensus import MODE_POA, MODE_POW
from .keys import KeyPair
from .model import Transaction, Vote
from .node import (
    MiningJob,
    NetParams,
    Node,
    ROLE_AUTHORITY,
    ROLE_MINER,
)


def derive_stream(seed: int, label: str) -> random.Random:
    """Independent, reproducible RNG stream for one concern."""
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True)
class SimNetConfig:
    latency_ms: tuple[int, int] = (10, 50)
    drop_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.latency_ms
        if lo < 0 or hi < lo:
            raise ValueError("bad latency range")
        if not 0 <= self.drop_rate < 1:
            raise ValueError("drop_rate must be in [0, 1)")


@dataclass(frozen=True)
class NodeSpec:
    name: str
    role: str
    identity: KeyPair
    crash_at_ms: int | None = None


@dataclass
class _Event:
    at: int
    seq: int
    fn: Callable[[], None]

    def __lt__(self, other: "_Event") -> bool:
        return (self.at, self.seq) < (other.at, other.seq)


class Simulation:
    """One seeded run: nodes, workload, trace, convergence detection."""

    def __init__(
        self,
        node_specs: list[NodeSpec],
        params: NetParams,
        net: SimNetConfig,
        genesis_participants: dict[str, str],
        genesis_timestamp: int = 0,
        sync_interval_ms: int = 500,
        duration_ms: int = 600_000,
        attempt_time_ms: float = 1.0,
        scenario_header: dict | None = None,
    ):
        names = [s.name for s in node_specs]
        addresses = [s.identity.address for s in node_specs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate node names")
        if len(set(addresses)) != len(addresses):
            raise ValueError("duplicate node addresses")

        self.params = params
        self.net = net
        self.sync_interval_ms = sync_interval_ms
        self.duration_ms = duration_ms
        self.attempt_time_ms = attempt_time_ms
        self.now_ms = 0
        self.trace: list[dict] = []
        self._heap: list[_Event] = []
        self._seq = 0
        self._ended = False
        self.converged = False

        self._streams: dict[str, random.Random] = {}
        self._net_rng = self.rng("net")

        self.nodes: dict[str, Node] = {}
        self._by_address: dict[str, str] = {}
        self._specs = {s.name: s for s in node_specs}
        peers_of = {
            s.name: tuple(a for a in addresses if a != s.identity.address)
            for s in node_specs
        }
        for spec in node_specs:
            view = bootstrap(genesis_participants, genesis_timestamp, params.mode)
            node = Node(
                name=spec.name,
                identity=spec.identity,
                role=spec.role,
                view=view,
                params=params,
                runtime=self,
                peers=peers_of[spec.name],
            )
            self.nodes[spec.name] = node
            self._by_address[spec.identity.address] = spec.name

        self._mining_jobs: dict[str, tuple[int, MiningJob]] = {}  # name → (token, job)
        self._mining_tokens: dict[str, int] = {n: 0 for n in self.nodes}

        # Workload bookkeeping.
        self._scripted: list[tuple[int, str, Transaction]] = []
        self._sequential: dict | None = None
        self._seq_submitted = 0
        self._seq_done = 0
        self._pending_seq_tx: str | None = None
        self._workload_rng = self.rng("workload")
        self._scripted_remaining = 0
        self._watched_union: dict[str, str] = {}  # tx_id → submitting node

        self.oracle: oracle_mod.Oracle | None = None
        self._oracle_node: str | None = None

        header = {"event": "scenario", "at": 0}
        header.update(scenario_header or {})
        header.setdefault("seed", net.seed)
        header.setdefault("mode", params.mode)
        self.emit(header)
        any_view = next(iter(self.nodes.values())).view
        self.emit(
            {
                "event": "genesis",
                "at": 0,
                "block": any_view.genesis.to_dict(),
                "participants": dict(genesis_participants),
            }
        )

    # -- runtime interface used by nodes --------------------------------------

    def now(self) -> int:
        return self.now_ms

    def rng(self, label: str) -> random.Random:
        if label not in self._streams:
            self._streams[label] = derive_stream(self.net.seed, label)
        return self._streams[label]

    def emit(self, record: dict) -> None:
        self.trace.append(record)
        self._on_trace(record)

    def send(self, to_address: str, message: dict) -> None:
        name = self._by_address.get(to_address)
        if name is None:
            return
        if self.net.drop_rate > 0 and self._net_rng.random() < self.net.drop_rate:
            return
        lo, hi = self.net.latency_ms
        delay = self._net_rng.randint(lo, hi) if hi > lo else lo
        self.schedule(self.now_ms + delay, lambda: self._deliver(name, message))

    def collect_votes(self, proposer: Node, block, height: int) -> list[Vote]:
        """Synchronous endorsement round across the other live authorities."""
        votes = []
        for address in self.params.authorities:
            if address == proposer.address:
                continue
            name = self._by_address.get(address)
            if name is None:
                continue
            voter = self.nodes[name]
            vote = voter.vote_on(block, height)
            if vote is not None:
                votes.append(vote)
        return votes

    # -- scheduling ------------------------------------------------------------

    def schedule(self, at: int, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, _Event(max(at, self.now_ms), self._seq, fn))

    def _deliver(self, name: str, message: dict) -> None:
        node = self.nodes[name]
        if node.crashed:
            return
        node.handle_message(message)
        self._after_node_activity(name)

    # -- workload ----------------------------------------------------------------

    def add_scripted_tx(self, at_ms: int, node_name: str, tx: Transaction) -> None:
        if node_name not in self.nodes:
            raise ValueError(f"unknown workload node: {node_name}")
        self._scripted.append((at_ms, node_name, tx))

    def set_sequential_workload(
        self,
        node_name: str,
        count: int,
        make_tx: Callable[[int, int], Transaction],
        think_ms: tuple[int, int] = (0, 500),
    ) -> None:
        """Submit ``count`` txs one at a time, each after the previous one
        lands in a block plus a think delay. ``make_tx(i, now)`` builds tx i."""
        self._sequential = {
            "node": node_name,
            "count": count,
            "make": make_tx,
            "think": think_ms,
        }

    def attach_oracle(self, node_name: str, orc: oracle_mod.Oracle) -> None:
        self._oracle_node = node_name
        self.oracle = orc

    def _submit(self, node_name: str, tx: Transaction) -> None:
        node = self.nodes[node_name]
        if node.crashed:
            return
        check = node.submit_transaction(tx)
        if check:
            self._watched_union[tx.id] = node_name
        self._after_node_activity(node_name)

    def _submit_scripted(self, node_name: str, tx: Transaction) -> None:
        self._scripted_remaining -= 1
        self._submit(node_name, tx)

    def _next_sequential(self) -> None:
        spec = self._sequential
        assert spec is not None
        i = self._seq_submitted
        if i >= spec["count"]:
            return
        self._seq_submitted += 1
        tx = spec["make"](i, self.now_ms)
        self._pending_seq_tx = tx.id
        self._submit(spec["node"], tx)

    def _on_trace(self, record: dict) -> None:
        """Workload feedback: sequential submission advances on inclusion."""
        if (
            self._sequential is not None
            and record.get("event") == "tx_included"
            and record.get("tx_id") == self._pending_seq_tx
            and record.get("node") == self._sequential["node"]
        ):
            self._seq_done += 1
            self._pending_seq_tx = None
            if self._seq_submitted < self._sequential["count"]:
                lo, hi = self._sequential["think"]
                think = self._workload_rng.randint(lo, hi) if hi > lo else lo
                self.schedule(self.now_ms + think, self._next_sequential)

    def _workload_done(self) -> bool:
        if self._scripted_remaining > 0:
            return False
        if self._sequential is not None:
            return self._seq_submitted >= self._sequential["count"]
        return True

    # -- production drivers --------------------------------------------------------

    def _start_mining(self, name: str) -> None:
        node = self.nodes[name]
        if node.crashed or node.role != ROLE_MINER or self.params.mode != MODE_POW:
            return
        self._mining_tokens[name] += 1
        token = self._mining_tokens[name]
        job = node.start_mining()
        if job is None or job.nonce is None:
            return
        self._mining_jobs[name] = (token, job)
        finish_at = self.now_ms + max(1, round(job.attempts * self.attempt_time_ms))
        self.schedule(finish_at, lambda: self._finish_mining(name, token))

    def _finish_mining(self, name: str, token: int) -> None:
        node = self.nodes[name]
        current = self._mining_jobs.get(name)
        if node.crashed or current is None or current[0] != token:
            return
        _, job = current
        del self._mining_jobs[name]
        if node.job_is_stale(job):
            self._start_mining(name)
            return
        node.finish_mining(job)
        self._after_node_activity(name)
        self._start_mining(name)

    def _refresh_mining(self, name: str) -> None:
        """Restart a miner whose in-flight job no longer matches reality."""
        node = self.nodes[name]
        if node.crashed or node.role != ROLE_MINER or self.params.mode != MODE_POW:
            return
        current = self._mining_jobs.get(name)
        if current is None:
            self._start_mining(name)
        elif node.job_is_stale(current[1]):
            self._start_mining(name)  # bumps the token; old completion is ignored

    def _poa_tick(self, name: str) -> None:
        node = self.nodes[name]
        if not node.crashed and self.params.mode == MODE_POA:
            height = node.view.canonical_height + 1
            eligibility = node.poa_eligibility()
            if eligibility == "in-turn":
                node.seal_poa_block()
                self._after_node_activity(name)
            elif eligibility == "out-of-turn":
                n = len(self.params.authorities)
                wiggle = 500 + self.rng(f"wiggle/{name}").randrange(0, 500 * n)
                self.schedule(
                    self.now_ms + wiggle, lambda: self._poa_backup(name, height)
                )
        if not node.crashed:
            self.schedule(self.now_ms + self.params.block_period_ms, lambda: self._poa_tick(name))

    def _poa_backup(self, name: str, height: int) -> None:
        """Out-of-turn rescue seal, only if the scheduled signer never showed."""
        node = self.nodes[name]
        if node.crashed or node.view.canonical_height + 1 != height:
            return
        if node.poa_eligibility() != "forbidden":
            node.seal_poa_block()
            self._after_node_activity(name)

    def _sync_tick(self, name: str) -> None:
        node = self.nodes[name]
        if not node.crashed:
            node.sync_tick()
            self.schedule(self.now_ms + self.sync_interval_ms, lambda: self._sync_tick(name))

    def _crash(self, name: str) -> None:
        self.nodes[name].crashed = True
        self._mining_jobs.pop(name, None)
        self.emit({"event": "node_crashed", "node": name, "at": self.now_ms})

    def _after_node_activity(self, name: str) -> None:
        """Post-event hooks: mining template refresh and oracle polling."""
        if self.params.mode == MODE_POW:
            for miner in self.nodes:
                self._refresh_mining(miner)
        if self.oracle is not None and self._oracle_node is not None:
            oracle_node = self.nodes[self._oracle_node]
            if not oracle_node.crashed:
                self.oracle.poll(self.now_ms)

    # -- convergence ----------------------------------------------------------------

    def _alive(self) -> list[Node]:
        return [n for n in self.nodes.values() if not n.crashed]

    def is_converged(self) -> bool:
        if not self._workload_done():
            return False
        if self._sequential is not None and self._pending_seq_tx is not None:
            return False
        alive = self._alive()
        tips = {n.view.canonical_tip for n in alive}
        if len(tips) != 1:
            return False
        roots = {n.view.canonical_root() for n in alive}
        if len(roots) != 1:
            return False
        pools = {frozenset(n.mempool.ids()) for n in alive}
        if len(pools) != 1:
            return False
        # Every watched tx confirmed to depth on its submitting node. If the
        # submitter crashed, any live node that holds or has included the tx
        # stands in for it; a tx no live node ever saw is written off.
        for tx_id, name in self._watched_union.items():
            node = self.nodes[name]
            if node.crashed:
                holders = [
                    n
                    for n in alive
                    if tx_id in n.mempool
                    or n.view.inclusion_height(tx_id) is not None
                ]
                if not holders:
                    continue
                node = holders[0]
            depth = node.view.confirmations(tx_id)
            if depth is None or depth < self.params.confirm_depth:
                return False
        return True

    def _finish(self) -> None:
        self._ended = True
        alive = self._alive()
        self.emit(
            {
                "event": "end",
                "at": self.now_ms,
                "converged": self.converged,
                "tips": {n.name: n.view.canonical_tip for n in alive},
                "heights": {n.name: n.view.canonical_height for n in alive},
                "state_roots": {n.name: n.view.canonical_root() for n in alive},
                "mempool_sizes": {n.name: len(n.mempool) for n in alive},
            }
        )

    # -- main loop ---------------------------------------------------------------

    def run(self) -> list[dict]:
        for spec in self._specs.values():
            if spec.crash_at_ms is not None:
                self.schedule(spec.crash_at_ms, lambda n=spec.name: self._crash(n))
        for name, node in self.nodes.items():
            self.schedule(0, lambda n=name: self._sync_tick(n))
            if self.params.mode == MODE_POA and node.role == ROLE_AUTHORITY:
                self.schedule(
                    self.params.block_period_ms, lambda n=name: self._poa_tick(n)
                )
            if self.params.mode == MODE_POW and node.role == ROLE_MINER:
                self.schedule(0, lambda n=name: self._start_mining(n))

        self._scripted_remaining = len(self._scripted)
        for at, node_name, tx in sorted(self._scripted, key=lambda s: (s[0], s[2].id)):
            self.schedule(at, lambda n=node_name, t=tx: self._submit_scripted(n, t))
        if self._sequential is not None:
            self.schedule(0, self._next_sequential)

        while self._heap and not self._ended:
            event = heapq.heappop(self._heap)
            # Convergence is judged only at quiescent instants — when the
            # clock is about to advance, every send and handler at the
            # current time has run. A fixed-cadence check can alias with
            # the block period and always sample mid-propagation.
            if event.at > self.now_ms and self.is_converged():
                self.converged = True
                self._finish()
                break
            if event.at > self.duration_ms:
                break
            self.now_ms = event.at
            event.fn()
        if not self._ended:
            self.now_ms = min(self.now_ms, self.duration_ms)
            self._finish()
        return self.trace


def trace_to_bytes(trace: list[dict]) -> bytes:
    """Line-delimited canonical encoding; identical traces → identical bytes."""
    return b"".join(canonical_serialize(rec) + b"\n" for rec in trace)
