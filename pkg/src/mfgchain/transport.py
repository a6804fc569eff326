"""Live transport: nodes exchanging newline-delimited messages over TCP.

Wall-clock counterpart to the simulator, for demonstration runs. Each
message is one canonical-serialization record terminated by a newline,
with the same envelope the simulator uses internally:

    {"type": "tx" | "block" | "request_block" | "hello",
     "body": ..., "sender": "0x..."}

Every node runs a listener thread plus per-connection readers; all
protocol work happens under the node's lock, preserving the
single-logical-event-loop model. Outgoing sends are best-effort
connect-write-close — loss is recovered by the periodic hello ticks,
exactly as dropped packets are in simulation.

Authority voting needs a synchronous round the wire protocol does not
carry, so live proof-of-authority is limited to a single authority
(threshold 1); multi-authority runs belong to the simulator.
"""

from __future__ import annotations

import socket
import threading
import time

from .chainview import bootstrap
from .codec import CanonicalizationError, canonical_parse, canonical_serialize
from .keys import KeyPair
from .model import Transaction, Vote
from .node import NetParams, Node, ROLE_AUTHORITY, ROLE_MINER
from .simnet import derive_stream

Endpoint = tuple[str, int]


def wall_ms() -> int:
    return int(time.time() * 1000)


class TraceCollector:
    """Thread-safe shared event log for a live network."""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)


class LiveNode:
    """One federation node bound to a TCP endpoint."""

    def __init__(
        self,
        name: str,
        identity: KeyPair,
        role: str,
        params: NetParams,
        genesis_participants: dict[str, str],
        genesis_timestamp: int,
        bind: Endpoint,
        directory: dict[str, Endpoint],
        seed: int = 0,
        trace: TraceCollector | None = None,
        sync_interval_s: float = 0.5,
    ):
        if params.mode == "poa" and len(params.authorities) > 1:
            raise ValueError("live transport supports at most one authority")
        self.name = name
        self.bind = bind
        self.directory = dict(directory)  # peer address → endpoint
        self.seed = seed
        self.trace = trace or TraceCollector()
        self.sync_interval_s = sync_interval_s
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._listener: socket.socket | None = None

        view = bootstrap(genesis_participants, genesis_timestamp, params.mode)
        peers = tuple(a for a in directory if a != identity.address)
        self.node = Node(
            name=name,
            identity=identity,
            role=role,
            view=view,
            params=params,
            runtime=self,
            peers=peers,
        )

    # -- runtime interface ----------------------------------------------------

    def now(self) -> int:
        return wall_ms()

    def rng(self, label: str):
        return derive_stream(self.seed, f"{self.name}/{label}")

    def emit(self, record: dict) -> None:
        self.trace.append(record)

    def send(self, to_address: str, message: dict) -> None:
        endpoint = self.directory.get(to_address)
        if endpoint is None:
            return
        payload = canonical_serialize(message) + b"\n"
        try:
            with socket.create_connection(endpoint, timeout=2.0) as conn:
                conn.sendall(payload)
        except OSError:
            pass  # hello anti-entropy will repair

    def collect_votes(self, node: Node, block, height: int) -> list[Vote]:
        return []  # single-authority networks need no extra endorsements

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(self.bind)
        listener.listen(16)
        listener.settimeout(0.2)
        self._listener = listener
        self._spawn(self._accept_loop)
        self._spawn(self._sync_loop)
        if self.node.params.mode == "pow" and self.node.role == ROLE_MINER:
            self._spawn(self._mining_loop)
        if self.node.params.mode == "poa" and self.node.role == ROLE_AUTHORITY:
            self._spawn(self._sealing_loop)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=5.0)
        if self._listener is not None:
            self._listener.close()

    def _spawn(self, target) -> None:
        thread = threading.Thread(target=target, daemon=True)
        thread.start()
        self._threads.append(thread)

    # -- threads --------------------------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            self._spawn(lambda c=conn: self._read_connection(c))

    def _read_connection(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(2.0)
            buffer = b""
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(65536)
                except (socket.timeout, OSError):
                    break
                if not chunk:
                    break
                buffer += chunk
                while b"\n" in buffer:
                    line, buffer = buffer.split(b"\n", 1)
                    if line.strip():
                        self._handle_line(line)

    def _handle_line(self, line: bytes) -> None:
        try:
            message = canonical_parse(line)
        except CanonicalizationError:
            return
        if not isinstance(message, dict):
            return
        with self._lock:
            self.node.handle_message(message)

    def _sync_loop(self) -> None:
        while not self._stop.wait(self.sync_interval_s):
            with self._lock:
                self.node.sync_tick()

    def _mining_loop(self) -> None:
        while not self._stop.is_set():
            with self._lock:
                self.node.mine_block(max_attempts=4096)
            time.sleep(0.001)  # let readers in between rounds

    def _sealing_loop(self) -> None:
        period = self.node.params.block_period_ms / 1000.0
        while not self._stop.wait(period):
            with self._lock:
                if self.node.poa_eligibility() != "forbidden":
                    self.node.seal_poa_block()

    # -- local operations ----------------------------------------------------------

    def submit(self, tx: Transaction):
        with self._lock:
            return self.node.submit_transaction(tx)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "tip": self.node.view.canonical_tip,
                "height": self.node.view.canonical_height,
                "state_root": self.node.view.canonical_root(),
                "mempool": sorted(self.node.mempool.ids()),
            }

    def confirmations(self, tx_id: str) -> int | None:
        with self._lock:
            if tx_id in self.node.mempool:
                return 0
            return self.node.view.confirmations(tx_id)


class LiveNetwork:
    """Several LiveNodes on localhost sharing one trace."""

    def __init__(
        self,
        specs: list[tuple[str, KeyPair, str]],  # (name, identity, role)
        params: NetParams,
        genesis_participants: dict[str, str],
        genesis_timestamp: int = 0,
        base_port: int = 0,
        seed: int = 0,
        sync_interval_s: float = 0.5,
    ):
        self.trace = TraceCollector()
        directory: dict[str, Endpoint] = {}
        binds: list[Endpoint] = []
        for i, (name, identity, _role) in enumerate(specs):
            port = base_port + i if base_port else _free_port()
            directory[identity.address] = ("127.0.0.1", port)
            binds.append(("127.0.0.1", port))
        self.nodes: dict[str, LiveNode] = {}
        for (name, identity, role), bind in zip(specs, binds):
            self.nodes[name] = LiveNode(
                name=name,
                identity=identity,
                role=role,
                params=params,
                genesis_participants=genesis_participants,
                genesis_timestamp=genesis_timestamp,
                bind=bind,
                directory=directory,
                seed=seed,
                trace=self.trace,
                sync_interval_s=sync_interval_s,
            )

    def start(self) -> None:
        for node in self.nodes.values():
            node.start()

    def stop(self) -> None:
        for node in self.nodes.values():
            node.stop()

    def wait_converged(self, tx_ids: list[str], depth: int, timeout_s: float) -> bool:
        """Poll until every tx is depth-confirmed everywhere and tips agree."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            snapshots = [n.snapshot() for n in self.nodes.values()]
            tips = {s["tip"] for s in snapshots}
            roots = {s["state_root"] for s in snapshots}
            if len(tips) == 1 and len(roots) == 1:
                done = all(
                    (node.confirmations(tx) or 0) >= depth
                    for node in self.nodes.values()
                    for tx in tx_ids
                )
                if done:
                    return True
            time.sleep(0.1)
        return False


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as probe:
        probe.bind(("127.0.0.1", 0))
        return probe.getsockname()[1]
