"""Sealing-mode latency benchmark: authority round-robin vs nonce search.

Runs the same sequential contract-call workload under both consensus
modes on the virtual clock and reports, per mode, the mean and sample
standard deviation of two latencies per transaction: submission to block
inclusion, and submission to a configurable confirmation depth.

Default calibration: three authorities at a 1 s period against two
miners whose difficulty/attempt-time combination yields ~4 s mean block
intervals, a desk-scale stand-in for the roughly 5× gap between the two
modes on real networks. Absolute numbers are properties of this
calibration; the orderings are the reproducible claim.
"""

from __future__ import annotations

import hashlib
import statistics
from dataclasses import dataclass, field

from .scenario import build_simulation, parse_scenario
from .trace import end_record, rebuild_view

CSV_HEADER = "tx_id,mode,submit_ms,included_ms,confirmed_ms"


class BenchError(RuntimeError):
    pass


def stats(samples: list[float]) -> tuple[float, float]:
    """Arithmetic mean and sample (n−1) standard deviation."""
    if not samples:
        raise ValueError("no samples")
    if len(samples) < 2:
        raise ValueError("standard deviation needs at least 2 samples")
    return statistics.fmean(samples), statistics.stdev(samples)


@dataclass(frozen=True)
class BenchmarkSpec:
    modes: tuple[str, ...] = ("poa", "pow")
    invocations_per_run: int = 20
    runs: int = 3
    confirm_depth: int = 12
    seed: int = 0
    poa_authorities: int = 3
    poa_period_ms: int = 1000
    pow_miners: int = 2
    pow_difficulty_bits: int = 10
    pow_attempt_time_ms: float = 7.8125
    latency_ms: tuple[int, int] = (10, 50)
    think_ms: tuple[int, int] = (0, 500)
    duration_ms: int = 1_800_000

    def __post_init__(self):
        if self.invocations_per_run < 1 or self.runs < 1 or self.confirm_depth < 1:
            raise ValueError("benchmark counts must be positive")
        if not set(self.modes) <= {"poa", "pow"}:
            raise ValueError("modes must be poa/pow")


@dataclass(frozen=True)
class TxRecord:
    tx_id: str
    mode: str
    submit_ms: int
    included_ms: int
    confirmed_ms: int


@dataclass(frozen=True)
class ModeAggregate:
    mode: str
    samples: int
    mean_inclusion_s: float
    std_inclusion_s: float
    mean_confirm_s: float
    std_confirm_s: float


@dataclass
class BenchmarkResult:
    spec: BenchmarkSpec
    records: list[TxRecord] = field(default_factory=list)
    run_seeds: dict[str, list[int]] = field(default_factory=dict)

    def aggregate(self, mode: str) -> ModeAggregate:
        rows = [r for r in self.records if r.mode == mode]
        if not rows:
            raise BenchError(f"no samples for mode {mode}")
        inclusion = [(r.included_ms - r.submit_ms) / 1000.0 for r in rows]
        confirm = [(r.confirmed_ms - r.submit_ms) / 1000.0 for r in rows]
        mi, si = stats(inclusion)
        mc, sc = stats(confirm)
        return ModeAggregate(mode, len(rows), mi, si, mc, sc)

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.tx_id},{r.mode},{r.submit_ms},{r.included_ms},{r.confirmed_ms}"
            )
        return "\n".join(lines) + "\n"

    def summary_table(self) -> str:
        depth = self.spec.confirm_depth
        out = [
            f"seed={self.spec.seed} runs={self.spec.runs}"
            f" invocations/run={self.spec.invocations_per_run} confirm_depth={depth}",
            "",
            f"{'mode':<6} {'n':>4} {'inclusion mean (s)':>20} {'std':>8}"
            f" {f'{depth}-conf mean (s)':>20} {'std':>8}",
        ]
        for mode in self.spec.modes:
            agg = self.aggregate(mode)
            out.append(
                f"{agg.mode:<6} {agg.samples:>4} {agg.mean_inclusion_s:>20.3f}"
                f" {agg.std_inclusion_s:>8.3f} {agg.mean_confirm_s:>20.3f}"
                f" {agg.std_confirm_s:>8.3f}"
            )
        return "\n".join(out) + "\n"


def _run_seed(base_seed: int, mode: str, run: int) -> int:
    digest = hashlib.sha256(f"bench/{base_seed}/{mode}/{run}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def bench_scenario_doc(spec: BenchmarkSpec, mode: str, seed: int) -> dict:
    """A self-contained scenario document for one benchmark run."""
    if mode == "poa":
        names = [f"auth{i}" for i in range(spec.poa_authorities)]
        nodes = [
            {"name": n, "role": "authority", "key_seed": f"bench/{n}"} for n in names
        ]
        consensus = {
            "mode": "poa",
            "authorities": names,
            "block_period_ms": spec.poa_period_ms,
        }
        submit_node = names[0]
    else:
        names = [f"miner{i}" for i in range(spec.pow_miners)]
        nodes = [{"name": n, "role": "miner", "key_seed": f"bench/{n}"} for n in names]
        consensus = {
            "mode": "pow",
            "difficulty_bits": spec.pow_difficulty_bits,
            "attempt_time_ms": spec.pow_attempt_time_ms,
        }
        submit_node = names[0]
    return {
        "name": f"bench-{mode}",
        "seed": seed,
        "consensus": consensus,
        "net": {"latency_ms": list(spec.latency_ms), "drop_rate": 0.0},
        "genesis": {
            "timestamp_ms": 0,
            "participants": [
                {"name": "caller", "key_seed": "bench/caller"},
                {"name": "counterpart", "key_seed": "bench/counterpart"},
            ],
        },
        "nodes": nodes,
        "confirm_depth": spec.confirm_depth,
        "duration_ms": spec.duration_ms,
        "workload": {
            "mode": "sequential",
            "node": submit_node,
            "count": spec.invocations_per_run,
            "signer": "@caller",
            "think_ms": list(spec.think_ms),
            "template": {
                "contract": "relationship",
                "method": "open",
                "args": {"counterparty": "@counterpart", "terms": "bench"},
            },
        },
    }


def extract_records(
    trace: list[dict], submit_node: str, mode: str, expected: int
) -> list[TxRecord]:
    """Pull per-tx latencies out of one run's trace.

    For each submitted tx the *last* inclusion/confirmation event at the
    submitting node wins: earlier ones may have been undone by a fork.
    """
    submit: dict[str, int] = {}
    included: dict[str, int] = {}
    confirmed: dict[str, int] = {}
    for rec in trace:
        if rec.get("node") != submit_node:
            continue
        event = rec.get("event")
        if event == "tx_submitted":
            submit[rec["tx_id"]] = rec["at"]
        elif event == "tx_included":
            included[rec["tx_id"]] = rec["at"]
        elif event == "tx_confirmed":
            confirmed[rec["tx_id"]] = rec["at"]

    if len(submit) != expected:
        raise BenchError(f"expected {expected} submissions, saw {len(submit)}")
    records = []
    for tx_id, s in submit.items():
        if tx_id not in included or tx_id not in confirmed:
            raise BenchError(f"tx {tx_id[:12]} never confirmed; run did not converge")
        i, c = included[tx_id], confirmed[tx_id]
        if not s <= i <= c:
            raise BenchError(f"tx {tx_id[:12]} has non-monotone latencies")
        records.append(TxRecord(tx_id, mode, s, i, c))
    return records


def run_benchmark(spec: BenchmarkSpec, progress=None) -> BenchmarkResult:
    result = BenchmarkResult(spec=spec)
    for mode in spec.modes:
        seeds = []
        for run in range(spec.runs):
            seed = _run_seed(spec.seed, mode, run)
            seeds.append(seed)
            doc = bench_scenario_doc(spec, mode, seed)
            scenario = parse_scenario(doc)
            sim = build_simulation(scenario)
            trace = sim.run()
            end = end_record(trace)
            if not sim.converged or end is None or not end.get("converged"):
                raise BenchError(
                    f"{mode} run {run} (seed {seed}) did not converge "
                    f"within {scenario.duration_ms} ms"
                )
            result.records.extend(
                extract_records(
                    trace,
                    doc["workload"]["node"],
                    mode,
                    spec.invocations_per_run,
                )
            )
            if progress is not None:
                progress(mode, run, seed)
        result.run_seeds[mode] = seeds
    return result


def depth_latencies(
    trace: list[dict], submit_node: str, depths: list[int]
) -> dict[int, list[float]]:
    """Post-hoc confirmation latency at arbitrary depths, from one trace.

    Uses the final canonical chain: a tx included at height h reaches depth
    d when the canonical block at height h+d−1 is accepted at the node.
    """
    view, _ = rebuild_view(trace)
    accepted: dict[str, int] = {}
    submit: dict[str, int] = {}
    for rec in trace:
        if rec.get("node") != submit_node:
            continue
        if rec.get("event") == "block_accepted":
            accepted[rec["block_id"]] = rec["at"]
        elif rec.get("event") == "tx_submitted":
            submit[rec["tx_id"]] = rec["at"]

    out: dict[int, list[float]] = {d: [] for d in depths}
    for tx_id, submitted in submit.items():
        h = view.inclusion_height(tx_id)
        if h is None:
            continue
        for d in depths:
            target = h + d - 1
            if target > view.canonical_height:
                continue
            block_id = view.canonical_block_at(target).id
            if block_id in accepted:
                out[d].append((accepted[block_id] - submitted) / 1000.0)
    return out
