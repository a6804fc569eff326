"""Shared fixtures and the acceptance-summary reporter.

Tests marked ``@pytest.mark.acceptance("<criterion>")`` get one PASS/FAIL
line each in the terminal summary, so the acceptance gate is readable at a
glance even inside a long pytest run.
"""

from __future__ import annotations

import pytest

from mfgchain.chainview import bootstrap
from mfgchain.contracts import genesis_state
from mfgchain.keys import generate_keypair
from mfgchain.node import MODE_POA, MODE_POW, NetParams, Node

_ACCEPTANCE: list[tuple[str, str]] = []  # (criterion, outcome) in run order


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(name): acceptance criterion covered by this test"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        _ACCEPTANCE.append((marker.args[0], "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        terminalreporter.write_line(f"{outcome}  {name}")


# ---------------------------------------------------------------------------
# Deterministic identities shared across the suite
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def alice():
    return generate_keypair("test/alice")


@pytest.fixture(scope="session")
def bob():
    return generate_keypair("test/bob")


@pytest.fixture(scope="session")
def carol():
    return generate_keypair("test/carol")


@pytest.fixture(scope="session")
def machine_key():
    return generate_keypair("test/machine")


@pytest.fixture()
def registered_state(alice, bob, carol, machine_key):
    """Genesis contract state with the four standard parties registered."""
    return genesis_state(
        {
            kp.address: kp.public_hex
            for kp in (alice, bob, carol, machine_key)
        }
    )


@pytest.fixture()
def registry(alice, bob, carol, machine_key):
    return {
        kp.address: kp.public_hex for kp in (alice, bob, carol, machine_key)
    }


class StubRuntime:
    """Minimal node runtime: manual clock, recorded messages, no voting peers."""

    def __init__(self, seed: int = 0):
        import random

        self.clock = 0
        self.sent: list[tuple[str, dict]] = []
        self.records: list[dict] = []
        self._rng = random.Random(seed)

    def now(self) -> int:
        return self.clock

    def rng(self, label: str):
        return self._rng

    def emit(self, record: dict) -> None:
        self.records.append(record)

    def send(self, to_address: str, message: dict) -> None:
        self.sent.append((to_address, message))

    def collect_votes(self, proposer, block, height):
        return []


@pytest.fixture()
def stub_runtime():
    return StubRuntime()


def make_pow_node(
    name: str,
    seed: str,
    participants: dict[str, str],
    bits: int = 4,
    runtime=None,
    confirm_depth: int = 3,
) -> Node:
    identity = generate_keypair(seed)
    params = NetParams(
        mode=MODE_POW, difficulty_bits=bits, confirm_depth=confirm_depth
    )
    view = bootstrap(participants, genesis_timestamp=0, mode=MODE_POW)
    return Node(name, identity, "miner", view, params, runtime or StubRuntime())


def make_poa_node(
    name: str,
    identity,
    authorities: tuple[str, ...],
    participants: dict[str, str],
    runtime=None,
    role: str = "authority",
    confirm_depth: int = 3,
) -> Node:
    params = NetParams(
        mode=MODE_POA, authorities=authorities, confirm_depth=confirm_depth
    )
    view = bootstrap(participants, genesis_timestamp=0, mode=MODE_POA)
    return Node(name, identity, role, view, params, runtime or StubRuntime())
