"""Sealing rules: proof-of-work and round-robin proof-of-authority.

Proof of work treats the block id as a 256-bit big-endian integer and
requires ``difficulty_bits`` leading zero bits. Proof of authority walks
a fixed signer list round-robin by height; blocks sealed by the
scheduled signer carry weight 2, blocks sealed out of turn carry
weight 1, and a signer is barred while it appears among the most recent
``floor(N/2)`` sealers. A block also needs endorsement signatures from
``floor(N/2) + 1`` distinct authorities (the sealer counts as one).
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .codec import canonical_serialize, hash_bytes
from .keys import KeyPair, derive_address, verify_signature
from .model import Block, BlockHeader, Check, OK, Vote, fail

MODE_POW = "pow"
MODE_POA = "poa"

#: Base span, per authority, of the random delay applied before sealing
#: out of turn. Keeps the scheduled signer ahead of the pack.
OUT_OF_TURN_WIGGLE_MS = 500

IN_TURN_DIFFICULTY = 2
OUT_OF_TURN_DIFFICULTY = 1

_NONCE_PROBE = "__nonce_probe__"


# ---------------------------------------------------------------------------
# Proof of work
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MineResult:
    nonce: int | None
    attempts: int

    @property
    def found(self) -> bool:
        return self.nonce is not None


def pow_target(difficulty_bits: int) -> int:
    if not 0 <= difficulty_bits <= 255:
        raise ValueError("difficulty_bits out of range")
    return 1 << (256 - difficulty_bits)


def meets_target(block_hash: str, difficulty_bits: int) -> bool:
    return int(block_hash, 16) < pow_target(difficulty_bits)


def _header_probe_parts(header: BlockHeader) -> tuple[bytes, bytes]:
    """Split the canonical header bytes around the nonce slot.

    Hashing pre + decimal(nonce) + post is byte-identical to serializing
    the header with the nonce filled in, and avoids a full re-encode per
    attempt.
    """
    probed = dict(header.to_dict(), nonce=_NONCE_PROBE)
    blob = canonical_serialize(probed)
    token = b'"' + _NONCE_PROBE.encode("ascii") + b'"'
    if blob.count(token) != 1:
        raise ValueError("header collides with nonce probe")
    pre, _, post = blob.partition(token)
    return pre, post


def pow_mine(
    header: BlockHeader,
    difficulty_bits: int,
    rng: random.Random,
    max_attempts: int = 1 << 22,
) -> MineResult:
    """Scan nonces from a random starting point until the target is met.

    The header's own nonce field is ignored; the caller stamps the
    returned nonce into the block it actually seals. ``attempts`` counts
    hashes computed, including the successful one.
    """
    target = pow_target(difficulty_bits)
    pre, post = _header_probe_parts(header)
    nonce = rng.getrandbits(64)
    for attempt in range(1, max_attempts + 1):
        digest = hash_bytes(pre + str(nonce).encode("ascii") + post)
        if int(digest, 16) < target:
            return MineResult(nonce, attempt)
        nonce = (nonce + 1) % (1 << 64)
    return MineResult(None, max_attempts)


def pow_validate(block: Block, difficulty_bits: int) -> Check:
    if block.header.difficulty != difficulty_bits:
        return fail("difficulty")
    if not meets_target(block.id, block.header.difficulty):
        return fail("target")
    return OK


# ---------------------------------------------------------------------------
# Proof of authority
# ---------------------------------------------------------------------------

def in_turn_signer(authorities: Sequence[str], height: int) -> str:
    return authorities[height % len(authorities)]


def poa_difficulty(authorities: Sequence[str], height: int, sealer: str) -> int:
    if sealer == in_turn_signer(authorities, height):
        return IN_TURN_DIFFICULTY
    return OUT_OF_TURN_DIFFICULTY


def recency_window(authority_count: int) -> int:
    return authority_count // 2


def vote_threshold(authority_count: int) -> int:
    return authority_count // 2 + 1


def sign_vote(endorser: KeyPair, block_hash: str) -> Vote:
    return Vote(
        public_key=endorser.public_hex,
        signature=endorser.sign(bytes.fromhex(block_hash)).hex(),
    )


def poa_validate(
    block: Block,
    height: int,
    authorities: Sequence[str],
    recent_sealers: Iterable[str],
    check_votes: bool = True,
) -> Check:
    """Authority-schedule validation for a block at ``height``.

    ``recent_sealers`` are the sealer addresses of the preceding
    ``recency_window(N)`` blocks, newest or oldest first — order does
    not matter. ``check_votes=False`` skips only the endorsement-count
    threshold: a voter judging a fresh proposal must not demand the very
    endorsements that are still being gathered.
    """
    sealer = block.sealer_address
    if sealer not in authorities:
        return fail("authority")
    if sealer in set(recent_sealers):
        return fail("recent-signer")
    if block.header.difficulty != poa_difficulty(authorities, height, sealer):
        return fail("weight")

    endorsers = {sealer}
    seen_keys: set[str] = set()
    message = bytes.fromhex(block.id)
    for vote in block.votes:
        if vote.public_key in seen_keys:
            return fail("vote-duplicate")
        seen_keys.add(vote.public_key)
        try:
            raw = bytes.fromhex(vote.public_key)
            sig = bytes.fromhex(vote.signature)
        except ValueError:
            return fail("vote-signature")
        if not verify_signature(raw, message, sig):
            return fail("vote-signature")
        address = derive_address(raw)
        if address not in authorities:
            return fail("vote-authority")
        endorsers.add(address)
    if check_votes and len(endorsers) < vote_threshold(len(authorities)):
        return fail("votes")
    return OK


# ---------------------------------------------------------------------------
# Fork-choice weight
# ---------------------------------------------------------------------------

def block_weight(block: Block, mode: str) -> int:
    """Contribution of one block to its chain's cumulative weight.

    Genesis contributes nothing. Under proof of work a block weighs
    ``2 ** difficulty_bits``; under proof of authority it weighs its
    in-turn/out-of-turn difficulty directly.
    """
    if block.is_genesis():
        return 0
    if mode == MODE_POW:
        return 1 << block.header.difficulty
    if mode == MODE_POA:
        return block.header.difficulty
    raise ValueError(f"unknown consensus mode: {mode}")
