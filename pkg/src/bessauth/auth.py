"""64-bit challenge-reply scheme backed by live cell measurements.

Wire words (big-endian bit numbering, bit 63 most significant):

challenge: [63..48] poll mask (bit k selects cell k for measurement,
           exactly two bits set) | [47..16] auth mask (bit k selects cell
           k's table reply, one to four bits set) | [15..0] transform
           descriptor (mode in bits 15..14, key parameter in bits 13..0).

reply (pre-transform): [63..32] measurement block, (q_v, q_soc) byte pairs
           for the polled cells in ascending cell order | [31..0] auth
           block, 8-bit table replies of the auth-selected cells in
           ascending cell order, left-aligned, zero-padded.

The transmitted reply is the pre-transform word passed through the
descriptor's keyed permutation; all four modes are invertible.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .bits import MASK64, bitrev64, byteswap64, mix64, rotl64, rotr64

TABLE_UPDATE_MULT = 0x9E3779B97F4A7C15
DEFAULT_TOLERANCE = 2  # quantization counts, per measurement component

MIN_CELLS = 2
MAX_CELLS = 16  # poll mask width bounds the addressable cells


class AuthError(Exception):
    pass


class MalformedChallenge(AuthError):
    """Challenge word violates the layout invariants for the local cell count."""


class RejectReason(Enum):
    AUTH_BLOCK_MISMATCH = "auth_block_mismatch"
    MEASUREMENT_OUT_OF_TOLERANCE = "measurement_out_of_tolerance"
    MALFORMED_CHALLENGE = "malformed_challenge"
    DECODE_FAILURE = "decode_failure"


@dataclass
class CellReplyTable:
    """Per-cell 8-bit reply secrets plus the successful-round counter.

    Master and outstation each hold a copy; the update rule is a pure
    function of (table, challenge, pre-transform reply), which is what keeps
    the two copies identical without ever being re-exchanged.
    """

    replies: list[int]
    round_counter: int = 0

    def __post_init__(self):
        if not all(0 <= r <= 0xFF for r in self.replies):
            raise AuthError("table replies must be 8-bit values")

    @property
    def n_cells(self) -> int:
        return len(self.replies)

    def copy(self) -> "CellReplyTable":
        return CellReplyTable(list(self.replies), self.round_counter)


@dataclass(frozen=True)
class Challenge:
    poll_mask: int      # 16-bit
    auth_mask: int      # 32-bit
    transform: int      # 16-bit descriptor

    def encode(self) -> int:
        return ((self.poll_mask & 0xFFFF) << 48) | ((self.auth_mask & 0xFFFFFFFF) << 16) \
            | (self.transform & 0xFFFF)

    def polled_cells(self) -> list[int]:
        return _mask_cells(self.poll_mask)

    def auth_cells(self) -> list[int]:
        return _mask_cells(self.auth_mask)


@dataclass(frozen=True)
class Reply:
    pre_transform: int
    wire: int


@dataclass(frozen=True)
class AuthOutcome:
    accepted: bool
    reason: RejectReason | None = None
    # received quantized (q_v, q_soc) per polled cell; set on acceptance
    measurements: tuple[tuple[int, int], ...] | None = None
    # decoded pre-transform word; feeds the table update on acceptance
    pre_transform: int | None = None


def _mask_cells(mask: int) -> list[int]:
    return [k for k in range(mask.bit_length()) if mask >> k & 1]


def quantize_measurement(voltage: float, soc: float) -> tuple[int, int]:
    """8-bit quantization: voltage mapped over [2.0, 4.5] V, SoC over [0, 100] %.

    Rounding is half-up so both ends of the link agree bit-exactly.
    """
    v_frac = min(max((voltage - 2.0) / 2.5, 0.0), 1.0)
    s_frac = min(max(soc / 100.0, 0.0), 1.0)
    return int(v_frac * 255.0 + 0.5), int(s_frac * 255.0 + 0.5)


def dequantize_measurement(q_v: int, q_soc: int) -> tuple[float, float]:
    return 2.0 + 2.5 * q_v / 255.0, 100.0 * q_soc / 255.0


def transform_mode(descriptor: int) -> int:
    return (descriptor >> 14) & 0x3


def transform_param(descriptor: int) -> int:
    return descriptor & 0x3FFF


def _key_word(descriptor: int) -> int:
    d = descriptor & 0xFFFF
    return d | (d << 16) | (d << 32) | (d << 48)


def transform(x: int, descriptor: int) -> int:
    """Keyed invertible 64-bit permutation selected by the descriptor."""
    m = _key_word(descriptor)
    y = (x ^ m) & MASK64
    mode = transform_mode(descriptor)
    if mode == 0:
        return y
    if mode == 1:
        return rotl64(y, (transform_param(descriptor) % 63) + 1)
    if mode == 2:
        return byteswap64(y)
    return bitrev64(y)


def inverse_transform(y: int, descriptor: int) -> int:
    m = _key_word(descriptor)
    mode = transform_mode(descriptor)
    if mode == 0:
        x = y
    elif mode == 1:
        x = rotr64(y, (transform_param(descriptor) % 63) + 1)
    elif mode == 2:
        x = byteswap64(y)
    else:
        x = bitrev64(y)
    return (x ^ m) & MASK64


def build_challenge(rng: random.Random, n_cells: int) -> Challenge:
    """Uniformly sample a valid challenge: 2 polled cells, 1-4 auth cells,
    random transform descriptor.  Deterministic for a given rng state.
    """
    if not MIN_CELLS <= n_cells <= MAX_CELLS:
        raise AuthError(f"n_cells must be in [{MIN_CELLS}, {MAX_CELLS}], got {n_cells}")
    poll = 0
    for c in rng.sample(range(n_cells), 2):
        poll |= 1 << c
    auth = 0
    for c in rng.sample(range(n_cells), rng.randint(1, min(4, n_cells))):
        auth |= 1 << c
    return Challenge(poll_mask=poll, auth_mask=auth, transform=rng.getrandbits(16))


def decode_challenge(word: int, n_cells: int) -> Challenge:
    """Split 16/32/16 and validate against the local cell count."""
    ch = Challenge(
        poll_mask=(word >> 48) & 0xFFFF,
        auth_mask=(word >> 16) & 0xFFFFFFFF,
        transform=word & 0xFFFF,
    )
    if bin(ch.poll_mask).count("1") != 2:
        raise MalformedChallenge(
            f"poll mask 0x{ch.poll_mask:04x} must select exactly 2 cells")
    if not 1 <= bin(ch.auth_mask).count("1") <= 4:
        raise MalformedChallenge(
            f"auth mask 0x{ch.auth_mask:08x} must select 1 to 4 cells")
    if ch.poll_mask >> n_cells or ch.auth_mask >> n_cells:
        raise MalformedChallenge(
            f"challenge selects cells >= local cell count {n_cells}")
    return ch


def build_reply(challenge: Challenge, measurements: Sequence[tuple[float, float]],
                table: CellReplyTable) -> Reply:
    """Assemble and transform the reply for a decoded challenge.

    measurements are (volts, soc percent) for the polled cells in ascending
    cell order; table supplies the auth-block secrets.
    """
    polled = challenge.polled_cells()
    if len(measurements) != len(polled):
        raise AuthError(
            f"need {len(polled)} measurements for polled cells {polled}, "
            f"got {len(measurements)}")
    meas_block = 0
    for volts, soc in measurements:
        q_v, q_soc = quantize_measurement(volts, soc)
        meas_block = (meas_block << 16) | (q_v << 8) | q_soc
    auth_block = 0
    for slot, cell in enumerate(challenge.auth_cells()):
        auth_block |= table.replies[cell] << (24 - 8 * slot)
    pre = (meas_block << 32) | auth_block
    return Reply(pre_transform=pre, wire=transform(pre, challenge.transform))


def verify_reply(challenge: Challenge, wire_reply: int, table: CellReplyTable,
                 expected_measurements: Sequence[tuple[int, int]],
                 tolerance: int = DEFAULT_TOLERANCE) -> AuthOutcome:
    """Check a received wire reply against local expectations.

    The auth block must match the local table exactly and its padding must
    be zero; received quantized measurements may differ from the expected
    ones by at most `tolerance` counts per component (the verifier cannot
    know the far end's sensor noise).  On acceptance the *received*
    measurements are returned; they, not the expectations, feed the table
    update so both copies stay synchronized.
    """
    pre = inverse_transform(wire_reply, challenge.transform)
    auth_cells = challenge.auth_cells()

    received_auth = [(pre >> (24 - 8 * slot)) & 0xFF for slot in range(len(auth_cells))]
    expected_auth = [table.replies[c] for c in auth_cells]
    if received_auth != expected_auth:
        return AuthOutcome(False, RejectReason.AUTH_BLOCK_MISMATCH)

    pad_bits = 8 * (4 - len(auth_cells))
    if pad_bits and pre & ((1 << pad_bits) - 1):
        return AuthOutcome(False, RejectReason.DECODE_FAILURE)

    polled = challenge.polled_cells()
    if len(expected_measurements) != len(polled):
        raise AuthError(
            f"need {len(polled)} expected measurements, got {len(expected_measurements)}")
    received = []
    for slot in range(len(polled)):
        chunk = (pre >> (48 - 16 * slot)) & 0xFFFF
        received.append((chunk >> 8, chunk & 0xFF))
    for (rv, rs), (ev, es) in zip(received, expected_measurements):
        if abs(rv - ev) > tolerance or abs(rs - es) > tolerance:
            return AuthOutcome(False, RejectReason.MEASUREMENT_OUT_OF_TOLERANCE)

    return AuthOutcome(True, measurements=tuple(received), pre_transform=pre)


def update_table(table: CellReplyTable, challenge: Challenge,
                 pre_transform: int) -> CellReplyTable:
    """Post-acceptance table evolution, applied independently on both ends.

    Every cell in poll|auth gets a new reply derived from the accepted
    pre-transform word, its old reply, its id and the new round counter;
    other cells are untouched.
    """
    new = table.copy()
    new.round_counter = table.round_counter + 1
    for cell in _mask_cells(challenge.poll_mask | challenge.auth_mask):
        seed = (pre_transform
                ^ (table.replies[cell] * TABLE_UPDATE_MULT & MASK64)
                ^ cell ^ new.round_counter) & MASK64
        new.replies[cell] = mix64(seed) & 0xFF
    return new


def enrollment_init(rng: random.Random, n_cells: int,
                    initial_measurements: Sequence[tuple[float, float]]) -> CellReplyTable:
    """Seed the reply table from a fresh random word and the first
    quantized measurements of every cell.
    """
    if not MIN_CELLS <= n_cells <= MAX_CELLS:
        raise AuthError(f"n_cells must be in [{MIN_CELLS}, {MAX_CELLS}], got {n_cells}")
    if len(initial_measurements) != n_cells:
        raise AuthError(f"need {n_cells} initial measurements")
    seed = rng.getrandbits(64)
    replies = []
    for i, (volts, soc) in enumerate(initial_measurements):
        q_v, q_soc = quantize_measurement(volts, soc)
        replies.append(mix64(seed ^ i ^ (q_v << 8) ^ q_soc) & 0xFF)
    return CellReplyTable(replies=replies, round_counter=0)
