"""Append-only session store for enrollment tables and per-round records.

Plain text, one record per line, each line closed by its own CRC so a
truncated tail is detected and dropped.  A verification pass replays the
accepted rounds through the table-update rule and re-derives every stored
digest, which catches edits that keep the line CRCs intact.

Line grammar (see docs/store.md for the worked example):

    S|<version>|<stamp>|<seed>|<n_cells>|<r0..r_{n-1} hex>|<counter>|<crc4>
    R|<round>|<t>|<challenge16>|<reply16>|<verdict>|<reason>|<digest16>|<crc4>
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .auth import CellReplyTable, decode_challenge, inverse_transform, update_table
from .bits import mix64
from .framing import crc16_dnp

FORMAT_VERSION = 1


class StoreError(Exception):
    pass


class StoreCorrupt(StoreError):
    """A non-final record failed its CRC or the replay digest check."""


@dataclass(frozen=True)
class RoundRecord:
    round: int
    timestamp: float
    challenge: int
    reply_wire: int
    verdict: str              # "accepted" | "rejected"
    reason: str               # "" when accepted
    table_digest: int


@dataclass(frozen=True)
class SessionHeader:
    stamp: str
    seed: int
    replies: list[int]
    round_counter: int


def table_digest(table: CellReplyTable) -> int:
    """64-bit fold of all table replies (order-sensitive)."""
    acc = 0
    for i, r in enumerate(table.replies):
        acc = mix64(acc ^ ((i << 8) | r))
    return acc


def _sealed(fields: list[str]) -> str:
    body = "|".join(fields)
    return f"{body}|{crc16_dnp(body.encode('ascii')):04x}"


def _unseal(line: str) -> list[str]:
    body, sep, crc = line.rpartition("|")
    if not sep or len(crc) != 4:
        raise StoreError("record missing CRC field")
    if int(crc, 16) != crc16_dnp(body.encode("ascii")):
        raise StoreError("record CRC mismatch")
    return body.split("|")


class SessionStore:
    """Single-writer append-only store; readers load point-in-time snapshots."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = None

    def open_session(self, stamp: str, seed: int, table: CellReplyTable) -> None:
        self._fh = open(self.path, "w", encoding="ascii")
        fields = ["S", str(FORMAT_VERSION), stamp, str(seed), str(table.n_cells),
                  "".join(f"{r:02x}" for r in table.replies), str(table.round_counter)]
        self._fh.write(_sealed(fields) + "\n")
        self._fh.flush()

    def append_round(self, rec: RoundRecord) -> None:
        if self._fh is None:
            raise StoreError("session not open")
        fields = ["R", str(rec.round), f"{rec.timestamp:.3f}",
                  f"{rec.challenge:016x}", f"{rec.reply_wire:016x}",
                  rec.verdict, rec.reason, f"{rec.table_digest:016x}"]
        self._fh.write(_sealed(fields) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def load_session(path: str | Path) -> tuple[SessionHeader | None, list[RoundRecord]]:
    """Read a session file back; a corrupt/truncated *final* line is dropped,
    corruption anywhere else raises StoreCorrupt.  An empty file is an empty
    session (header None, no records).
    """
    raw = Path(path).read_text(encoding="ascii")
    if not raw.strip():
        return None, []
    lines = raw.split("\n")
    trailing_newline = raw.endswith("\n")
    if trailing_newline:
        lines = lines[:-1]

    parsed: list[list[str]] = []
    for i, line in enumerate(lines):
        final = i == len(lines) - 1
        try:
            fields = _unseal(line)
        except (StoreError, ValueError):
            if final:
                break  # torn tail record: drop it, keep the rest
            raise StoreCorrupt(f"{path}: corrupt record at line {i + 1}")
        parsed.append(fields)

    if not parsed or parsed[0][0] != "S":
        raise StoreError(f"{path}: missing session header")
    h = parsed[0]
    if int(h[1]) != FORMAT_VERSION:
        raise StoreError(f"{path}: unsupported store version {h[1]}")
    n = int(h[4])
    rhex = h[5]
    header = SessionHeader(
        stamp=h[2], seed=int(h[3]),
        replies=[int(rhex[2 * i:2 * i + 2], 16) for i in range(n)],
        round_counter=int(h[6]),
    )
    records = []
    last_round = 0
    for i, fields in enumerate(parsed[1:], start=2):
        if fields[0] != "R" or len(fields) != 8:
            raise StoreCorrupt(f"{path}: unexpected record kind at line {i}")
        rec = RoundRecord(
            round=int(fields[1]), timestamp=float(fields[2]),
            challenge=int(fields[3], 16), reply_wire=int(fields[4], 16),
            verdict=fields[5], reason=fields[6], table_digest=int(fields[7], 16),
        )
        if rec.round <= last_round:
            raise StoreCorrupt(f"{path}: round numbers not increasing at line {i}")
        last_round = rec.round
        records.append(rec)
    return header, records


def verify_session(path: str | Path) -> int:
    """Replay accepted rounds from the enrollment table and check every
    stored digest.  Returns the number of records verified; raises
    StoreCorrupt at the first round whose digest cannot be reproduced.
    """
    header, records = load_session(path)
    if header is None:
        return 0
    table = CellReplyTable(list(header.replies), header.round_counter)
    for rec in records:
        if rec.verdict == "accepted":
            challenge = decode_challenge(rec.challenge, table.n_cells)
            pre = inverse_transform(rec.reply_wire, challenge.transform)
            table = update_table(table, challenge, pre)
        if table_digest(table) != rec.table_digest:
            raise StoreCorrupt(
                f"{path}: digest mismatch at round {rec.round}; store corrupt or tampered")
    return len(records)
