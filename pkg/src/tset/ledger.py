"""Append-only arbiter ledger with a verifiable hash chain.

Each entry is canonical compact JSON.  Entry i's chain hash is
SHA-256(chain[i-1] || entry_bytes[i]) with a 32-zero-byte genesis value, so
the final hash commits to the whole history and any byte of a saved ledger
that changes breaks verification.  The file form is a flat sequence of

    [4-byte big-endian entry length][entry bytes][32-byte chain hash]

records.  There is no update or delete: disputes are settled by reading.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

from .trust import TrustRecord, merchant_standing

GENESIS = b"\x00" * 32

EVENTS = frozenset({
    "Deposit", "TempAck", "Dispatch", "Accept", "Reject", "Release",
    "Settled", "Tamper", "Regenerate", "Abort", "DeadlineExpired",
})


class LedgerIntegrityError(Exception):
    """Stored ledger bytes fail chain verification or do not parse."""


class UnknownTransaction(Exception):
    """No ledger entry references the requested transaction."""


@dataclass(frozen=True)
class LedgerEntry:
    txn: str
    tick: int
    actor: str
    event: str
    token_digest: str = ""
    oi_digest: str = ""
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.event not in EVENTS:
            raise ValueError(f"unknown ledger event {self.event!r}")
        if self.tick < 0:
            raise ValueError("tick must be non-negative")

    def to_bytes(self) -> bytes:
        body = {
            "txn": self.txn,
            "tick": self.tick,
            "actor": self.actor,
            "event": self.event,
            "token_digest": self.token_digest,
            "oi_digest": self.oi_digest,
            "details": self.details,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()

    @staticmethod
    def from_bytes(data: bytes) -> "LedgerEntry":
        try:
            body = json.loads(data.decode())
            return LedgerEntry(body["txn"], body["tick"], body["actor"],
                               body["event"], body["token_digest"],
                               body["oi_digest"], body["details"])
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise LedgerIntegrityError(f"entry does not parse: {exc}") from exc


class Ledger:
    """In-memory chain plus file round-trip.  Strictly append-only."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._hashes: list[bytes] = []

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    @property
    def head(self) -> bytes:
        return self._hashes[-1] if self._hashes else GENESIS

    def append(self, entry: LedgerEntry) -> bytes:
        """Returns the new chain head."""
        link = hashlib.sha256(self.head + entry.to_bytes()).digest()
        self._entries.append(entry)
        self._hashes.append(link)
        return link

    # -- file form ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = []
        for entry, link in zip(self._entries, self._hashes):
            raw = entry.to_bytes()
            out.append(struct.pack(">I", len(raw)))
            out.append(raw)
            out.append(link)
        return b"".join(out)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def from_bytes(data: bytes) -> "Ledger":
        ledger = Ledger()
        pos = 0
        prev = GENESIS
        while pos < len(data):
            if pos + 4 > len(data):
                raise LedgerIntegrityError("truncated length prefix")
            (length,) = struct.unpack_from(">I", data, pos)
            pos += 4
            if pos + length + 32 > len(data):
                raise LedgerIntegrityError("truncated record")
            raw = data[pos:pos + length]
            pos += length
            stored = data[pos:pos + 32]
            pos += 32
            expected = hashlib.sha256(prev + raw).digest()
            if stored != expected:
                raise LedgerIntegrityError(
                    f"chain hash mismatch at entry {len(ledger)}")
            entry = LedgerEntry.from_bytes(raw)
            ledger._entries.append(entry)
            ledger._hashes.append(expected)
            prev = expected
        return ledger

    @staticmethod
    def load(path) -> "Ledger":
        with open(path, "rb") as fh:
            return Ledger.from_bytes(fh.read())

    def verify(self) -> bool:
        prev = GENESIS
        for entry, stored in zip(self._entries, self._hashes):
            expected = hashlib.sha256(prev + entry.to_bytes()).digest()
            if stored != expected:
                return False
            prev = expected
        return True


def dispute_report(ledger: Ledger, txn: str) -> dict:
    """Everything the arbiter can attest about one transaction: its entries
    in order, their chain positions, and the verified chain head."""
    if not ledger.verify():
        raise LedgerIntegrityError("ledger fails chain verification")
    rows = [(i, e) for i, e in enumerate(ledger.entries) if e.txn == txn]
    if not rows:
        raise UnknownTransaction(f"no ledger entries for {txn}")
    return {
        "txn": txn,
        "chain_head": ledger.head.hex(),
        "chain_length": len(ledger),
        "entries": [
            {"index": i, "tick": e.tick, "actor": e.actor, "event": e.event,
             "token_digest": e.token_digest, "oi_digest": e.oi_digest,
             "details": e.details}
            for i, e in rows
        ],
    }


def trust_lookup(records: dict[str, TrustRecord], merchant: str) -> dict:
    """Standing of one merchant as the arbiter reports it.  A merchant with
    no recorded verdicts (or never seen) is unrated, not perfect."""
    record = records.get(merchant)
    if record is None or record.total == 0:
        return {"merchant": merchant, "rated": False}
    standing = merchant_standing(record)
    standing["merchant"] = merchant
    standing["rated"] = True
    return standing
