"""Mock of the spreadsheet-backed cloud layer: an append-only row store with
a per-card authorization table behind a static bearer token.

Appends are deduplicated by idempotency key: retransmitting a record returns
the original row index without growing the table, which is what turns the
client's at-least-once delivery into exactly-once rows. Fault injection is a
simple availability flag so tests and scenarios can emulate outages that are
distinct from network partitions.
"""

from __future__ import annotations

import csv
import io
import json

from . import codec
from .codec import CloudRecord
from .core import AccessPolicy, Timestamp, Uid

DEFAULT_TOKEN = "edgegate-mock-token"

CSV_COLUMNS = ("row_index", "device_id", "timestamp", "event_type", "seq", "data")


class SinkError(Exception):
    """Base for sink-side failures."""


class UnauthorizedError(SinkError):
    """Bearer token mismatch; the table is untouched."""


class UnavailableError(SinkError):
    """Fault injection is active; callers should treat this like an outage."""


class SheetRow:
    __slots__ = ("row_index", "record", "received_at")

    def __init__(self, row_index: int, record: CloudRecord, received_at: Timestamp) -> None:
        self.row_index = row_index
        self.record = record
        self.received_at = received_at


class SheetTable:
    """Append-only storage: rows never mutate and indices are dense from 0."""

    def __init__(self) -> None:
        self._rows: list[SheetRow] = []
        self._seen: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def rows(self) -> tuple[SheetRow, ...]:
        return tuple(self._rows)

    def seen_keys(self) -> frozenset[str]:
        return frozenset(self._seen)

    def append(self, record: CloudRecord, received_at: Timestamp) -> int:
        """Append unless the idempotency key was already stored; either way
        the returned index is the row holding this key."""
        key = codec.idempotency_key(record)
        existing = self._seen.get(key)
        if existing is not None:
            return existing
        row_index = len(self._rows)
        self._rows.append(SheetRow(row_index, record, received_at))
        self._seen[key] = row_index
        return row_index


class AuthzTable:
    """uid -> access policy map; one policy per card."""

    def __init__(self) -> None:
        self._entries: dict[Uid, AccessPolicy] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def set_policy(self, policy: AccessPolicy) -> None:
        self._entries[policy.uid] = policy

    def get(self, uid: Uid) -> AccessPolicy | None:
        return self._entries.get(uid)


class CloudSink:
    """In-process sink implementation; the socket server wraps this same
    object, so both bindings behave identically."""

    def __init__(self, token: str = DEFAULT_TOKEN) -> None:
        self._token = token
        self.table = SheetTable()
        self.authz = AuthzTable()
        self.available = True
        # Arrival-order seq assignment for senders that omit the field.
        self._auto_seq: dict[str, int] = {}

    def seed_policies(self, policies: list[AccessPolicy] | dict[Uid, AccessPolicy]) -> None:
        values = policies.values() if isinstance(policies, dict) else policies
        for policy in values:
            self.authz.set_policy(policy)

    def _check(self, token: str) -> None:
        if token != self._token:
            raise UnauthorizedError("bad bearer token")
        if not self.available:
            raise UnavailableError("sink fault injection active")

    def append(self, token: str, record_bytes: bytes, received_at: Timestamp) -> int:
        """Validate, decode and store; duplicate keys return the original row
        index without appending."""
        self._check(token)
        record, seq_present = codec.parse_record(record_bytes)
        if not seq_present:
            device = record.device_id.value
            assigned = self._auto_seq.get(device, 0)
            self._auto_seq[device] = assigned + 1
            record = CloudRecord(
                device_id=record.device_id,
                timestamp=record.timestamp,
                event_type=record.event_type,
                data=record.data,
                seq=assigned,
            )
        return self.table.append(record, received_at)

    def query_policy(self, token: str, uid: Uid) -> AccessPolicy | None:
        """Stored policy for ``uid``, or None when the card is unknown."""
        self._check(token)
        return self.authz.get(uid)

    def export_csv(self) -> bytes:
        return export_csv(self.table)

    def state_dict(self) -> dict:
        """JSON-ready snapshot of the table, for offline export and replay."""
        return {
            "rows": [
                {
                    "row_index": row.row_index,
                    "received_at": row.received_at.iso8601(),
                    "record": json.loads(codec.encode(row.record)),
                }
                for row in self.table.rows
            ]
        }


def export_csv(table: SheetTable) -> bytes:
    """One row per stored record, header first, stable column order; the data
    map flattens to semicolon-joined key=value pairs."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in table.rows:
        record = row.record
        flattened = ";".join(f"{k}={_csv_scalar(v)}" for k, v in record.data.items())
        writer.writerow(
            [
                row.row_index,
                record.device_id.value,
                record.timestamp.iso8601(),
                record.event_type,
                record.seq,
                flattened,
            ]
        )
    return buf.getvalue().encode("utf-8")


def _csv_scalar(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def state_to_csv(state: dict) -> bytes:
    """CSV export from a saved sink snapshot (the ``state_dict`` shape)."""
    table = SheetTable()
    for row in state.get("rows", []):
        record = codec.decode(json.dumps(row["record"]).encode("utf-8"))
        received = Timestamp.from_iso8601(row["received_at"])
        table.append(record, received)
    return export_csv(table)
