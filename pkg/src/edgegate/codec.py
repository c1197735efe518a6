"""Canonical encoder/decoder for the cloud record envelope.

The wire form is a UTF-8 JSON object with top-level keys in a fixed order:
``device_id``, ``timestamp``, ``event_type``, ``seq``, ``data``. Encoding is
compact (no insignificant whitespace) and deterministic, so equal records
always produce identical bytes; that byte stability is what makes
retransmissions safely deduplicable. Decoding additionally accepts
pretty-printed input and, for compatibility with senders that omit it,
tolerates a missing ``seq`` (the caller assigns one from arrival order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .core import CoreError, DeviceId, Timestamp

EVENT_TYPES: tuple[str, ...] = (
    "access_granted",
    "access_denied",
    "flame_detected",
    "flow_anomaly",
    "status",
    "personnel_scan",
)

_TOP_LEVEL_KEYS = ("device_id", "timestamp", "event_type", "seq", "data")
_REQUIRED_KEYS = ("device_id", "timestamp", "event_type", "data")

DataValue = str | int | bool


class CodecError(ValueError):
    """Base for encode/decode failures."""


class InvalidRecordError(CodecError):
    """A record value violates the envelope invariants."""


class ParseError(CodecError):
    """Input bytes are not well-formed JSON (or not UTF-8)."""


class SchemaError(CodecError):
    """JSON parsed but does not match the envelope schema."""


class UnknownEventTypeError(SchemaError):
    """event_type is not one of the closed enumeration."""


def _check_data(data: dict) -> None:
    for k, v in data.items():
        if not isinstance(k, str):
            raise InvalidRecordError(f"data key must be a string, got {k!r}")
        if not isinstance(v, (str, int, bool)) or isinstance(v, float):
            raise InvalidRecordError(
                f"data value for {k!r} must be string/integer/boolean, got {type(v).__name__}"
            )


@dataclass(frozen=True)
class CloudRecord:
    """One event envelope: who, when, what, plus a scalar-valued data map.

    ``seq`` increases monotonically per device and combines with the device
    id to form the idempotency key used for retransmission dedup. Envelope
    timestamps are whole-second (the wire shape); sub-second stamps truncate
    here so that every valid record round-trips byte-exactly.
    """

    device_id: DeviceId
    timestamp: Timestamp
    event_type: str
    data: dict[str, DataValue] = field(default_factory=dict)
    seq: int = 0

    def __post_init__(self) -> None:
        if self.event_type not in EVENT_TYPES:
            raise InvalidRecordError(f"unknown event_type: {self.event_type!r}")
        if not isinstance(self.seq, int) or isinstance(self.seq, bool) or self.seq < 0:
            raise InvalidRecordError(f"seq must be a non-negative integer, got {self.seq!r}")
        if self.timestamp.millis != 0:
            object.__setattr__(self, "timestamp", Timestamp(self.timestamp.seconds_utc, 0))
        _check_data(self.data)


def encode(record: CloudRecord) -> bytes:
    """Serialize to the compact canonical byte form.

    Key order is fixed and data keys keep their insertion order, so encoding
    is a pure function of the record value.
    """
    envelope = {
        "device_id": record.device_id.value,
        "timestamp": record.timestamp.iso8601(),
        "event_type": record.event_type,
        "seq": record.seq,
        "data": record.data,
    }
    return json.dumps(envelope, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode(payload: bytes, *, default_seq: int = 0) -> CloudRecord:
    """Parse envelope bytes, compact or pretty-printed.

    Unknown top-level keys, unknown event types, malformed timestamps and
    non-scalar data values are all rejected. A missing ``seq`` is assigned
    ``default_seq``.
    """
    record, _ = parse_record(payload, default_seq=default_seq)
    return record


def parse_record(payload: bytes, *, default_seq: int = 0) -> tuple[CloudRecord, bool]:
    """Like :func:`decode`, also reporting whether ``seq`` was present."""
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"payload is not UTF-8: {exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"payload is not JSON: {exc}") from None

    if not isinstance(obj, dict):
        raise SchemaError("top-level JSON value must be an object")
    unknown = set(obj) - set(_TOP_LEVEL_KEYS)
    if unknown:
        raise SchemaError(f"unknown top-level keys: {sorted(unknown)}")
    missing = [k for k in _REQUIRED_KEYS if k not in obj]
    if missing:
        raise SchemaError(f"missing required keys: {missing}")

    event_type = obj["event_type"]
    if not isinstance(event_type, str):
        raise SchemaError("event_type must be a string")
    if event_type not in EVENT_TYPES:
        raise UnknownEventTypeError(f"unknown event_type: {event_type!r}")

    if not isinstance(obj["device_id"], str):
        raise SchemaError("device_id must be a string")
    if not isinstance(obj["timestamp"], str):
        raise SchemaError("timestamp must be a string")
    try:
        device_id = DeviceId(obj["device_id"])
        timestamp = Timestamp.from_iso8601(obj["timestamp"])
    except CoreError as exc:
        raise SchemaError(str(exc)) from None

    seq_present = "seq" in obj
    seq = obj["seq"] if seq_present else default_seq
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise SchemaError(f"seq must be a non-negative integer, got {seq!r}")

    data = obj["data"]
    if not isinstance(data, dict):
        raise SchemaError("data must be an object")
    for k, v in data.items():
        if not isinstance(v, (str, int, bool)) or isinstance(v, float):
            raise SchemaError(f"data value for {k!r} must be string/integer/boolean")

    try:
        record = CloudRecord(
            device_id=device_id,
            timestamp=timestamp,
            event_type=event_type,
            data=dict(data),
            seq=seq,
        )
    except InvalidRecordError as exc:
        raise SchemaError(str(exc)) from None
    return record, seq_present


def idempotency_key(record: CloudRecord) -> str:
    """Stable retransmission identity: ``<device_id>:<seq>``."""
    return f"{record.device_id.value}:{record.seq}"
