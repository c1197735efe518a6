from __future__ import annotations

import pytest

from edgegate.core import ALL_DAYS, AccessPolicy, DeviceId, Timestamp, Uid
from edgegate.codec import CloudRecord


@pytest.fixture
def listing_record() -> CloudRecord:
    """The canonical example record used throughout the wire-format docs."""
    return CloudRecord(
        device_id=DeviceId("AC_001"),
        timestamp=Timestamp.from_iso8601("2024-01-15T14:30:45Z"),
        event_type="access_granted",
        data={
            "uid": "A1B2C3D4",
            "gate_status": "open",
            "duration_ms": 4800,
            "location": "Main_Entrance",
        },
        seq=0,
    )


def always_open_policy(uid: str) -> AccessPolicy:
    return AccessPolicy(
        uid=Uid(uid), window_start=0, window_end=86399, allowed_days=ALL_DAYS
    )
