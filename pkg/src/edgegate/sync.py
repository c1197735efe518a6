"""Durable store-and-forward uplink: outbox queue, exponential-backoff retry,
and at-least-once in-order delivery.

The client sends the head-of-line record and nothing else until that record
is acknowledged, so sink row order always equals enqueue order. Failed sends
back off exponentially (1s, 2s, 4s, ... capped at 60s) with the attempt
counter kept per record. A record is only ever removed from the queue by an
acknowledgement, by dead-lettering after a finite retry budget is exhausted,
or by the queue's explicit overflow policy; there is no silent drop path.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Protocol

from . import codec
from .codec import CloudRecord
from .core import Timestamp


class SyncError(Exception):
    """Base for uplink errors."""


class InvalidAttemptError(SyncError, ValueError):
    """Retry attempt numbers start at 1."""


class QueueFullError(SyncError):
    """Outbox at capacity under the reject-new overflow policy."""


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff parameters; ``max_attempts=None`` retries forever."""

    t_base_s: float = 1.0
    t_max_s: float = 60.0
    max_attempts: int | None = None

    def __post_init__(self) -> None:
        if self.t_base_s <= 0:
            raise SyncError(f"t_base_s must be > 0, got {self.t_base_s}")
        if self.t_max_s < self.t_base_s:
            raise SyncError(f"t_max_s must be >= t_base_s, got {self.t_max_s}")
        if self.max_attempts is not None and self.max_attempts < 1:
            raise SyncError(f"max_attempts must be >= 1 or None, got {self.max_attempts}")


def backoff_delay(attempt: int, policy: RetryPolicy) -> float:
    """Delay before retry number ``attempt``: min(t_max, t_base * 2**(n-1)).

    Attempt numbers grow without bound under unbounded retries (a day-long
    partition reaches the thousands), so the doubling saturates at the cap
    instead of overflowing.
    """
    if attempt < 1:
        raise InvalidAttemptError(f"attempt number must be >= 1, got {attempt}")
    exponent = attempt - 1
    if exponent >= 1024:
        return policy.t_max_s
    return min(policy.t_max_s, policy.t_base_s * 2.0 ** exponent)


# Send outcomes delivered by a transport to its completion callback.


@dataclass(frozen=True)
class Ack:
    row_index: int


@dataclass(frozen=True)
class Nack:
    reason: str = ""


@dataclass(frozen=True)
class SendTimeout:
    pass


SendOutcome = Ack | Nack | SendTimeout


class TransportPort(Protocol):
    """Request/response port to the sink: send bytes, get exactly one outcome."""

    def send(self, payload: bytes, on_result: Callable[[SendOutcome], None]) -> None: ...


@dataclass(frozen=True)
class DeliveryReceipt:
    key: str
    row_index: int
    acked_at: Timestamp


class OverflowPolicy:
    REJECT_NEW = "reject_new"
    DROP_OLDEST = "drop_oldest"


@dataclass
class OutboxEntry:
    record: CloudRecord
    enqueue_time: float
    attempts: int = 0


class OutboxQueue:
    """Bounded FIFO of unsent records. Capacity is sized for a full day or
    more of peak event rate; overflow behavior is explicit and counted."""

    def __init__(
        self, capacity: int = 100_000, overflow: str = OverflowPolicy.REJECT_NEW
    ) -> None:
        if capacity < 1:
            raise SyncError(f"capacity must be >= 1, got {capacity}")
        if overflow not in (OverflowPolicy.REJECT_NEW, OverflowPolicy.DROP_OLDEST):
            raise SyncError(f"unknown overflow policy: {overflow!r}")
        self.capacity = capacity
        self.overflow = overflow
        self._entries: deque[OutboxEntry] = deque()
        self.dropped = 0

    def __len__(self) -> int:
        return len(self._entries)

    def depth(self) -> int:
        return len(self._entries)

    def enqueue(
        self, record: CloudRecord, now: float, protected: OutboxEntry | None = None
    ) -> OutboxEntry | None:
        """Append; at capacity either reject this record or drop the oldest,
        counting the lost event either way.

        ``protected`` (the entry currently mid-send) is never evicted; when
        it is the only candidate the new record is rejected instead. Returns
        the evicted entry under drop-oldest, else None.
        """
        evicted: OutboxEntry | None = None
        if len(self._entries) >= self.capacity:
            if self.overflow == OverflowPolicy.REJECT_NEW:
                self.dropped += 1
                raise QueueFullError(f"outbox full at capacity {self.capacity}")
            victim_index = None
            for i, entry in enumerate(self._entries):
                if entry is not protected:
                    victim_index = i
                    break
            if victim_index is None:
                self.dropped += 1
                raise QueueFullError("outbox full and head is mid-send")
            evicted = self._entries[victim_index]
            del self._entries[victim_index]
            self.dropped += 1
        self._entries.append(OutboxEntry(record=record, enqueue_time=now))
        return evicted

    def head(self) -> OutboxEntry | None:
        return self._entries[0] if self._entries else None

    def pop_head(self) -> OutboxEntry:
        return self._entries.popleft()


class SchedulerPort(Protocol):
    """Minimal scheduling surface the client needs (satisfied by SimClock)."""

    def now(self) -> float: ...
    def now_ts(self) -> Timestamp: ...
    def schedule(self, delay_s: float, fn: Callable[[], None]): ...
    def run_next(self) -> bool: ...


class SyncClient:
    """Single-device flusher: drains the outbox strictly in order.

    State machine per record: send -> (ack: pop, emit receipt) | (failure:
    sleep backoff, resend). Only the acknowledgement of the most recent send
    is honored; stale acknowledgements from retransmission races are ignored,
    and the sink's idempotency-key dedup keeps the table single-copy.
    """

    def __init__(
        self,
        clock: SchedulerPort,
        transport: TransportPort,
        policy: RetryPolicy | None = None,
        queue: OutboxQueue | None = None,
        on_event: Callable[[str, dict], None] | None = None,
    ) -> None:
        self._clock = clock
        self._transport = transport
        self._policy = policy or RetryPolicy()
        self._queue = queue if queue is not None else OutboxQueue()
        self._on_event = on_event
        self._send_serial = 0
        self._in_flight: OutboxEntry | None = None  # sending or waiting out a backoff
        self.receipts: list[DeliveryReceipt] = []
        self.dead_letters: list[CloudRecord] = []
        self.enqueued_total = 0

    @property
    def queue(self) -> OutboxQueue:
        return self._queue

    def queue_depth(self) -> int:
        return self._queue.depth()

    @property
    def dropped_total(self) -> int:
        return self._queue.dropped

    def enqueue(self, record: CloudRecord) -> bool:
        """Queue a record for delivery. Returns False if the overflow policy
        rejected it (the loss is counted, never silent)."""
        now = self._clock.now()
        try:
            evicted = self._queue.enqueue(record, now, protected=self._in_flight)
        except QueueFullError:
            self._emit(
                "outbox_dropped",
                {"key": codec.idempotency_key(record), "mode": "rejected"},
            )
            return False
        if evicted is not None:
            self._emit(
                "outbox_dropped",
                {"key": codec.idempotency_key(evicted.record), "mode": "evicted"},
            )
        self.enqueued_total += 1
        self._emit(
            "outbox_enqueued",
            {"key": codec.idempotency_key(record), "depth": self._queue.depth()},
        )
        self._maybe_send()
        return True

    def _emit(self, kind: str, data: dict) -> None:
        if self._on_event is not None:
            self._on_event(kind, data)

    def _maybe_send(self) -> None:
        if self._in_flight is not None:
            return
        entry = self._queue.head()
        if entry is None:
            return
        self._in_flight = entry
        self._send(entry)

    def _send(self, entry: OutboxEntry) -> None:
        entry.attempts += 1
        self._send_serial += 1
        serial = self._send_serial
        payload = codec.encode(entry.record)
        key = codec.idempotency_key(entry.record)
        self._emit("send_attempt", {"key": key, "attempt": entry.attempts})
        self._transport.send(payload, lambda outcome: self._on_result(serial, entry, outcome))

    def _on_result(self, serial: int, entry: OutboxEntry, outcome: SendOutcome) -> None:
        if serial != self._send_serial or entry is not self._in_flight:
            return  # stale ack/nack from an earlier incarnation of this send
        key = codec.idempotency_key(entry.record)
        if isinstance(outcome, Ack):
            assert self._queue.head() is entry
            self._queue.pop_head()
            receipt = DeliveryReceipt(
                key=key, row_index=outcome.row_index, acked_at=self._clock.now_ts()
            )
            self.receipts.append(receipt)
            self._emit(
                "delivered",
                {
                    "key": key,
                    "row_index": outcome.row_index,
                    "attempts": entry.attempts,
                    "depth": self._queue.depth(),
                },
            )
            self._in_flight = None
            self._maybe_send()
            return

        reason = outcome.reason if isinstance(outcome, Nack) else "timeout"
        self._emit("send_failed", {"key": key, "attempt": entry.attempts, "reason": reason})
        budget = self._policy.max_attempts
        if budget is not None and entry.attempts >= budget:
            assert self._queue.head() is entry
            self._queue.pop_head()
            self.dead_letters.append(entry.record)
            self._emit("dead_letter", {"key": key, "depth": self._queue.depth()})
            self._in_flight = None
            self._maybe_send()
            return
        delay = backoff_delay(entry.attempts, self._policy)
        self._clock.schedule(delay, lambda: self._send(entry))

    def idle(self) -> bool:
        return self._in_flight is None and self._queue.depth() == 0

    def flush(self, max_events: int = 10_000_000) -> list[DeliveryReceipt]:
        """Pump the clock until the queue drains (or nothing is schedulable);
        returns the receipts gained by this call. Simulated time advances as
        needed for backoff sleeps and transport latency."""
        start = len(self.receipts)
        self._maybe_send()
        steps = 0
        while not self.idle():
            if not self._clock.run_next():
                break
            steps += 1
            if steps >= max_events:
                raise SyncError("flush exceeded its event budget; transport likely stuck")
        return self.receipts[start:]


def enqueue(queue: OutboxQueue, record: CloudRecord, now: float = 0.0) -> None:
    """Bare queue append with the queue's overflow policy applied."""
    queue.enqueue(record, now)


def flush(
    client: SyncClient, max_events: int = 10_000_000
) -> list[DeliveryReceipt]:
    """Drain a client's queue through its transport; see SyncClient.flush."""
    return client.flush(max_events=max_events)


def queue_depth(queue: OutboxQueue) -> int:
    return queue.depth()
