"""Multi-tier card authentication: format validation, local cache, cloud
query with a deadline, and a deny-by-default fallback, driving a servo gate.

The decision tiers run strictly in order: a malformed uid is dropped before
any gate or network activity; an unexpired cache entry decides locally with
zero cloud traffic; otherwise the cloud is queried with a deadline, and only
a timeout or an unavailable backend reaches the fallback policy. Cloud
replies carry the full access policy rather than a bare verdict so cached
entries can re-evaluate the time window locally at later presentations.

The engine is a single sequential state machine per device: one request at a
time, and a request arriving while the previous one is still deciding or the
gate is still cycling is refused outright rather than queued.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Protocol

from .codec import CloudRecord
from .core import AccessPolicy, DeviceId, Timestamp, Uid, seconds_of_day, weekday_of
from .sync import SchedulerPort


class AuthError(Exception):
    """Base for authentication-engine errors."""


class MalformedUidError(AuthError, ValueError):
    """Raw uid is not 8 hex characters; dropped without side effects."""


class GateBusyError(AuthError):
    """A request arrived while the engine was mid-request or mid-gate-cycle."""


class InvalidGateTransitionError(AuthError):
    """Gate state transitions only Closed->Opening->Open->Closing->Closed."""


class Outcome(Enum):
    GRANTED = "granted"
    DENIED = "denied"


class DecisionSource(Enum):
    CACHE = "cache"
    CLOUD = "cloud"
    FALLBACK = "fallback"


class FallbackMode(Enum):
    DENY = "deny"
    GRANT_IF_PREVIOUSLY_GRANTED = "grant_if_previously_granted"


@dataclass(frozen=True)
class AuthConfig:
    """Engine timing and gate geometry. Defaults follow the deployed setup:
    5s entry window, 100ms detection budget, day-long cache TTL."""

    t_detection_ms: float = 100.0
    t_entry_s: float = 5.0
    t_timeout_ms: float = 5000.0
    cache_ttl_s: float = 86400.0
    open_angle_deg: int = 90
    closed_angle_deg: int = 0
    fallback_mode: FallbackMode = FallbackMode.DENY
    cache_capacity: int = 256
    buzzer_pattern: str = "denied_triple_beep"

    def __post_init__(self) -> None:
        for name, v in (
            ("t_detection_ms", self.t_detection_ms),
            ("t_entry_s", self.t_entry_s),
            ("t_timeout_ms", self.t_timeout_ms),
            ("cache_ttl_s", self.cache_ttl_s),
        ):
            if v <= 0:
                raise AuthError(f"{name} must be > 0, got {v}")
        if self.cache_capacity < 1:
            raise AuthError(f"cache_capacity must be >= 1, got {self.cache_capacity}")


@dataclass(frozen=True)
class AuthResult:
    outcome: Outcome
    source: DecisionSource
    decision_latency_ms: float
    uid: Uid
    at: Timestamp


@dataclass(frozen=True)
class CacheEntry:
    uid: Uid
    policy: AccessPolicy
    inserted_at: Timestamp
    ttl_s: float

    def expired(self, now: Timestamp) -> bool:
        return now.to_epoch() > self.inserted_at.to_epoch() + self.ttl_s


def validate_uid_format(raw: str) -> Uid:
    """Canonicalize to an uppercase Uid; case-insensitive input accepted."""
    if not isinstance(raw, str):
        raise MalformedUidError(f"uid must be a string, got {type(raw).__name__}")
    candidate = raw.upper()
    if len(candidate) != 8 or any(c not in "0123456789ABCDEF" for c in candidate):
        raise MalformedUidError(f"uid must be 8 hex characters, got {raw!r}")
    return Uid(candidate)


def check_temporal(policy: AccessPolicy, t: Timestamp) -> Outcome:
    """Grant iff the time of day falls inside the policy window (both ends
    inclusive) and the UTC weekday is allowed. Pure function."""
    sod = seconds_of_day(t)
    if policy.window_start <= sod <= policy.window_end and weekday_of(t) in policy.allowed_days:
        return Outcome.GRANTED
    return Outcome.DENIED


class PolicyCache:
    """Bounded uid -> policy cache with TTL expiry.

    Expired entries behave as absent: a lookup evicts them, but they are
    retained on a stale side list so the grant-if-previously-granted
    fallback can replay the last known policy. Capacity eviction removes the
    least recently inserted entry first.
    """

    def __init__(self, capacity: int = 256) -> None:
        if capacity < 1:
            raise AuthError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: OrderedDict[Uid, CacheEntry] = OrderedDict()
        self._stale: OrderedDict[Uid, CacheEntry] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, uid: Uid, now: Timestamp) -> CacheEntry | None:
        entry = self._entries.get(uid)
        if entry is None:
            return None
        if entry.expired(now):
            del self._entries[uid]
            self._stale[uid] = entry
            while len(self._stale) > self.capacity:
                self._stale.popitem(last=False)
            return None
        return entry

    def update(self, uid: Uid, policy: AccessPolicy, now: Timestamp, ttl_s: float) -> None:
        """Insert or refresh; TTL is measured from the latest insertion."""
        self._stale.pop(uid, None)
        if uid in self._entries:
            del self._entries[uid]
        elif len(self._entries) >= self.capacity:
            self._entries.popitem(last=False)
        self._entries[uid] = CacheEntry(uid=uid, policy=policy, inserted_at=now, ttl_s=ttl_s)

    def expired_entry(self, uid: Uid, now: Timestamp) -> CacheEntry | None:
        """Last known entry for ``uid`` if it has expired (still in place or
        already moved to the stale list); None when never cached or live."""
        entry = self._entries.get(uid)
        if entry is not None:
            return entry if entry.expired(now) else None
        return self._stale.get(uid)


def cache_lookup(cache: PolicyCache, uid: Uid, now: Timestamp) -> CacheEntry | None:
    return cache.lookup(uid, now)


def update_cache(
    cache: PolicyCache, uid: Uid, policy: AccessPolicy, now: Timestamp, ttl_s: float
) -> None:
    cache.update(uid, policy, now, ttl_s)


def fallback_decision(
    uid: Uid, cache: PolicyCache, now: Timestamp, config: AuthConfig
) -> Outcome:
    """Decision of last resort, used only on cloud timeout with a cache miss.

    Default mode denies everyone. The opt-in alternative grants when an
    expired cache entry exists for the uid and its policy still passes the
    temporal check at ``now``.
    """
    if config.fallback_mode is FallbackMode.GRANT_IF_PREVIOUSLY_GRANTED:
        entry = cache.expired_entry(uid, now)
        if entry is not None and check_temporal(entry.policy, now) is Outcome.GRANTED:
            return Outcome.GRANTED
    return Outcome.DENIED


class GateState(Enum):
    CLOSED = "closed"
    OPENING = "opening"
    OPEN = "open"
    CLOSING = "closing"


class GateActuator:
    """Servo-driven gate model. At rest the angle matches the state: closed
    angle when Closed, open angle when Open."""

    def __init__(self, open_angle_deg: int = 90, closed_angle_deg: int = 0) -> None:
        self.open_angle_deg = open_angle_deg
        self.closed_angle_deg = closed_angle_deg
        self.state = GateState.CLOSED
        self.angle_deg = closed_angle_deg

    def _transition(self, expected: GateState, target: GateState) -> None:
        if self.state is not expected:
            raise InvalidGateTransitionError(
                f"cannot go {self.state.value} -> {target.value}"
            )
        self.state = target

    def begin_open(self) -> None:
        self._transition(GateState.CLOSED, GateState.OPENING)

    def complete_open(self) -> None:
        self._transition(GateState.OPENING, GateState.OPEN)
        self.angle_deg = self.open_angle_deg

    def begin_close(self) -> None:
        self._transition(GateState.OPEN, GateState.CLOSING)

    def complete_close(self) -> None:
        self._transition(GateState.CLOSING, GateState.CLOSED)
        self.angle_deg = self.closed_angle_deg


class ReplyKind(Enum):
    POLICY = "policy"
    NOT_FOUND = "not_found"
    UNAVAILABLE = "unavailable"


@dataclass(frozen=True)
class PolicyReply:
    kind: ReplyKind
    policy: AccessPolicy | None = None


class CloudQueryPort(Protocol):
    """Asynchronous authorization lookup; the engine enforces its own deadline."""

    def query_policy(self, uid: Uid, on_reply: Callable[[PolicyReply], None]) -> None: ...


class RequestDisposition(Enum):
    ACCEPTED = "accepted"
    REJECTED_INPUT = "rejected_input"
    GATE_BUSY = "gate_busy"


@dataclass
class _PendingQuery:
    query_id: int
    uid: Uid
    started: float
    on_result: Callable[[AuthResult], None] | None
    deadline_handle: object = None


class AccessEngine:
    """Event-driven authentication engine for one device.

    Emits exactly one AuthResult and one CloudRecord per well-formed,
    accepted request; refused requests (malformed input, busy engine) emit
    neither and are counted separately. Driving happens through the injected
    scheduler, so the engine consumes only simulated time.
    """

    def __init__(
        self,
        device_id: DeviceId,
        location: str,
        clock: SchedulerPort,
        cloud: CloudQueryPort,
        config: AuthConfig | None = None,
        cache: PolicyCache | None = None,
        record_out: Callable[[CloudRecord], None] | None = None,
        event_out: Callable[[str, dict], None] | None = None,
    ) -> None:
        self.device_id = device_id
        self.location = location
        self.config = config or AuthConfig()
        self.cache = cache if cache is not None else PolicyCache(self.config.cache_capacity)
        self.gate = GateActuator(self.config.open_angle_deg, self.config.closed_angle_deg)
        self._clock = clock
        self._cloud = cloud
        self._record_out = record_out
        self._event_out = event_out
        self._seq = 0
        self._busy = False
        self._query_counter = 0
        self._pending: _PendingQuery | None = None
        self.results: list[AuthResult] = []
        self.counters = {
            "granted": 0,
            "denied": 0,
            "rejected_input": 0,
            "gate_busy": 0,
        }

    # -- request entry points ------------------------------------------------

    def handle_request(
        self, raw_uid: str, on_result: Callable[[AuthResult], None] | None = None
    ) -> RequestDisposition:
        """Begin processing a card presentation at the current simulated time.

        Returns the immediate disposition; for an accepted request the
        AuthResult is delivered through ``on_result`` once the decision
        resolves (same instant for a cache hit, later for the cloud path).
        """
        if self._busy:
            self.counters["gate_busy"] += 1
            self._emit_event("gate_busy", {"raw_uid": raw_uid})
            return RequestDisposition.GATE_BUSY
        try:
            uid = validate_uid_format(raw_uid)
        except MalformedUidError as exc:
            self.counters["rejected_input"] += 1
            self._emit_event("rejected_input", {"raw_uid": raw_uid, "reason": str(exc)})
            return RequestDisposition.REJECTED_INPUT

        self._busy = True
        started = self._clock.now()
        now_ts = self._clock.now_ts()
        entry = self.cache.lookup(uid, now_ts)
        if entry is not None:
            outcome = check_temporal(entry.policy, now_ts)
            self._finish(uid, started, outcome, DecisionSource.CACHE, on_result)
            return RequestDisposition.ACCEPTED

        self._query_counter += 1
        pending = _PendingQuery(
            query_id=self._query_counter, uid=uid, started=started, on_result=on_result
        )
        self._pending = pending
        pending.deadline_handle = self._clock.schedule(
            self.config.t_timeout_ms / 1000.0,
            lambda: self._on_cloud_deadline(pending.query_id),
        )
        self._cloud.query_policy(
            uid, lambda reply: self._on_cloud_reply(pending.query_id, reply)
        )
        return RequestDisposition.ACCEPTED

    def process_request(self, raw_uid: str) -> AuthResult:
        """Synchronous form: runs the scheduler until the decision resolves.

        Raises MalformedUidError or GateBusyError for refused requests.
        """
        box: list[AuthResult] = []
        disposition = self.handle_request(raw_uid, box.append)
        if disposition is RequestDisposition.REJECTED_INPUT:
            raise MalformedUidError(f"rejected input: {raw_uid!r}")
        if disposition is RequestDisposition.GATE_BUSY:
            raise GateBusyError("engine busy with a previous request")
        while not box:
            if not self._clock.run_next():
                raise AuthError("scheduler exhausted before the decision resolved")
        return box[0]

    # -- decision plumbing ---------------------------------------------------

    def _on_cloud_reply(self, query_id: int, reply: PolicyReply) -> None:
        pending = self._pending
        if pending is None or pending.query_id != query_id:
            return  # reply landed after the deadline already decided
        self._pending = None
        self._cancel_deadline(pending)
        now_ts = self._clock.now_ts()
        if reply.kind is ReplyKind.POLICY and reply.policy is not None:
            self.cache.update(pending.uid, reply.policy, now_ts, self.config.cache_ttl_s)
            outcome = check_temporal(reply.policy, now_ts)
            self._finish(
                pending.uid, pending.started, outcome, DecisionSource.CLOUD, pending.on_result
            )
        elif reply.kind is ReplyKind.NOT_FOUND:
            self._finish(
                pending.uid,
                pending.started,
                Outcome.DENIED,
                DecisionSource.CLOUD,
                pending.on_result,
            )
        else:  # backend reachable but unavailable: same recourse as a timeout
            outcome = fallback_decision(pending.uid, self.cache, now_ts, self.config)
            self._finish(
                pending.uid, pending.started, outcome, DecisionSource.FALLBACK, pending.on_result
            )

    def _on_cloud_deadline(self, query_id: int) -> None:
        pending = self._pending
        if pending is None or pending.query_id != query_id:
            return
        self._pending = None
        now_ts = self._clock.now_ts()
        outcome = fallback_decision(pending.uid, self.cache, now_ts, self.config)
        self._finish(
            pending.uid, pending.started, outcome, DecisionSource.FALLBACK, pending.on_result
        )

    def _cancel_deadline(self, pending: _PendingQuery) -> None:
        handle = pending.deadline_handle
        if handle is not None and hasattr(self._clock, "cancel"):
            self._clock.cancel(handle)

    def _finish(
        self,
        uid: Uid,
        started: float,
        outcome: Outcome,
        source: DecisionSource,
        on_result: Callable[[AuthResult], None] | None,
    ) -> None:
        at = self._clock.now_ts()
        latency_ms = (self._clock.now() - started) * 1000.0
        result = AuthResult(
            outcome=outcome, source=source, decision_latency_ms=latency_ms, uid=uid, at=at
        )
        self.results.append(result)

        granted = outcome is Outcome.GRANTED
        self.counters["granted" if granted else "denied"] += 1
        self._emit_record(result, granted)
        self._emit_event(
            "auth_decision",
            {
                "uid": uid.value,
                "outcome": outcome.value,
                "source": source.value,
                "latency_ms": latency_ms,
            },
        )
        if granted:
            self.gate.begin_open()
            self.gate.complete_open()
            self._emit_event("gate_open", {"angle_deg": self.gate.angle_deg})
            self._clock.schedule(self.config.t_entry_s, self._close_gate)
        else:
            self._emit_event("buzzer", {"pattern": self.config.buzzer_pattern})
            self._busy = False
        if on_result is not None:
            on_result(result)

    def _close_gate(self) -> None:
        self.gate.begin_close()
        self.gate.complete_close()
        self._emit_event("gate_close", {"angle_deg": self.gate.angle_deg})
        self._busy = False

    def _emit_record(self, result: AuthResult, granted: bool) -> None:
        if self._record_out is None:
            return
        record = CloudRecord(
            device_id=self.device_id,
            timestamp=result.at,
            event_type="access_granted" if granted else "access_denied",
            data={
                "uid": result.uid.value,
                "gate_status": "open" if granted else "closed",
                "duration_ms": int(self.config.t_entry_s * 1000) if granted else 0,
                "location": self.location,
            },
            seq=self._next_seq(),
        )
        self._record_out(record)

    def _next_seq(self) -> int:
        seq = self._seq
        self._seq += 1
        return seq

    def _emit_event(self, kind: str, data: dict) -> None:
        if self._event_out is not None:
            self._event_out(kind, data)
