"""Deterministic seeded discrete-event simulator.

One binary heap of (due time, insertion sequence) callbacks drives every
component; nothing reads wall time, so a day-long scenario replays in
wall-clock seconds and two runs of the same scenario produce byte-identical
traces. Random streams are split per component from the master seed, which
keeps one component's draws stable when another component is added.

The network model layers truncated-normal latency, Bernoulli request/ack
loss and scheduled partitions over an otherwise reliable in-process (or
local-socket) sink.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field
from typing import Callable

from . import codec, metrics as metrics_mod
from .auth import (
    AccessEngine,
    CloudQueryPort,
    PolicyCache,
    PolicyReply,
    ReplyKind,
    RequestDisposition,
    check_temporal,
    Outcome,
)
from .core import AccessPolicy, Timestamp, Uid
from .safety import SafetyMonitor
from .scenario import (
    ArrivalConfig,
    DeviceConfig,
    FlameWorkload,
    FlowWorkload,
    NetworkConfig,
    Scenario,
)
from .sink import CloudSink, UnauthorizedError, UnavailableError
from .sync import Ack, Nack, OutboxQueue, SendOutcome, SendTimeout, SyncClient
from .trace import EventTrace, GroundTruth
from .wire import RemoteSink, SinkServer


class SimError(Exception):
    """Simulator assembly or execution failure."""


class OverlappingPartitionError(SimError):
    """Partition intervals must be disjoint."""


class _Handle:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn: Callable[[], None]) -> None:
        self.fn = fn
        self.cancelled = False


class SimClock:
    """Virtual clock plus future-event list.

    Time only moves when an event fires, and simultaneous events fire in
    insertion order, making execution a pure function of the schedule.
    Internally time is an integer count of microseconds since the clock's
    epoch, so fixed intervals (the 5s gate hold, backoff sleeps) are exact;
    ``now()`` reports seconds relative to the epoch, ``now_ts()`` the
    absolute timestamp.
    """

    def __init__(self, start: Timestamp | float = 0.0) -> None:
        self._epoch = start.to_epoch() if isinstance(start, Timestamp) else float(start)
        self._now_us = 0
        self._heap: list[tuple[int, int, _Handle]] = []
        self._counter = itertools.count()

    def now(self) -> float:
        """Seconds since the clock epoch (exact multiples of 1e-6)."""
        return self._now_us / 1e6

    def now_ts(self) -> Timestamp:
        return Timestamp.from_epoch(self._epoch + self._now_us / 1e6)

    def schedule(self, delay_s: float, fn: Callable[[], None]) -> _Handle:
        if delay_s < 0:
            raise SimError(f"cannot schedule into the past: delay {delay_s}")
        return self._push(self._now_us + round(delay_s * 1e6), fn)

    def schedule_at(self, t: float, fn: Callable[[], None]) -> _Handle:
        due_us = round(t * 1e6)
        if due_us < self._now_us:
            raise SimError(f"cannot schedule into the past: {t} < {self.now()}")
        return self._push(due_us, fn)

    def _push(self, due_us: int, fn: Callable[[], None]) -> _Handle:
        handle = _Handle(fn)
        heapq.heappush(self._heap, (due_us, next(self._counter), handle))
        return handle

    def cancel(self, handle: _Handle) -> None:
        handle.cancelled = True

    def pending(self) -> int:
        return sum(1 for _, _, h in self._heap if not h.cancelled)

    def run_next(self) -> bool:
        """Fire the next scheduled event; False when nothing remains."""
        while self._heap:
            t_us, _, handle = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self._now_us = t_us
            handle.fn()
            return True
        return False

    def run_until(self, t_end: float) -> None:
        """Fire every event due at or before ``t_end``, then land on it."""
        end_us = round(t_end * 1e6)
        while self._heap and self._heap[0][0] <= end_us:
            t_us, _, handle = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self._now_us = t_us
            handle.fn()
        self._now_us = max(self._now_us, end_us)


@dataclass
class NetworkModel:
    """Connectivity model shared by authorization queries and uplink sends.

    ``drop_windows`` overlays a time-varying drop schedule on the base
    probability: inside a window the larger of the two applies.
    """

    latency_mean_s: float = 1.2
    latency_stddev_s: float = 0.3
    latency_floor_s: float = 0.05
    drop_prob: float = 0.0
    ack_drop_prob: float = 0.0
    partitions: list[tuple[float, float]] = field(default_factory=list)
    drop_windows: list[tuple[float, float, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.latency_stddev_s < 0 or self.latency_floor_s < 0:
            raise SimError("latency parameters must be non-negative")
        for name, p in (("drop_prob", self.drop_prob), ("ack_drop_prob", self.ack_drop_prob)):
            if not 0.0 <= p <= 1.0:
                raise SimError(f"{name} must be a probability, got {p}")
        for start, end, p in self.drop_windows:
            if end <= start or not 0.0 <= p <= 1.0:
                raise SimError(f"bad drop window [{start}, {end}) prob {p}")
        spans = sorted(self.partitions)
        for a, b in zip(spans, spans[1:]):
            if b[0] < a[1]:
                raise OverlappingPartitionError(f"partitions overlap near t={b[0]}")
        self.partitions = spans

    @classmethod
    def from_config(cls, cfg: NetworkConfig, partitions=(), drop_windows=()) -> "NetworkModel":
        return cls(
            latency_mean_s=cfg.latency_mean_s,
            latency_stddev_s=cfg.latency_stddev_s,
            latency_floor_s=cfg.latency_floor_s,
            drop_prob=cfg.drop_prob,
            ack_drop_prob=cfg.ack_drop_prob,
            partitions=[(p.start_s, p.end_s) for p in partitions],
            drop_windows=[(w.start_s, w.end_s, w.prob) for w in drop_windows],
        )

    def sample_latency(self, rng: random.Random) -> float:
        """Normal draw truncated below at the floor (never negative or zero)."""
        return max(self.latency_floor_s, rng.gauss(self.latency_mean_s, self.latency_stddev_s))

    def in_partition(self, t: float) -> bool:
        for start, end in self.partitions:
            if start <= t < end:
                return True
            if t < start:
                break
        return False

    def drop_probability(self, t: float) -> float:
        p = self.drop_prob
        for start, end, q in self.drop_windows:
            if start <= t < end:
                p = max(p, q)
        return p

    def add_partition(self, start: float, end: float) -> None:
        inject_partition(self, start, end)


def inject_partition(model: NetworkModel, start: float, end: float) -> None:
    """Add a connectivity blackout over [start, end); intervals stay disjoint."""
    if start >= end:
        raise SimError(f"partition must have start < end, got [{start}, {end})")
    for s, e in model.partitions:
        if start < e and s < end:
            raise OverlappingPartitionError(
                f"partition [{start}, {end}) overlaps existing [{s}, {e})"
            )
    model.partitions.append((start, end))
    model.partitions.sort()


def sample_latency(model: NetworkModel, rng: random.Random) -> float:
    return model.sample_latency(rng)


def split_rng(seed: int, stream: str) -> random.Random:
    """Independent, reproducible stream derived from the master seed."""
    return random.Random(f"{seed}/{stream}")


class SimCloudClient(CloudQueryPort):
    """Authorization lookups over the simulated network. No reply is ever
    scheduled during a partition or for a dropped request; the engine's own
    deadline converts that silence into the fallback path."""

    def __init__(self, clock, model, sink_port, token, rng) -> None:
        self._clock = clock
        self._model = model
        self._sink = sink_port
        self._token = token
        self._rng = rng
        self.queries = 0

    def query_policy(self, uid: Uid, on_reply: Callable[[PolicyReply], None]) -> None:
        self.queries += 1
        t = self._clock.now()
        if self._model.in_partition(t):
            return
        drop_p = self._model.drop_probability(t)
        if drop_p > 0 and self._rng.random() < drop_p:
            return
        rtt = self._model.sample_latency(self._rng)

        def deliver() -> None:
            try:
                policy = self._sink.query_policy(self._token, uid)
            except (UnavailableError, UnauthorizedError):
                on_reply(PolicyReply(ReplyKind.UNAVAILABLE))
                return
            if policy is None:
                on_reply(PolicyReply(ReplyKind.NOT_FOUND))
            else:
                on_reply(PolicyReply(ReplyKind.POLICY, policy))

        self._clock.schedule(rtt, deliver)


class SimTransport:
    """Uplink sends over the simulated network with a client-side timeout.

    A request lost to a partition or a drop surfaces as SendTimeout after
    ``timeout_s``. A delivered request whose acknowledgement is dropped also
    times out, although the sink has already stored the record; the ensuing
    retransmission is what the sink's idempotency dedup absorbs.
    """

    def __init__(self, clock, model, sink_port, token, rng, timeout_s: float = 5.0) -> None:
        self._clock = clock
        self._model = model
        self._sink = sink_port
        self._token = token
        self._rng = rng
        self.timeout_s = timeout_s

    def send(self, payload: bytes, on_result: Callable[[SendOutcome], None]) -> None:
        t = self._clock.now()
        done = [False]

        def finish(outcome: SendOutcome) -> None:
            if not done[0]:
                done[0] = True
                on_result(outcome)

        self._clock.schedule(self.timeout_s, lambda: finish(SendTimeout()))
        if self._model.in_partition(t):
            return
        drop_p = self._model.drop_probability(t)
        if drop_p > 0 and self._rng.random() < drop_p:
            return
        latency = self._model.sample_latency(self._rng)
        ack_dropped = (
            self._model.ack_drop_prob > 0 and self._rng.random() < self._model.ack_drop_prob
        )

        def deliver() -> None:
            try:
                row = self._sink.append(self._token, payload, self._clock.now_ts())
            except UnavailableError:
                finish(Nack("unavailable"))
                return
            except UnauthorizedError:
                finish(Nack("unauthorized"))
                return
            except codec.CodecError as exc:
                finish(Nack(f"schema: {exc}"))
                return
            if not ack_dropped:
                finish(Ack(row))

        self._clock.schedule(latency, deliver)


# ---------------------------------------------------------------------------
# Workload generation. Arrivals and sensor schedules are fully derived from
# the scenario seed before the clock starts, so the ground truth exists
# independently of anything the engines later decide.


@dataclass(frozen=True)
class _Arrival:
    at_s: float
    request_id: str
    raw_uid: str
    intended_uid: str | None
    label: str  # authorized | unauthorized | malformed


_MALFORMED_SHAPES = ("short", "long", "nonhex")


def _random_unknown_uid(rng: random.Random, known: set[str]) -> str:
    while True:
        candidate = f"{rng.randrange(16 ** 8):08X}"
        if candidate not in known:
            return candidate


def _malformed_uid(rng: random.Random) -> str:
    shape = _MALFORMED_SHAPES[rng.randrange(len(_MALFORMED_SHAPES))]
    if shape == "short":
        return f"{rng.randrange(16 ** 6):06X}"
    if shape == "long":
        return f"{rng.randrange(16 ** 10):010X}"
    return "".join(rng.choice("GHIJKLMNPQRSTUVWXYZ") for _ in range(8))


def generate_arrivals(
    device_id: str,
    cfg: ArrivalConfig,
    duration_s: float,
    start: Timestamp,
    authz: dict[Uid, AccessPolicy],
    rng: random.Random,
) -> list[_Arrival]:
    """Seeded card-presentation schedule with per-request ground truth.

    The label says what the *intended* card deserved at its arrival instant;
    misreads then corrupt what the reader actually hands the engine, which
    is how configured false-accept/false-reject rates enter the run.
    """
    arrivals: list[_Arrival] = []
    if cfg.rate_per_s <= 0 or duration_s <= 0:
        return arrivals
    authorized_uids = sorted(u.value for u in authz)
    known = set(authorized_uids)
    t = 0.0
    n = 0
    while True:
        if cfg.process == "poisson":
            t += rng.expovariate(cfg.rate_per_s)
        else:
            t += 1.0 / cfg.rate_per_s
        if t >= duration_s:
            break
        rid = f"{device_id}:r{n}"
        n += 1
        if rng.random() < cfg.malformed_fraction:
            arrivals.append(_Arrival(t, rid, _malformed_uid(rng), None, "malformed"))
            continue
        if authorized_uids and rng.random() < cfg.authorized_fraction:
            intended = authorized_uids[rng.randrange(len(authorized_uids))]
            policy = authz[Uid(intended)]
            at = start.add_seconds(t)
            label = (
                "authorized"
                if check_temporal(policy, at) is Outcome.GRANTED
                else "unauthorized"
            )
            raw = intended
            if cfg.misread_false_reject > 0 and rng.random() < cfg.misread_false_reject:
                raw = _random_unknown_uid(rng, known)
            arrivals.append(_Arrival(t, rid, raw, intended, label))
        else:
            intended = _random_unknown_uid(rng, known)
            raw = intended
            if (
                authorized_uids
                and cfg.misread_false_accept > 0
                and rng.random() < cfg.misread_false_accept
            ):
                raw = authorized_uids[rng.randrange(len(authorized_uids))]
            arrivals.append(_Arrival(t, rid, raw, intended, "unauthorized"))
    return arrivals


def _flame_value(cfg: FlameWorkload, t: float, rng: random.Random) -> tuple[float, float]:
    base = cfg.baseline
    for ep in cfg.episodes:
        if ep.start_s <= t < ep.start_s + ep.duration_s:
            base = ep.peak
            break
    intensity = max(0.0, base + rng.gauss(0.0, cfg.noise_stddev) if cfg.noise_stddev > 0 else base)
    ambient = max(
        0.0,
        cfg.ambient_base + rng.gauss(0.0, cfg.ambient_noise_stddev)
        if cfg.ambient_noise_stddev > 0
        else cfg.ambient_base,
    )
    return intensity, ambient


# ---------------------------------------------------------------------------
# Simulation assembly


class _AccessDevice:
    def __init__(self, sim: "Simulation", cfg: DeviceConfig) -> None:
        self.cfg = cfg
        device = cfg.device_id.value
        self.client = SyncClient(
            clock=sim.clock,
            transport=SimTransport(
                sim.clock,
                sim.network,
                sim.sink_port,
                sim.token,
                split_rng(sim.scenario.seed, f"net-sync/{device}"),
                timeout_s=cfg.send_timeout_s,
            ),
            policy=cfg.retry,
            queue=OutboxQueue(cfg.outbox.capacity, cfg.outbox.overflow),
            on_event=sim.device_event(device),
        )
        self.engine = AccessEngine(
            device_id=cfg.device_id,
            location=cfg.location,
            clock=sim.clock,
            cloud=SimCloudClient(
                sim.clock,
                sim.network,
                sim.sink_port,
                sim.token,
                split_rng(sim.scenario.seed, f"net-auth/{device}"),
            ),
            config=cfg.auth,
            cache=PolicyCache(cfg.auth.cache_capacity),
            record_out=self.client.enqueue,
            event_out=sim.engine_event(device),
        )


class _SafetyDevice:
    def __init__(self, sim: "Simulation", cfg: DeviceConfig) -> None:
        self.cfg = cfg
        device = cfg.device_id.value
        self.client = SyncClient(
            clock=sim.clock,
            transport=SimTransport(
                sim.clock,
                sim.network,
                sim.sink_port,
                sim.token,
                split_rng(sim.scenario.seed, f"net-sync/{device}"),
                timeout_s=cfg.send_timeout_s,
            ),
            policy=cfg.retry,
            queue=OutboxQueue(cfg.outbox.capacity, cfg.outbox.overflow),
            on_event=sim.device_event(device),
        )
        self.monitor = SafetyMonitor(
            device_id=cfg.device_id,
            location=cfg.location,
            params=cfg.flame_params,
            kalman_q=cfg.kalman_q,
            kalman_r=cfg.kalman_r,
            record_out=self.client.enqueue,
            event_out=sim.device_event(device),
        )


class Simulation:
    """Binds devices, network, sink, workloads and fault schedules for one run."""

    # Engine decision events are rewritten by the harness with request ids.
    _ENGINE_SKIP = frozenset({"auth_decision", "rejected_input", "gate_busy"})

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        # The clock's epoch is the scenario start; times in trace events and
        # fault schedules are seconds relative to it.
        self.clock = SimClock(scenario.start_time)
        self.network = NetworkModel.from_config(
            scenario.network, scenario.faults.partitions, scenario.faults.drop_windows
        )
        self.token = scenario.sink.token
        self.sink = CloudSink(self.token)
        self.sink.seed_policies(list(scenario.authz))
        self._server: SinkServer | None = None
        if scenario.sink.mode == "socket":
            self._server = SinkServer(self.sink, clock=self.clock).start()
            self.sink_port = RemoteSink(*self._server.address)
        else:
            self.sink_port = self.sink

        self.truth = GroundTruth()
        self.trace = EventTrace(
            meta={
                "schema": 1,
                "seed": scenario.seed,
                "start_time": scenario.start_time.iso8601(),
                "duration_s": scenario.duration_s,
            }
        )
        self._authz = {p.uid: p for p in scenario.authz}
        self.access_devices: list[_AccessDevice] = []
        self.safety_devices: list[_SafetyDevice] = []
        for cfg in scenario.devices:
            if cfg.role == "access":
                self.access_devices.append(_AccessDevice(self, cfg))
            else:
                self.safety_devices.append(_SafetyDevice(self, cfg))

    # -- trace plumbing ------------------------------------------------------

    def emit(self, kind: str, data: dict) -> None:
        self.trace.append(kind, self.clock.now(), data)

    def device_event(self, device: str):
        def hook(kind: str, data: dict) -> None:
            self.emit(kind, {"device": device, **data})

        return hook

    def engine_event(self, device: str):
        def hook(kind: str, data: dict) -> None:
            if kind in self._ENGINE_SKIP:
                return
            self.emit(kind, {"device": device, **data})

        return hook

    # -- schedule construction -------------------------------------------------

    def _schedule_access(self, dev: _AccessDevice) -> None:
        device = dev.cfg.device_id.value
        arrivals = generate_arrivals(
            device,
            self.scenario.workload.access,
            self.scenario.duration_s,
            self.scenario.start_time,
            self._authz,
            split_rng(self.scenario.seed, f"workload/{device}"),
        )
        for arrival in arrivals:
            self.truth.request_labels[arrival.request_id] = arrival.label
            self.clock.schedule_at(
                arrival.at_s,
                lambda a=arrival, d=dev: self._on_arrival(d, a),
            )

    def _on_arrival(self, dev: _AccessDevice, arrival: _Arrival) -> None:
        device = dev.cfg.device_id.value
        self.emit(
            "card_read",
            {
                "device": device,
                "request_id": arrival.request_id,
                "raw_uid": arrival.raw_uid,
                "intended_uid": arrival.intended_uid,
            },
        )

        def on_result(result) -> None:
            self.emit(
                "auth_decision",
                {
                    "device": device,
                    "request_id": arrival.request_id,
                    "uid": result.uid.value,
                    "outcome": result.outcome.value,
                    "source": result.source.value,
                    "latency_ms": result.decision_latency_ms,
                },
            )

        disposition = dev.engine.handle_request(arrival.raw_uid, on_result)
        if disposition is RequestDisposition.REJECTED_INPUT:
            self.emit(
                "rejected_input",
                {"device": device, "request_id": arrival.request_id,
                 "raw_uid": arrival.raw_uid},
            )
        elif disposition is RequestDisposition.GATE_BUSY:
            self.emit(
                "gate_busy",
                {"device": device, "request_id": arrival.request_id,
                 "raw_uid": arrival.raw_uid},
            )

    def _schedule_safety(self, dev: _SafetyDevice) -> None:
        device = dev.cfg.device_id.value
        duration = self.scenario.duration_s
        flame = self.scenario.workload.flame
        if flame.sample_period_s > 0:
            rng = split_rng(self.scenario.seed, f"flame/{device}")
            steps = int(duration / flame.sample_period_s)
            for k in range(steps):
                t = k * flame.sample_period_s
                if t >= duration:
                    break
                self.clock.schedule_at(
                    t,
                    lambda tt=t, d=dev, r=rng: self._flame_sample(d, tt, r),
                )

        flow = self.scenario.workload.flow
        if flow.sample_period_s > 0:
            rng = split_rng(self.scenario.seed, f"flow/{device}")
            anomaly_steps = {
                int(round(a.at_s / flow.sample_period_s)): a.magnitude_lpm
                for a in flow.anomalies
            }
            steps = int(duration / flow.sample_period_s)
            for k in range(steps):
                t = k * flow.sample_period_s
                if t >= duration:
                    break
                magnitude = anomaly_steps.get(k, 0.0)
                self.clock.schedule_at(
                    t,
                    lambda tt=t, m=magnitude, d=dev, r=rng: self._flow_sample(d, tt, m, r),
                )
        for scan in self.scenario.workload.personnel_scans:
            if scan.at_s < duration:
                self.clock.schedule_at(
                    scan.at_s,
                    lambda s=scan, d=dev: d.monitor.on_personnel_scan(
                        s.uid, self.clock.now_ts()
                    ),
                )
        if dev.cfg.status_period_s > 0:
            period = dev.cfg.status_period_s
            t = period
            while t < duration:
                self.clock.schedule_at(
                    t,
                    lambda d=dev: d.monitor.heartbeat(self.clock.now_ts()),
                )
                t += period

    def _flame_sample(self, dev: _SafetyDevice, t: float, rng: random.Random) -> None:
        intensity, ambient = _flame_value(self.scenario.workload.flame, t, rng)
        dev.monitor.on_flame_sample(intensity, ambient, self.clock.now_ts())

    def _flow_sample(
        self, dev: _SafetyDevice, t: float, magnitude: float, rng: random.Random
    ) -> None:
        cfg = self.scenario.workload.flow
        flow = cfg.baseline_lpm
        if cfg.noise_stddev > 0:
            flow += rng.gauss(0.0, cfg.noise_stddev)
        flow = max(0.0, flow + magnitude)
        dev.monitor.on_flow_sample(flow, self.clock.now_ts())

    def _schedule_faults(self) -> None:
        for start, end in self.network.partitions:
            self.clock.schedule_at(
                start, lambda s=start: self.emit("partition_start", {})
            )
            if end <= self.scenario.duration_s:
                self.clock.schedule_at(
                    end, lambda e=end: self.emit("partition_end", {})
                )
        for outage in self.scenario.faults.sink_outages:
            self.clock.schedule_at(
                outage.start_s, lambda: self._set_sink(False)
            )
            if outage.end_s <= self.scenario.duration_s:
                self.clock.schedule_at(
                    outage.end_s, lambda: self._set_sink(True)
                )

    def _set_sink(self, available: bool) -> None:
        self.sink.available = available
        self.emit("sink_outage_end" if available else "sink_outage_start", {})

    # -- execution -------------------------------------------------------------

    def run(self) -> tuple[EventTrace, "metrics_mod.MetricsReport"]:
        try:
            self.emit("sim_start", {"seed": self.scenario.seed})
            for dev in self.access_devices:
                self._schedule_access(dev)
            for dev in self.safety_devices:
                self._schedule_safety(dev)
            self._schedule_faults()
            # Sensor ground truth is schedule-derived and shared by every
            # safety device, so record it once.
            if self.safety_devices:
                flame = self.scenario.workload.flame
                if flame.sample_period_s > 0:
                    for ep in flame.episodes:
                        self.truth.flame_episodes.append(
                            (ep.start_s, ep.start_s + ep.duration_s)
                        )
                flow = self.scenario.workload.flow
                if flow.sample_period_s > 0:
                    for a in flow.anomalies:
                        k = int(round(a.at_s / flow.sample_period_s))
                        t = k * flow.sample_period_s
                        if t < self.scenario.duration_s:
                            self.truth.flow_anomaly_times.append(t)
            self.clock.run_until(self.scenario.duration_s)
            for dev in self.access_devices + self.safety_devices:
                self.emit(
                    "queue_final",
                    {
                        "device": dev.cfg.device_id.value,
                        "depth": dev.client.queue_depth(),
                        "dead_letters": len(dev.client.dead_letters),
                    },
                )
            self.emit("sim_end", {})
            self.trace.meta["truth"] = self.truth.to_dict()
            report = metrics_mod.compute_metrics(self.trace, self.truth)
            return self.trace, report
        finally:
            if self._server is not None:
                if isinstance(self.sink_port, RemoteSink):
                    self.sink_port.close()
                self._server.stop()
                self._server = None


def run(scenario: Scenario) -> tuple[EventTrace, "metrics_mod.MetricsReport"]:
    """Execute a scenario deterministically; returns its trace and report."""
    return Simulation(scenario).run()
