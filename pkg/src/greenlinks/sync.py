"""Synchronization primitives between community nodes and the cloud.

Three data operations with different urgency and consistency needs:

* slowput   -- lazy durable write.  The caller gets an ack immediately;
               the payload sits in the node's lazy queue and trickles up
               whenever the backhaul has capacity.  Delivery is
               at-least-once on the wire and exactly-once at the store
               (idempotent apply keyed by request id).
* fastget   -- immediate read-modify-write round trip.  Fails fast with
               BackhaulDown when the uplink is down and SyncTimeout when
               the predicted sojourn exceeds the deadline; it never
               pretends a local result is a cloud result.
* fastsearch - immediate read-only query over committed state.  A write
               lock held by a fastget never blocks it; it simply reads
               the last committed version of locked keys.

Transmission is modeled as a fluid queue: the head request drains at the
uplink's byte rate, completions land mid-interval at exact times, and a
partially sent payload survives an outage and resumes afterwards.  The
owner must call advance() at every uplink up/down or rate transition so
that each accounting window has one constant rate.

store_and_forward wraps slowput into a mailbox envelope for asynchronous
user-to-user messages; delivery happens when the destination node syncs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import (
    BackhaulDown,
    PayloadEmpty,
    QueueFull,
    SyncTimeout,
)
from .topology import BYTES_PER_KBPS

SMS_PRIORITY_MAX_BYTES = 1024

_EPS = 1e-9


@dataclass
class SyncRequest:
    request_id: str
    identity: str
    app_type: str
    key: str | None
    payload: bytes
    klass: str  # "slowput" or "message"
    enqueued_at: float
    seq: int
    priority: int = 1
    sent_bytes: float = 0.0
    transmit_end: float | None = None

    @property
    def size(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class Ack:
    request_id: str
    enqueued_at: float


@dataclass
class Record:
    payload: bytes
    version: int
    updated_at: float


@dataclass
class Completion:
    request: SyncRequest
    apply_at: float
    receipt_at: float
    response: object


@dataclass(frozen=True)
class LatencyRecord:
    request_id: str
    klass: str
    app_type: str
    size: int
    enqueued_at: float
    delivered_at: float


@dataclass(frozen=True)
class FastResponse:
    value: object
    at: float


class StaticUplink:
    """Fixed-rate uplink; tests and benches flip .up by hand."""

    def __init__(self, rate_kbps: float, latency_ms: float, up: bool = True):
        self.rate = rate_kbps * BYTES_PER_KBPS
        self.latency = latency_ms / 1000.0
        self.up = up

    def is_up(self) -> bool:
        return self.up

    def rate_Bps(self) -> float:
        return self.rate

    def latency_s(self) -> float:
        return self.latency


class LazyQueue:
    """FIFO transmit queue with fluid drain and optional priority classes.

    With priority mode on, small payloads (<= 1 KB, the SMS class) are
    selected ahead of file-class requests, but only at request
    boundaries: a file already in flight finishes first.
    """

    def __init__(self, *, capacity: int | None = None, priority_mode: bool = False):
        self.capacity = capacity
        self.priority_mode = priority_mode
        self.pending: list[SyncRequest] = []
        self.in_flight: SyncRequest | None = None
        self._cursor: float | None = None

    def __len__(self) -> int:
        return len(self.pending) + (1 if self.in_flight else 0)

    def depth_bytes(self) -> float:
        total = sum(r.size for r in self.pending)
        if self.in_flight:
            total += self.in_flight.size - self.in_flight.sent_bytes
        return total

    def enqueue(self, req: SyncRequest) -> None:
        if self.capacity is not None and len(self) >= self.capacity:
            raise QueueFull(f"lazy queue at capacity {self.capacity}")
        req.priority = 0 if req.size <= SMS_PRIORITY_MAX_BYTES else 1
        self.pending.append(req)

    def _take_next(self) -> SyncRequest | None:
        if not self.pending:
            return None
        if self.priority_mode:
            best = min(self.pending, key=lambda r: (r.priority, r.seq))
        else:
            best = self.pending[0]
        self.pending.remove(best)
        return best

    def advance(
        self, now: float, rate_Bps: float, up: bool
    ) -> list[SyncRequest]:
        """Account for transmission from the last call up to ``now``.

        Returns requests whose final byte went out in the window, each
        stamped with its exact transmit_end.  The rate must have been
        constant over the window; callers re-advance at every transition.
        """
        if self._cursor is None:
            # Accounting starts when the first request existed, not when
            # the owner first bothered to call advance.
            self._cursor = now
            if self.pending:
                self._cursor = min(now, self.pending[0].enqueued_at)
        start = self._cursor
        if now < start:
            now = start
        self._cursor = now
        if not up or rate_Bps <= 0:
            return []
        completed = []
        t = start
        while True:
            if self.in_flight is None:
                self.in_flight = self._take_next()
                if self.in_flight is None:
                    break
            req = self.in_flight
            if req.enqueued_at > t:
                t = req.enqueued_at  # the line sat idle until it arrived
            remaining = now - t
            need = (req.size - req.sent_bytes) / rate_Bps
            if need <= remaining + _EPS:
                t += need
                req.sent_bytes = req.size
                req.transmit_end = t
                completed.append(req)
                self.in_flight = None
            else:
                req.sent_bytes += max(0.0, remaining) * rate_Bps
                break
        return completed

    def eta(self, now: float, rate_Bps: float, up: bool) -> float | None:
        """Predicted transmit_end of the current head, given a constant
        rate from ``now``.  Call advance(now) first."""
        if not up or rate_Bps <= 0:
            return None
        req = self.in_flight
        if req is None:
            if not self.pending:
                return None
            if self.priority_mode:
                req = min(self.pending, key=lambda r: (r.priority, r.seq))
            else:
                req = self.pending[0]
        return now + (req.size - req.sent_bytes) / rate_Bps

    def dump(self) -> str:
        """Structured text for post-run inspection."""
        lines = [
            f"depth={len(self)} bytes={self.depth_bytes():.0f} "
            f"priority_mode={self.priority_mode}"
        ]
        if self.in_flight:
            r = self.in_flight
            lines.append(
                f"in_flight|{r.request_id}|{r.klass}|{r.size}|sent={r.sent_bytes:.0f}"
            )
        for r in self.pending:
            lines.append(f"pending|{r.request_id}|{r.klass}|{r.size}|prio={r.priority}")
        return "\n".join(lines) + "\n"


class CloudStore:
    """Cloud-side versioned store with per-key write locks.

    apply() is idempotent per request id: a duplicate transmission
    returns the recorded response without re-running the handler.
    Handlers registered per app_type interpret payloads (the default is
    an upsert); they may raise, and the error is what the caller sees.
    """

    def __init__(self):
        self.records: dict[tuple[str, str], Record] = {}
        self.handlers: dict[str, object] = {}
        # One entry per handler run, in execution order.
        self.handler_runs: list[tuple[float, str, str, str]] = []
        # Upsert history: (at, app_type, key, request_id, version).
        self.apply_log: list[tuple[float, str, str, str, int]] = []
        self.apply_attempts: dict[str, int] = {}
        self._responses: dict[str, object] = {}
        self._locks: set[tuple[str, str]] = set()
        self._staged: dict[tuple[str, str], bytes] = {}
        self._blocked: dict[tuple[str, str], list] = {}

    def register_handler(self, app_type: str, handler) -> None:
        self.handlers[app_type] = handler

    # ----------------------------------------------------------- reading

    def get(self, app_type: str, key: str) -> Record | None:
        return self.records.get((app_type, key))

    def search(self, app_type: str, match) -> list[tuple[str, Record]]:
        """Committed snapshot query; locked keys show their last committed
        version, never staged bytes."""
        out = []
        for (t, key), rec in self.records.items():
            if t == app_type and match(key, rec):
                out.append((key, rec))
        out.sort(key=lambda kv: kv[0])
        return out

    # ----------------------------------------------------------- locking

    def locked(self, app_type: str, key: str) -> bool:
        return (app_type, key) in self._locks

    def begin_write(self, app_type: str, key: str, payload: bytes) -> None:
        slot = (app_type, key)
        if slot in self._locks:
            raise RuntimeError(f"write lock already held on {slot}")
        self._locks.add(slot)
        self._staged[slot] = payload

    def commit_write(self, app_type: str, key: str, at: float) -> Record:
        slot = (app_type, key)
        staged = self._staged.pop(slot)
        old = self.records.get(slot)
        rec = Record(
            payload=staged,
            version=(old.version + 1) if old else 1,
            updated_at=at,
        )
        self.records[slot] = rec
        self._locks.discard(slot)
        self._drain_blocked(slot)
        return rec

    def abort_write(self, app_type: str, key: str) -> None:
        slot = (app_type, key)
        self._staged.pop(slot, None)
        self._locks.discard(slot)
        self._drain_blocked(slot)

    def _drain_blocked(self, slot) -> None:
        for args in self._blocked.pop(slot, []):
            self.apply(*args)

    # ----------------------------------------------------------- applying

    def apply(
        self,
        app_type: str,
        key: str | None,
        payload: bytes,
        request_id: str,
        at: float,
    ):
        self.apply_attempts[request_id] = self.apply_attempts.get(request_id, 0) + 1
        if request_id in self._responses:
            return self._responses[request_id]
        slot = (app_type, key)
        if key is not None and slot in self._locks:
            # Queued write waits for the lock holder; it applies on release.
            self._blocked.setdefault(slot, []).append(
                (app_type, key, payload, request_id, at)
            )
            return None
        handler = self.handlers.get(app_type, CloudStore._upsert)
        self.handler_runs.append((at, app_type, key or "", request_id))
        response = handler(self, app_type, key, payload, request_id, at)
        self._responses[request_id] = response
        return response

    def _upsert(self, app_type, key, payload, request_id, at):
        slot = (app_type, key)
        old = self.records.get(slot)
        rec = Record(
            payload=payload,
            version=(old.version + 1) if old else 1,
            updated_at=at,
        )
        self.records[slot] = rec
        self.apply_log.append((at, app_type, key or "", request_id, rec.version))
        return {"ok": True, "version": rec.version}

    def applied_once(self) -> bool:
        """True when no request id ran its handler more than once (the
        attempt counter may exceed one; the effect must not)."""
        seen = {}
        for _, _, _, request_id in self.handler_runs:
            seen[request_id] = seen.get(request_id, 0) + 1
        return all(c == 1 for c in seen.values())


class MessageBoard:
    """Cloud mailbox for store-and-forward messages.

    deposit() is idempotent per message id; pull() hands each message to
    its destination node exactly once, checking TTL at delivery time.
    """

    def __init__(self):
        self.pending: dict[str, dict] = {}
        self.delivered: dict[str, float] = {}
        self.expired: list[str] = []

    def handler(self, store, app_type, key, payload, request_id, at):
        envelope = json.loads(payload.decode())
        self.deposit(envelope)
        return {"ok": True, "message_id": envelope["id"]}

    def deposit(self, envelope: dict) -> None:
        mid = envelope["id"]
        if mid in self.delivered or mid in self.pending:
            return
        self.pending[mid] = envelope

    def deliver_local(self, envelope: dict, now: float) -> bool:
        mid = envelope["id"]
        if mid in self.delivered:
            return False
        self.delivered[mid] = now
        return True

    def pull(self, node_id: int, resolve_node, now: float) -> list[dict]:
        """Messages destined to identities homed on node_id.  resolve_node
        maps a destination name to its current node (or None)."""
        out = []
        for mid in sorted(self.pending):
            env = self.pending[mid]
            if resolve_node(env["dest"]) != node_id:
                continue
            del self.pending[mid]
            ttl = env.get("ttl")
            if ttl is not None and now - env["created_at"] > ttl:
                self.expired.append(mid)
                continue
            self.delivered[mid] = now
            out.append(env)
        return out


@dataclass
class SyncConfig:
    fastget_timeout_s: float = 30.0
    service_s: float = 0.01
    queue_capacity: int | None = None
    message_ttl_s: float | None = None


class LocalServer:
    """Per-node face of the sync layer.

    ``uplink`` supplies is_up()/rate_Bps()/latency_s(); ``clock`` returns
    sim time; ``service_time`` draws the cloud's processing time for one
    request (inject the engine's seeded stream for jitter).
    """

    def __init__(
        self,
        node_id: int,
        uplink,
        store: CloudStore,
        clock,
        *,
        config: SyncConfig | None = None,
        service_time=None,
        board: MessageBoard | None = None,
        resolve_local=None,
        priority_mode: bool = False,
    ):
        self.node_id = node_id
        self.uplink = uplink
        self.store = store
        self.clock = clock
        self.config = config or SyncConfig()
        self.service_time = service_time or (lambda: self.config.service_s)
        self.board = board
        self.resolve_local = resolve_local or (lambda name: None)
        self.queue = LazyQueue(
            capacity=self.config.queue_capacity, priority_mode=priority_mode
        )
        self.records: list[LatencyRecord] = []
        self.counters = {
            "slowput": 0,
            "fastget": 0,
            "fastsearch": 0,
            "message": 0,
            "local_delivery": 0,
        }
        self._seq = 0

    def _next_id(self) -> str:
        self._seq += 1
        return f"n{self.node_id}-q{self._seq}"

    # ------------------------------------------------------------- write

    def slowput(
        self,
        identity: str,
        app_type: str,
        payload: bytes,
        key: str | None = None,
        klass: str = "slowput",
    ) -> Ack:
        """Queue a durable write and ack immediately, backhaul or not."""
        if not payload:
            raise PayloadEmpty("slowput payload must be non-empty")
        now = self.clock()
        req = SyncRequest(
            request_id=self._next_id(),
            identity=identity,
            app_type=app_type,
            key=key,
            payload=payload,
            klass=klass,
            enqueued_at=now,
            seq=self._seq,
        )
        self.queue.enqueue(req)
        self.counters["slowput"] += 1
        return Ack(request_id=req.request_id, enqueued_at=now)

    def advance(self, now: float) -> list[Completion]:
        """Drain the lazy queue up to ``now`` and apply completions.

        Must be called whenever the uplink changes state or rate, and at
        any time the owner wants completion bookkeeping to be current.
        """
        rate = self.uplink.rate_Bps()
        done = self.queue.advance(now, rate, self.uplink.is_up())
        out = []
        latency = self.uplink.latency_s()
        for req in done:
            apply_at = req.transmit_end + latency
            response = self.store.apply(
                req.app_type, req.key, req.payload, req.request_id, apply_at
            )
            receipt_at = apply_at + self.service_time() + latency
            self.records.append(
                LatencyRecord(
                    request_id=req.request_id,
                    klass=req.klass,
                    app_type=req.app_type,
                    size=req.size,
                    enqueued_at=req.enqueued_at,
                    delivered_at=receipt_at,
                )
            )
            out.append(
                Completion(
                    request=req,
                    apply_at=apply_at,
                    receipt_at=receipt_at,
                    response=response,
                )
            )
        return out

    def eta(self, now: float) -> float | None:
        return self.queue.eta(now, self.uplink.rate_Bps(), self.uplink.is_up())

    # -------------------------------------------------------------- read

    def _round_trip(self, size: int) -> tuple[float, float, float]:
        rate = self.uplink.rate_Bps()
        latency = self.uplink.latency_s()
        transfer = size / rate if rate > 0 else 0.0
        service = self.service_time()
        return transfer, latency, service

    def fastget(
        self, identity: str, app_type: str, key: str, payload: bytes
    ) -> FastResponse:
        """Immediate round trip; raises instead of faking local success."""
        if not payload:
            raise PayloadEmpty("fastget payload must be non-empty")
        if not self.uplink.is_up():
            raise BackhaulDown(f"node {self.node_id}: uplink is down")
        self.counters["fastget"] += 1
        now = self.clock()
        transfer, latency, service = self._round_trip(len(payload))
        sojourn = transfer + 2 * latency + service
        if sojourn > self.config.fastget_timeout_s:
            raise SyncTimeout(
                f"predicted sojourn {sojourn:.3f}s exceeds "
                f"{self.config.fastget_timeout_s:.0f}s deadline"
            )
        request_id = self._next_id()
        try:
            value = self.store.apply(
                app_type, key, payload, request_id, now + transfer + latency
            )
        finally:
            self.records.append(
                LatencyRecord(
                    request_id=request_id,
                    klass="fastget",
                    app_type=app_type,
                    size=len(payload),
                    enqueued_at=now,
                    delivered_at=now + sojourn,
                )
            )
        return FastResponse(value=value, at=now + sojourn)

    def fastsearch(self, identity: str, app_type: str, match) -> FastResponse:
        """Immediate committed-snapshot query; write locks never block it."""
        if not self.uplink.is_up():
            raise BackhaulDown(f"node {self.node_id}: uplink is down")
        self.counters["fastsearch"] += 1
        now = self.clock()
        transfer, latency, service = self._round_trip(64)
        sojourn = transfer + 2 * latency + service
        request_id = self._next_id()
        results = self.store.search(app_type, match)
        self.records.append(
            LatencyRecord(
                request_id=request_id,
                klass="fastsearch",
                app_type=app_type,
                size=64,
                enqueued_at=now,
                delivered_at=now + sojourn,
            )
        )
        return FastResponse(value=results, at=now + sojourn)

    # ---------------------------------------------------------- messages

    def store_and_forward(
        self,
        sender: str,
        dest: str,
        payload: bytes,
        ttl: float | None = None,
    ) -> str:
        """Queue a user-to-user message.  Destination on this very node is
        delivered straight from the local spool; everything else rides a
        slowput into the cloud mailbox."""
        if not payload:
            raise PayloadEmpty("message payload must be non-empty")
        now = self.clock()
        self.counters["message"] += 1
        message_id = f"m{self.node_id}-{self.counters['message']}"
        if ttl is None:
            ttl = self.config.message_ttl_s
        envelope = {
            "id": message_id,
            "src": sender,
            "dest": dest,
            "created_at": now,
            "ttl": ttl,
            "body": payload.decode("latin1"),
        }
        if self.resolve_local(dest) == self.node_id:
            if self.board is not None:
                self.board.deliver_local(envelope, now)
            self.counters["local_delivery"] += 1
            self.records.append(
                LatencyRecord(
                    request_id=message_id,
                    klass="message",
                    app_type="__msg__",
                    size=len(payload),
                    enqueued_at=now,
                    delivered_at=now,
                )
            )
            return message_id
        body = json.dumps(envelope, sort_keys=True).encode()
        self._seq += 1
        req = SyncRequest(
            request_id=message_id,
            identity=sender,
            app_type="__msg__",
            key=message_id,
            payload=body,
            klass="message",
            enqueued_at=now,
            seq=self._seq,
        )
        self.queue.enqueue(req)
        return message_id
