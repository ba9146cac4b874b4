"""Discrete-event core: engine, scenario runtime and experiment drivers.

Determinism contract: one seeded random.Random per engine, a heap keyed
by (time, insertion sequence) so ties break by scheduling order, and no
wall-clock anywhere.  Two runs with the same scenario and seed produce
identical traces, metrics and latency samples, byte for byte.

A run produces a RunTrace (attempt and link-transition records) that
evaluate_dual() scores twice against the same fault timeline:

* virtual-operator scoring: an attempt needs a live path from source to
  destination, whatever shape that path has (same node: none at all;
  same zone: the zone's links; cross zone: up through the cloud);
* conventional scoring: every attempt, even node-local, needs both ends
  to reach the cloud, because the core network is the only switch.

Any attempt the conventional architecture completes is an attempt the
virtual operator also completes (src-cloud plus cloud-dst is itself a
source-destination path), so per-attempt failure containment holds by
construction; the evaluator still counts violations rather than assuming
them away.
"""

from __future__ import annotations

import heapq
import logging
import random
import statistics
from dataclasses import dataclass, field

from .errors import ScenarioError
from .identity import IdentityService, ResolverRing, resolver_for
from .scenario import failure_config, sync_config, traffic_config
from .sync import (
    CloudStore,
    LatencyRecord,
    LocalServer,
    MessageBoard,
    SyncConfig,
)
from .topology import BYTES_PER_KBPS, LinkState, Role, Topology, build_topology

log = logging.getLogger("greenlinks")

SERVICES = ("call", "sms", "data")
METRICS = {
    "vce": ("call", "vc"),
    "cce": ("call", "cell"),
    "vse": ("sms", "vc"),
    "cse": ("sms", "cell"),
    "vde": ("data", "vc"),
    "cde": ("data", "cell"),
}


# ------------------------------------------------------------------ engine


class Engine:
    """Minimal event loop: schedule, dispatch, trace."""

    def __init__(self, seed: int = 0):
        self.now = 0.0
        self.rng = random.Random(seed)
        self.handlers: dict[str, object] = {}
        self.trace: list[tuple] = []
        self.events_processed = 0
        self._heap: list = []
        self._seq = 0

    def clock(self) -> float:
        return self.now

    def on(self, kind: str, handler) -> None:
        self.handlers[kind] = handler

    def schedule(self, at: float, kind: str, **payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, kind, payload))

    def log(self, record: tuple) -> None:
        self.trace.append(record)

    def run_until(self, horizon: float | None) -> None:
        """Process events in time order; stop after ``horizon`` (inclusive)
        or, with horizon None, when the heap is empty."""
        while self._heap:
            at = self._heap[0][0]
            if horizon is not None and at > horizon:
                break
            at, _, kind, payload = heapq.heappop(self._heap)
            if at > self.now:
                self.now = at
            handler = self.handlers.get(kind)
            if handler is not None:
                handler(**payload)
            self.events_processed += 1


# ----------------------------------------------------------- run artifacts


@dataclass
class RunTrace:
    topology: Topology
    cloud_id: int
    interval_s: float
    horizon: float
    initial_links: dict[str, bool]
    events: list[tuple] = field(default_factory=list)


@dataclass
class IntervalCounts:
    index: int
    attempted: dict[str, int]
    dropped: dict[tuple[str, str], int]

    def rate(self, service: str, arch: str) -> float:
        n = self.attempted.get(service, 0)
        if n == 0:
            return 0.0
        return self.dropped.get((service, arch), 0) / n


@dataclass
class MetricsLedger:
    intervals: list[IntervalCounts]
    containment_violations: int = 0

    def totals(self) -> tuple[dict[str, int], dict[tuple[str, str], int]]:
        attempted: dict[str, int] = {}
        dropped: dict[tuple[str, str], int] = {}
        for iv in self.intervals:
            for svc, n in iv.attempted.items():
                attempted[svc] = attempted.get(svc, 0) + n
            for key, n in iv.dropped.items():
                dropped[key] = dropped.get(key, 0) + n
        return attempted, dropped

    def overall(self, metric: str) -> float:
        service, arch = METRICS[metric]
        attempted, dropped = self.totals()
        n = attempted.get(service, 0)
        if n == 0:
            return 0.0
        return dropped.get((service, arch), 0) / n

    def csv_rows(self) -> list[tuple]:
        rows = []
        for iv in self.intervals:
            rows.append(
                (iv.index,) + tuple(iv.rate(*METRICS[m]) for m in METRICS)
            )
        return rows


def evaluate_dual(trace: RunTrace) -> MetricsLedger:
    """Score one fault timeline under both architectures.

    Replays the trace with its own link-state sweep (independent of the
    live topology object), labels connected components after every link
    transition, and buckets drops per interval.
    """
    topo = trace.topology
    up = dict(trace.initial_links)
    intervals = max(1, int(round(trace.horizon / trace.interval_s)))
    counts = [
        IntervalCounts(index=i, attempted={}, dropped={}) for i in range(intervals)
    ]
    violations = 0
    comp: dict[int, int] | None = None

    def components() -> dict[int, int]:
        label: dict[int, int] = {}
        mark = 0
        for start in topo.nodes:
            if start in label:
                continue
            label[start] = mark
            frontier = [start]
            while frontier:
                node = frontier.pop()
                for link in topo._adj[node]:
                    if not up[link.link_id]:
                        continue
                    nxt = link.other(node)
                    if nxt not in label:
                        label[nxt] = mark
                        frontier.append(nxt)
            mark += 1
        return label

    for event in trace.events:
        kind = event[0]
        if kind == "link":
            _, _, link_id, state = event
            up[link_id] = state == "up"
            comp = None
        elif kind == "attempt":
            _, at, src, dst, service = event
            if comp is None:
                comp = components()
            cloud = comp[trace.cloud_id]
            vc_ok = comp[src] == comp[dst]
            cell_ok = comp[src] == cloud and comp[dst] == cloud
            if cell_ok and not vc_ok:
                violations += 1
            bucket = counts[min(int(at / trace.interval_s), intervals - 1)]
            bucket.attempted[service] = bucket.attempted.get(service, 0) + 1
            if not vc_ok:
                key = (service, "vc")
                bucket.dropped[key] = bucket.dropped.get(key, 0) + 1
            if not cell_ok:
                key = (service, "cell")
                bucket.dropped[key] = bucket.dropped.get(key, 0) + 1
    return MetricsLedger(intervals=counts, containment_violations=violations)


# ------------------------------------------------------------------ uplink


class TopologyUplink:
    """A node's current path to the cloud, cached per topology epoch."""

    def __init__(self, topology: Topology, node_id: int):
        self.topology = topology
        self.node_id = node_id
        self._epoch = -1
        self._rate = 0.0
        self._latency = 0.0
        self._up = False

    def _refresh(self) -> None:
        if self.topology.epoch == self._epoch:
            return
        self._epoch = self.topology.epoch
        path = self.topology.path(self.node_id, self.topology.cloud_id)
        if path is None:
            self._up = False
        else:
            bw, latency = self.topology.path_metrics(path)
            self._up = True
            self._rate = bw * BYTES_PER_KBPS
            self._latency = latency

    def is_up(self) -> bool:
        self._refresh()
        return self._up

    def rate_Bps(self) -> float:
        self._refresh()
        return self._rate

    def latency_s(self) -> float:
        self._refresh()
        return self._latency


# -------------------------------------------------------------- simulation


@dataclass
class RunResult:
    trace: RunTrace
    ledger: MetricsLedger | None
    latency: list[LatencyRecord]


class Simulation:
    """A scenario wired to an engine, ready to run.

    Sections drive behavior: ``traffic`` and ``failures`` (if present in
    the scenario) feed the dual-architecture availability study; app
    workloads are scheduled from outside through the public surface
    (local(), identity, engine).
    """

    def __init__(
        self,
        scenario: dict,
        *,
        seed: int = 0,
        priority_queue: bool = False,
    ):
        self.scenario = scenario
        self.topology = build_topology(scenario)
        self.engine = Engine(seed)
        self.priority_queue = priority_queue
        cfg = sync_config(scenario)
        self.sync_config = SyncConfig(
            fastget_timeout_s=cfg["fastget_timeout_s"],
            service_s=cfg["service_s"],
            queue_capacity=cfg["queue_capacity"],
            message_ttl_s=cfg["message_ttl_s"],
        )
        self._service_jitter = cfg["service_jitter"]
        self.store = CloudStore()
        self.board = MessageBoard()
        self.store.register_handler("__msg__", self.board.handler)
        self.identity = IdentityService(self.topology, clock=self.engine.clock)
        self.locals: dict[int, LocalServer] = {}
        self._queue_gen: dict[int, int] = {}
        self._initial_links = {
            lid: link.up for lid, link in self.topology.links.items()
        }
        e = self.engine
        e.on("attempt", self._on_attempt)
        e.on("traffic_interval", self._on_traffic_interval)
        e.on("failure_draw", self._on_failure_draw)
        e.on("link_restore", self._on_link_restore)
        e.on("queue_eta", self._on_queue_eta)

    # ------------------------------------------------------------ wiring

    def _service_time(self) -> float:
        base = self.sync_config.service_s
        j = self._service_jitter
        if j <= 0:
            return base
        return base * (1.0 + j * (2.0 * self.engine.rng.random() - 1.0))

    def local(self, node_id: int) -> LocalServer:
        """The node's sync endpoint (created on first use)."""
        server = self.locals.get(node_id)
        if server is None:
            if node_id == self.topology.cloud_id:
                raise ScenarioError("the cloud node has no local server")
            cache = self.identity.caches[node_id]

            def resolve_local(name, _cache=cache, _nid=node_id):
                entry = _cache.get(name)
                if entry is not None and entry.active and entry.address.node == _nid:
                    return _nid
                return None

            server = LocalServer(
                node_id,
                TopologyUplink(self.topology, node_id),
                self.store,
                self.engine.clock,
                config=self.sync_config,
                service_time=self._service_time,
                board=self.board,
                resolve_local=resolve_local,
                priority_mode=self.priority_queue,
            )
            self.locals[node_id] = server
            self._queue_gen[node_id] = 0
        return server

    # -------------------------------------------------------- queue pokes

    def poke(self, node_id: int) -> None:
        """Re-drain a node's lazy queue and reschedule its completion
        wake-up.  Call after enqueuing work or changing link state."""
        server = self.locals[node_id]
        completions = server.advance(self.engine.now)
        self._after_completions(completions)
        self._queue_gen[node_id] += 1
        eta = server.eta(self.engine.now)
        if eta is not None:
            self.engine.schedule(
                eta, "queue_eta", node=node_id, gen=self._queue_gen[node_id]
            )

    def _on_queue_eta(self, node: int, gen: int) -> None:
        if gen != self._queue_gen[node]:
            return
        self.poke(node)

    def _advance_all(self) -> None:
        for node_id in sorted(self.locals):
            completions = self.locals[node_id].advance(self.engine.now)
            self._after_completions(completions)

    def _poke_all(self) -> None:
        for node_id in sorted(self.locals):
            self.poke(node_id)

    def _after_completions(self, completions) -> None:
        for comp in completions:
            if comp.request.app_type == "__msg__":
                self._deliver_messages(comp.apply_at)

    # ----------------------------------------------------------- messages

    def _resolve_dest_node(self, name: str):
        found = self.identity.registry.find(name)
        return found[1].node if found else None

    def _deliver_messages(self, at: float) -> None:
        """Hand parked mailbox messages to destination nodes whose path to
        the cloud is live right now."""
        if not self.board.pending:
            return
        for node_id in sorted(self.locals):
            server = self.locals[node_id]
            if not server.uplink.is_up():
                continue
            pulled = self.board.pull(node_id, self._resolve_dest_node, at)
            for env in pulled:
                server.records.append(
                    LatencyRecord(
                        request_id=env["id"],
                        klass="message",
                        app_type="__msg__",
                        size=len(env["body"]),
                        enqueued_at=env["created_at"],
                        delivered_at=at + server.uplink.latency_s(),
                    )
                )

    # ----------------------------------------------------------- failures

    def _failure_candidates(self, cloud_side: bool) -> list:
        cloud = self.topology.cloud_id
        links = []
        for lid in sorted(self.topology.links):
            link = self.topology.links[lid]
            touches_cloud = cloud in (link.a, link.b)
            if touches_cloud == cloud_side:
                links.append(link)
        return links

    def set_link(self, link_id: str, state: LinkState | str) -> None:
        """Toggle a link with correct accounting: lazy queues are advanced
        at the old rate first, then the state flips, then wake-ups and
        (on restore) pending identity work and message delivery run."""
        state = LinkState(state)
        link = self.topology.links[link_id]
        if link.state is state:
            return
        self._advance_all()
        self.topology.set_link_state(link_id, state)
        self.engine.log(("link", self.engine.now, link_id, state.value))
        self._poke_all()
        if state is LinkState.UP:
            self.identity.flush_pending()
            for node_id in sorted(self.locals):
                self.identity.sync_node(node_id)
            self._deliver_messages(self.engine.now)

    def _on_failure_draw(self, outage_mean_s: float, cloud_share: float) -> None:
        rng = self.engine.rng
        cloud_side = rng.random() < cloud_share
        candidates = self._failure_candidates(cloud_side)
        if not candidates:
            candidates = self._failure_candidates(not cloud_side)
        link = candidates[rng.randrange(len(candidates))]
        duration = rng.expovariate(1.0 / outage_mean_s)
        if not link.up:
            return  # already down; this draw fizzles
        self.set_link(link.link_id, LinkState.DOWN)
        self.engine.schedule(
            self.engine.now + duration, "link_restore", link_id=link.link_id
        )

    def _on_link_restore(self, link_id: str) -> None:
        self.set_link(link_id, LinkState.UP)

    # ------------------------------------------------------------ traffic

    def _nodes_by_role(self, role: Role) -> list[int]:
        return sorted(
            n.node_id for n in self.topology.nodes.values() if n.role is role
        )

    def _on_traffic_interval(self, index: int, config: dict) -> None:
        rng = self.engine.rng
        start = self.engine.now
        interval = config["interval_s"]
        level2 = self._nodes_by_role(Role.LEVEL2)
        level3 = self._nodes_by_role(Role.LEVEL3)
        share2 = config["level_share"]["level2"]
        mix = config["dest_mix"]
        for service in SERVICES:
            for _ in range(int(config["attempts"].get(service, 0))):
                src = self._draw_node(rng, level2, level3, share2)
                dst = self._draw_dest(rng, src, level2, level3, share2, mix)
                at = start + rng.uniform(0.0, interval)
                self.engine.schedule(at, "attempt", src=src, dst=dst, service=service)

    def _draw_node(self, rng, level2, level3, share2) -> int:
        pool = level2 if (rng.random() < share2 or not level3) else level3
        return pool[rng.randrange(len(pool))]

    def _draw_dest(self, rng, src, level2, level3, share2, mix) -> int:
        roll = rng.random()
        if roll < mix["local"]:
            return src
        zone = self.topology.nodes[src].zone
        mates = [n for n in self.topology.zones[zone].node_ids if n != src]
        if roll < mix["local"] + mix["zone"] and mates:
            return mates[rng.randrange(len(mates))]
        outside = [
            n
            for n in sorted(self.identity.caches)
            if self.topology.nodes[n].zone != zone
        ]
        if outside:
            return outside[rng.randrange(len(outside))]
        if mates:
            return mates[rng.randrange(len(mates))]
        return src

    def _on_attempt(self, src: int, dst: int, service: str) -> None:
        self.engine.log(("attempt", self.engine.now, src, dst, service))

    # --------------------------------------------------------------- run

    def run(self, horizon: float | None = None, *, drain: bool = False) -> RunResult:
        """Schedule the scenario's own sections and process events.

        horizon None runs to quiescence (everything already scheduled,
        plus whatever those events schedule).  drain=True processes the
        backlog left after a finite horizon: queued transfers, restores
        and deliveries run to completion, new traffic does not start.
        """
        tcfg = traffic_config(self.scenario) if "traffic" in self.scenario else None
        fcfg = failure_config(self.scenario) if "failures" in self.scenario else None
        if (tcfg or fcfg) and horizon is None:
            raise ScenarioError("traffic and failure sections need a finite horizon")
        if tcfg:
            interval = tcfg["interval_s"]
            for i in range(int(horizon / interval)):
                self.engine.schedule(i * interval, "traffic_interval", index=i, config=tcfg)
        if fcfg:
            t = fcfg["start_s"]
            while t < horizon:
                self.engine.schedule(
                    t,
                    "failure_draw",
                    outage_mean_s=fcfg["outage_mean_s"],
                    cloud_share=fcfg["target_mix"]["cloud"],
                )
                t += fcfg["interval_s"]
        self.engine.run_until(horizon)
        if drain or horizon is None:
            self.engine.run_until(None)
        effective = horizon if horizon is not None else self.engine.now
        trace = RunTrace(
            topology=self.topology,
            cloud_id=self.topology.cloud_id,
            interval_s=(tcfg or {"interval_s": 60.0})["interval_s"],
            horizon=effective,
            initial_links=self._initial_links,
            events=list(self.engine.trace),
        )
        ledger = None
        if any(ev[0] == "attempt" for ev in trace.events):
            ledger = evaluate_dual(trace)
        latency: list[LatencyRecord] = []
        for node_id in sorted(self.locals):
            latency.extend(self.locals[node_id].records)
        latency.sort(key=lambda r: (r.enqueued_at, r.request_id))
        return RunResult(trace=trace, ledger=ledger, latency=latency)


# ----------------------------------------------------------- monte carlo


@dataclass
class MonteCarloResult:
    runs: int
    per_run: dict[str, list[float]]
    containment_violations: int

    def mean(self, metric: str) -> float:
        return statistics.fmean(self.per_run[metric])

    def stdev(self, metric: str) -> float:
        vals = self.per_run[metric]
        return statistics.stdev(vals) if len(vals) > 1 else 0.0

    def ci95(self, metric: str) -> float:
        n = len(self.per_run[metric])
        return 1.96 * self.stdev(metric) / (n ** 0.5) if n > 1 else 0.0


def monte_carlo(
    scenario: dict,
    runs: int,
    horizon: float,
    *,
    base_seed: int = 0,
) -> MonteCarloResult:
    """Independent replications; run i uses seed base_seed + i."""
    per_run: dict[str, list[float]] = {m: [] for m in METRICS}
    violations = 0
    for i in range(runs):
        sim = Simulation(scenario, seed=base_seed + i)
        result = sim.run(horizon)
        if result.ledger is None:
            raise ScenarioError("monte_carlo needs a traffic section")
        for metric in METRICS:
            per_run[metric].append(result.ledger.overall(metric))
        violations += result.ledger.containment_violations
    return MonteCarloResult(
        runs=runs, per_run=per_run, containment_violations=violations
    )


# ------------------------------------------------------- identity bench


@dataclass
class BenchSample:
    arrival: float
    server: int
    sojourn: float


@dataclass
class BenchResult:
    model: str
    servers: int
    samples: list[BenchSample]

    def sojourns(self) -> list[float]:
        return [s.sojourn for s in self.samples]

    def quantile(self, q: float) -> float:
        vals = sorted(self.sojourns())
        if not vals:
            return 0.0
        return vals[min(len(vals) - 1, int(round(q * (len(vals) - 1))))]


def identity_latency_bench(
    model: str,
    servers: int,
    load_rps: float,
    *,
    duration_s: float = 60.0,
    service_s: float = 0.01,
    latency_s: float = 0.1,
    seed: int = 0,
    ring_seed: int = 0,
) -> BenchResult:
    """Lookup latency under load: one shared Poisson arrival stream,
    routed to a single directory server (central) or sharded over a
    resolver ring (dht).  Identical seeds give identical arrival and
    identity draws in both models, so dht with one server reproduces
    central sample for sample.
    """
    if model not in ("central", "dht"):
        raise ScenarioError(f"unknown identity model {model!r}")
    if servers < 1:
        raise ScenarioError("identity bench needs at least one server")
    rng = random.Random(seed)
    ring = ResolverRing(members=tuple(range(servers)), seed=ring_seed)
    free_at = [0.0] * servers
    samples = []
    t = 0.0
    while True:
        t += rng.expovariate(load_rps)
        if t >= duration_s:
            break
        imsi = f"{rng.randrange(10 ** 15):015d}"
        if model == "central":
            server = 0
        else:
            server = resolver_for(ring, imsi)
        reach = t + latency_s
        start = max(reach, free_at[server])
        done = start + service_s
        free_at[server] = done
        samples.append(
            BenchSample(arrival=t, server=server, sojourn=done + latency_s - t)
        )
    return BenchResult(model=model, servers=servers, samples=samples)
