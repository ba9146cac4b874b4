"""Crowd-sensed whitespace detection for an unlicensed GSM band.

Handsets already measure neighbor channels; the base station advertises
six fake neighbors per scan plan and every SMS a phone sends carries its
energy readings for those channels.  The detector classifies each ARFCN:

* one positive (non-zero energy) report marks a channel occupied on the
  spot;
* free requires a long run of zero-energy reports (n_free of them) over
  at least t_free seconds with no positive in between;
* evidence goes stale after evidence_ttl seconds and the channel drops
  back to unknown.

The scan plan keeps unknown channels advertised until they classify,
refilling vacant slots with the least-recently-scanned unknowns (walking
the band from arfcn 1 upward on a cold start) and, once the band is
mapped, cycling the stalest free channels for re-verification.  The
serving channel is never advertised as a fake neighbor but its own
measurements are always accepted.

The station starts quiesced (serving=None) and only transmits after a
channel has been verified free; transmit power then ramps up stepwise
while the neighborhood stays clean and snaps back on any new occupancy
signal.  Channel switches wait for connected calls to finish; new call
admissions are refused while a switch is pending.

The NGSM baseline in compare_ngsm runs the identical estimator fed only
by organic traffic; the volunteer strategy adds paid periodic senders on
top of the same organic trace.
"""

from __future__ import annotations

import csv
import heapq
import math
import random
from dataclasses import dataclass, field
from enum import Enum

from .errors import NoFreeChannel, UnplannedChannel


class Verdict(str, Enum):
    UNKNOWN = "unknown"
    FREE = "free"
    OCCUPIED = "occupied"


@dataclass
class DetectorConfig:
    first_arfcn: int = 1
    last_arfcn: int = 124
    slots: int = 6
    n_free: int = 500
    t_free_s: float = 1800.0
    evidence_ttl_s: float = 86400.0
    ramp_start_dbm: float = 10.0
    ramp_step_db: float = 3.0
    ramp_interval_s: float = 900.0
    ramp_max_dbm: float = 30.0


@dataclass(frozen=True)
class Report:
    reporter: str
    arfcn: int
    energy: int
    at: float


@dataclass
class ChannelState:
    arfcn: int
    verdict: Verdict = Verdict.UNKNOWN
    zero_count: int = 0
    positive_count: int = 0
    window_start: float | None = None
    last_report_at: float | None = None
    last_positive_at: float | None = None
    last_planned_at: float | None = None
    t_verdict: float | None = None


@dataclass
class SwitchDecision:
    switched: bool = False
    pending: bool = False
    quiesced: bool = False
    target: int | None = None


class Detector:
    """Per-base-station channel estimator, scan planner and power control."""

    def __init__(self, config: DetectorConfig | None = None):
        self.config = config or DetectorConfig()
        c = self.config
        self.states: dict[int, ChannelState] = {
            a: ChannelState(arfcn=a) for a in range(c.first_arfcn, c.last_arfcn + 1)
        }
        self.plan: tuple[int, ...] = ()
        self.plan_dirty = True
        self.serving: int | None = None
        self.switch_pending = False
        self.switches: list[tuple[float, int | None, int | None]] = []
        self.dropped_unplanned = 0
        self.tx_power_dbm = c.ramp_start_dbm
        self._ramp_changed_at = 0.0

    # ---------------------------------------------------------- evidence

    def _expire(self, state: ChannelState, now: float) -> None:
        ttl = self.config.evidence_ttl_s
        if state.verdict is Verdict.UNKNOWN or state.last_report_at is None:
            return
        if now - state.last_report_at > ttl:
            state.verdict = Verdict.UNKNOWN
            state.zero_count = 0
            state.window_start = None
            state.t_verdict = None
            self.plan_dirty = True

    def ingest_report(self, report: Report) -> ChannelState:
        """Fold one measurement in.  Reports for channels outside the scan
        plan (other than the serving channel) are dropped and counted."""
        state = self.states.get(report.arfcn)
        if state is None or (
            report.arfcn not in self.plan and report.arfcn != self.serving
        ):
            self.dropped_unplanned += 1
            raise UnplannedChannel(f"arfcn {report.arfcn} is not being scanned")
        now = report.at
        self._expire(state, now)
        state.last_report_at = now
        if report.energy > 0:
            state.positive_count += 1
            state.last_positive_at = now
            state.zero_count = 0
            state.window_start = None
            if state.verdict is not Verdict.OCCUPIED:
                state.verdict = Verdict.OCCUPIED
                state.t_verdict = now
                self.plan_dirty = True
            self._ramp_on_occupancy(now)
        else:
            state.zero_count += 1
            if state.window_start is None:
                state.window_start = now
            if (
                state.verdict is not Verdict.FREE
                and state.zero_count >= self.config.n_free
                and now - state.window_start >= self.config.t_free_s
            ):
                state.verdict = Verdict.FREE
                state.t_verdict = now
                self.plan_dirty = True
        return state

    def unknown_count(self) -> int:
        return sum(1 for s in self.states.values() if s.verdict is Verdict.UNKNOWN)

    # ------------------------------------------------------ scan planning

    def plan_scan(self, now: float) -> tuple[int, ...]:
        """Recompute the advertised fake neighbors at a batch boundary.

        Unknown channels already advertised stay until classified; vacant
        slots take the least-recently-planned unknowns, then the stalest
        free channels as re-verification candidates.  Never the serving
        channel, never an occupied one.
        """
        for state in self.states.values():
            self._expire(state, now)
        keep = [
            a
            for a in self.plan
            if self.states[a].verdict is Verdict.UNKNOWN and a != self.serving
        ]
        slots = self.config.slots
        vacancies = slots - len(keep)
        chosen = list(keep)
        if vacancies > 0:
            fresh = sorted(
                (
                    s
                    for s in self.states.values()
                    if s.verdict is Verdict.UNKNOWN
                    and s.arfcn not in chosen
                    and s.arfcn != self.serving
                ),
                key=lambda s: (
                    s.last_planned_at if s.last_planned_at is not None else -1.0,
                    s.arfcn,
                ),
            )
            for state in fresh[:vacancies]:
                chosen.append(state.arfcn)
            vacancies = slots - len(chosen)
        if vacancies > 0:
            stale_free = sorted(
                (
                    s
                    for s in self.states.values()
                    if s.verdict is Verdict.FREE
                    and s.arfcn not in chosen
                    and s.arfcn != self.serving
                ),
                key=lambda s: (
                    s.last_report_at if s.last_report_at is not None else -1.0,
                    s.arfcn,
                ),
            )
            for state in stale_free[:vacancies]:
                chosen.append(state.arfcn)
        for arfcn in chosen:
            if arfcn not in self.plan:
                self.states[arfcn].last_planned_at = now
        self.plan = tuple(chosen)
        self.plan_dirty = False
        return self.plan

    def plan_is_current(self) -> bool:
        """False once a verdict change (or expiry) may alter the plan, and
        whenever free channels are being rotated for re-verification."""
        if self.plan_dirty:
            return False
        return all(self.states[a].verdict is Verdict.UNKNOWN for a in self.plan)

    # --------------------------------------------------- serving channel

    def maybe_switch_channel(self, active_calls: int, now: float) -> SwitchDecision:
        """Move off an occupied serving channel (or claim a first one).

        With calls connected the switch stays pending and admissions are
        refused until the last call ends.  When nothing is verified free
        the station quiesces and NoFreeChannel is raised.
        """
        serving_bad = (
            self.serving is not None
            and self.states[self.serving].verdict is Verdict.OCCUPIED
        )
        want_start = self.serving is None
        if not serving_bad and not want_start:
            if not self.switch_pending:
                return SwitchDecision()
            serving_bad = True  # pending from an earlier check
        free = [
            s.arfcn
            for s in sorted(
                self.states.values(),
                key=lambda s: (
                    s.last_report_at if s.last_report_at is not None else -1.0,
                    s.arfcn,
                ),
            )
            if s.verdict is Verdict.FREE and s.arfcn != self.serving
        ]
        if not free:
            if serving_bad:
                old = self.serving
                self.serving = None
                self.switch_pending = False
                self.switches.append((now, old, None))
                raise NoFreeChannel(f"no verified-free channel at t={now:.0f}")
            return SwitchDecision()
        if serving_bad and active_calls > 0:
            self.switch_pending = True
            return SwitchDecision(pending=True)
        target = free[0]
        old = self.serving
        self.serving = target
        self.switch_pending = False
        self.switches.append((now, old, target))
        return SwitchDecision(switched=True, target=target)

    def admit_call(self) -> bool:
        return self.serving is not None and not self.switch_pending

    # ------------------------------------------------------- power ramp

    def _ramp_on_occupancy(self, now: float) -> None:
        if self.tx_power_dbm != self.config.ramp_start_dbm:
            self.tx_power_dbm = self.config.ramp_start_dbm
            self._ramp_changed_at = now

    def maybe_ramp(self, now: float) -> bool:
        """One ramp step when the whole advertised neighborhood plus the
        serving channel have stayed verified free over the last interval."""
        c = self.config
        if self.serving is None or self.tx_power_dbm >= c.ramp_max_dbm:
            return False
        if now - self._ramp_changed_at < c.ramp_interval_s:
            return False
        watched = list(self.plan) + [self.serving]
        for arfcn in watched:
            state = self.states[arfcn]
            if state.verdict is not Verdict.FREE:
                return False
            if (
                state.last_positive_at is not None
                and now - state.last_positive_at < c.ramp_interval_s
            ):
                return False
        self.tx_power_dbm = min(c.ramp_max_dbm, self.tx_power_dbm + c.ramp_step_db)
        self._ramp_changed_at = now
        return True

    # ----------------------------------------------------------- export

    def occupancy_rows(self) -> list[tuple[int, str, float | None]]:
        return [
            (s.arfcn, s.verdict.value, s.t_verdict)
            for s in sorted(self.states.values(), key=lambda s: s.arfcn)
        ]


# ----------------------------------------------------------- radio world


@dataclass
class Phone:
    phone_id: str
    x: float
    y: float


class RadioField:
    """Unit-square world: one stationary interferer per truth-occupied
    channel; a phone hears its energy only inside the radius."""

    def __init__(
        self,
        interferers: dict[int, tuple[float, float]],
        radius: float = 0.25,
        step: float = 0.05,
    ):
        self.interferers = dict(interferers)
        self.radius = radius
        self.step = step

    def walk(self, phone: Phone, rng: random.Random) -> None:
        phone.x = min(1.0, max(0.0, phone.x + rng.uniform(-self.step, self.step)))
        phone.y = min(1.0, max(0.0, phone.y + rng.uniform(-self.step, self.step)))

    def energy(self, phone: Phone, arfcn: int) -> int:
        spot = self.interferers.get(arfcn)
        if spot is None:
            return 0
        d = math.hypot(phone.x - spot[0], phone.y - spot[1])
        if d > self.radius:
            return 0
        return max(1, int(round(60.0 * (1.0 - d / self.radius))))

    @classmethod
    def place(cls, occupied: list[int], rng: random.Random, **kw) -> "RadioField":
        spots = {a: (rng.random(), rng.random()) for a in sorted(occupied)}
        return cls(spots, **kw)


def make_phones(count: int, rng: random.Random) -> list[Phone]:
    return [Phone(f"p{i}", rng.random(), rng.random()) for i in range(count)]


def volunteer_traffic(
    volunteers: int, period_s: float, until_s: float, start_s: float = 0.0
) -> list[tuple[float, int]]:
    """Deterministic paid-sender schedule: each volunteer one SMS per
    period, staggered evenly.  Returns (at, volunteer_index) sorted."""
    if volunteers <= 0:
        return []
    out = []
    for v in range(volunteers):
        t = start_s + period_s * v / volunteers
        while t <= until_s:
            out.append((t, v))
            t += period_s
    out.sort()
    return out


def organic_traffic(
    users: int, mean_period_s: float, count: int, rng: random.Random
) -> list[tuple[float, int]]:
    """Merged Poisson SMS arrivals for ``users`` phones, ``count`` events."""
    heap = []
    for u in range(users):
        heapq.heappush(heap, (rng.expovariate(1.0 / mean_period_s), u))
    out = []
    while len(out) < count:
        at, u = heapq.heappop(heap)
        out.append((at, u))
        heapq.heappush(heap, (at + rng.expovariate(1.0 / mean_period_s), u))
    return out


@dataclass
class DetectionRun:
    detector: Detector
    converged_at: float | None
    batches: int
    reports: list[Report] = field(default_factory=list)
    collisions: int = 0


def run_detection(
    traffic: list[tuple[float, int]],
    detector: Detector,
    field_model: RadioField,
    phones: list[Phone],
    rng: random.Random,
    *,
    keep_reports: bool = False,
    truth_occupied: set[int] | None = None,
    manage_serving: bool = True,
) -> DetectionRun:
    """Drive a detector with SMS-borne measurement batches.

    Each traffic event is one SMS from one phone: the phone takes a step,
    measures the advertised channels (plus the serving channel) and the
    batch is ingested; plans, serving choice and the power ramp update at
    batch boundaries.  Stops when the band is fully classified or the
    traffic runs out.
    """
    run = DetectionRun(detector=detector, converged_at=None, batches=0)
    detector.plan_scan(traffic[0][0] if traffic else 0.0)
    for at, phone_idx in traffic:
        phone = phones[phone_idx % len(phones)]
        field_model.walk(phone, rng)
        measured = list(detector.plan)
        if detector.serving is not None and detector.serving not in measured:
            measured.append(detector.serving)
        for arfcn in measured:
            report = Report(
                reporter=phone.phone_id,
                arfcn=arfcn,
                energy=field_model.energy(phone, arfcn),
                at=at,
            )
            detector.ingest_report(report)
            if keep_reports:
                run.reports.append(report)
        run.batches += 1
        if not detector.plan_is_current():
            detector.plan_scan(at)
        if manage_serving:
            try:
                detector.maybe_switch_channel(active_calls=0, now=at)
            except NoFreeChannel:
                pass
            detector.maybe_ramp(at)
        if truth_occupied is not None and detector.serving in truth_occupied:
            run.collisions += 1
        if run.converged_at is None and detector.unknown_count() == 0:
            run.converged_at = at
            break
    return run


def compare_ngsm(
    users: int,
    volunteer_ratio: float,
    channels: int,
    *,
    seed: int = 0,
    organic_period_s: float = 300.0,
    volunteer_period_s: float = 60.0,
    config: DetectorConfig | None = None,
) -> tuple[float, float]:
    """Time to classify the whole band: organic-only baseline vs the same
    organic trace plus paid volunteers.  Returns seconds (ngsm, volunteer).

    The bench band is truth-free everywhere, which makes classification
    purely evidence-count driven: identical organic traces guarantee the
    volunteer strategy can only be earlier.  channels must equal users
    (one handset per household, band sized to the community).
    """
    if channels != users:
        raise ValueError("bench setup pins channels == users")
    if config is None:
        config = DetectorConfig(
            first_arfcn=1, last_arfcn=channels, n_free=50, t_free_s=600.0
        )
    groups = math.ceil(channels / config.slots)
    # Each group needs n_free zero batches and t_free of elapsed window;
    # budget events for whichever dominates, with slack.
    per_group = config.n_free + math.ceil(
        config.t_free_s * users / organic_period_s
    )
    need = groups * (per_group + 10) + 400
    rng = random.Random(seed)
    organic = organic_traffic(users, organic_period_s, need, rng)
    horizon = organic[-1][0]
    volunteers = round(volunteer_ratio * users)
    extra = volunteer_traffic(volunteers, volunteer_period_s, horizon)

    def classify(trace: list[tuple[float, int]]) -> float:
        det = Detector(config)
        field_model = RadioField({})
        phones = make_phones(users + volunteers, random.Random(seed + 1))
        run = run_detection(
            trace,
            det,
            field_model,
            phones,
            random.Random(seed + 2),
            manage_serving=False,
        )
        if run.converged_at is None:
            return float("inf")
        return run.converged_at

    t_ngsm = classify(organic)
    if volunteers == 0:
        return t_ngsm, t_ngsm
    merged = sorted(
        organic + [(at, users + v) for at, v in extra], key=lambda e: (e[0], e[1])
    )
    return t_ngsm, classify(merged)


# -------------------------------------------------------------- reports io


def export_reports(reports: list[Report], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["reporter", "arfcn", "energy", "at"])
    for r in reports:
        writer.writerow([r.reporter, r.arfcn, r.energy, f"{r.at:.6g}"])


def import_reports(fh) -> list[Report]:
    out = []
    for row in csv.DictReader(fh):
        out.append(
            Report(
                reporter=row["reporter"],
                arfcn=int(row["arfcn"]),
                energy=int(row["energy"]),
                at=float(row["at"]),
            )
        )
    return out
