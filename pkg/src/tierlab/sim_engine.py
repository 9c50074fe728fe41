"""Deterministic discrete-event engine: clock, actors, accounting, phases.

Cores and kernel daemons are logical actors interleaved on one global
cycle counter through a (cycle, sequence) priority queue, so a (seed,
config) pair always replays the same run.  Writes take effect when issued
and their latency is charged to completion; a page mid-migration is
blocked and stalls its accessors until the remap lands.

Snapshots taken at a fixed interval feed the phase detector, which splits
a run into the transient (migration in progress) and stable phases.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import asdict, dataclass, field

from .access_tracking import PressureThresholds, Tracker
from .mem_model import (
    CACHE_LINE,
    AccessKind,
    CostModel,
    FaultKind,
    Machine,
    OutOfMemoryError,
    SimulationError,
    Tier,
    TierSpec,
)
from .policies import Policy
from .shadowing import DemotionMode
from .workload import Scenario, make_stream

SCHEMA_VERSION = 1
DEFAULT_SLICE = 10_000
DEFAULT_SNAPSHOT_INTERVAL = 1_000_000


@dataclass
class Metrics:
    """Monotone run counters; gauges are sampled into snapshots."""
    access_count: int = 0
    read_count: int = 0
    write_count: int = 0
    total_access_cycles: int = 0
    latency_cycles: int = 0
    stall_cycles: int = 0
    fault_cycles: int = 0
    minor_faults: int = 0
    shadow_faults: int = 0
    promotions_read: int = 0
    promotions_write: int = 0
    demotions_remap: int = 0
    demotions_copy: int = 0
    tpm_committed: int = 0
    tpm_aborted: int = 0
    perm_errors: int = 0
    demotion_cycles_remap: int = 0
    demotion_cycles_copy: int = 0

    def count_promotion(self, kind: AccessKind) -> None:
        if kind is AccessKind.READ:
            self.promotions_read += 1
        else:
            self.promotions_write += 1

    def count_demotion(self, mode: DemotionMode, cycles: int = 0) -> None:
        if mode is DemotionMode.REMAP:
            self.demotions_remap += 1
            self.demotion_cycles_remap += cycles
        else:
            self.demotions_copy += 1
            self.demotion_cycles_copy += cycles

    def mean_demotion_cost(self, mode: DemotionMode) -> float:
        if mode is DemotionMode.REMAP:
            return (self.demotion_cycles_remap / self.demotions_remap
                    if self.demotions_remap else 0.0)
        return (self.demotion_cycles_copy / self.demotions_copy
                if self.demotions_copy else 0.0)

    @property
    def promotions(self) -> int:
        return self.promotions_read + self.promotions_write

    @property
    def demotions(self) -> int:
        return self.demotions_remap + self.demotions_copy

    @property
    def migrations(self) -> int:
        return self.promotions + self.demotions


@dataclass
class MetricsSnapshot:
    cycle: int
    access_count: int
    read_count: int
    write_count: int
    total_access_cycles: int
    minor_faults: int
    shadow_faults: int
    promotions_read: int
    promotions_write: int
    demotions_remap: int
    demotions_copy: int
    tpm_committed: int
    tpm_aborted: int
    shadow_pages: int
    fast_free: int
    wss_fast_resident: int
    throughput_proxy: float

    @property
    def migrations(self) -> int:
        return (self.promotions_read + self.promotions_write
                + self.demotions_remap + self.demotions_copy)


SNAPSHOT_FIELDS = list(MetricsSnapshot.__dataclass_fields__)


@dataclass
class PhaseStats:
    cycles: int = 0
    access_count: int = 0
    read_count: int = 0
    write_count: int = 0
    total_access_cycles: int = 0
    minor_faults: int = 0
    shadow_faults: int = 0
    promotions_read: int = 0
    promotions_write: int = 0
    demotions_remap: int = 0
    demotions_copy: int = 0
    tpm_committed: int = 0
    tpm_aborted: int = 0
    throughput_proxy: float = 0.0

    @property
    def promotions(self) -> int:
        return self.promotions_read + self.promotions_write

    @property
    def demotions(self) -> int:
        return self.demotions_remap + self.demotions_copy

    @property
    def migrations(self) -> int:
        return self.promotions + self.demotions


@dataclass
class PhaseReport:
    schema_version: int
    seed: int
    end_cycle: int
    transient_end_cycle: int
    stable_detected: bool
    oom_terminated: bool
    transient: PhaseStats
    stable: PhaseStats
    totals: dict
    success_ratio: str | None
    snapshots: list

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "end_cycle": self.end_cycle,
            "transient_end_cycle": self.transient_end_cycle,
            "stable_detected": self.stable_detected,
            "oom_terminated": self.oom_terminated,
            "transient": asdict(self.transient),
            "stable": asdict(self.stable),
            "totals": self.totals,
            "success_ratio": self.success_ratio,
        }


def _relative_change(a: int, b: int) -> float:
    return abs(a - b) / max(a, b, 1)


def detect_stable(windows: list[tuple[int, int]]) -> bool:
    """Phase rule over per-window (migrations, wss_fast_residency) pairs:
    stable once the migration rate changes by < 10% across three consecutive
    windows or the working set's fast-tier residency stops increasing.  A
    run with no migrations at all is stable immediately."""
    if len(windows) < 2:
        return False
    if all(m == 0 for m, _ in windows):
        return True
    if len(windows) < 3:
        return False
    (m0, r0), (m1, r1), (m2, r2) = windows[-3:]
    if _relative_change(m0, m1) < 0.10 and _relative_change(m1, m2) < 0.10:
        return True
    if r0 >= r1 >= r2:
        return True
    return False


@dataclass
class _PendingAccess:
    page_id: int
    kind: AccessKind
    issue_cycle: int
    stall_cycles: int = 0
    fault_cycles: int = 0
    bypass: bool = False
    count_touch: bool = True


def place_scenario(machine: Machine, tracker: Tracker, scenario: Scenario,
                   arm: bool) -> None:
    """Materialize the initial layout: reserve pinned frames, create pages
    in placement order (which fixes the LRU age order), arm slow pages for
    hint faults when the policy tracks through them."""
    scenario.validate_against(machine.pools[Tier.FAST].capacity,
                              machine.pools[Tier.SLOW].capacity)
    if scenario.pinned_fast_pages:
        machine.reserve_frames(Tier.FAST, scenario.pinned_fast_pages)
    for rng, tier in scenario.placement:
        for page_id in rng:
            protected = arm and tier is Tier.SLOW and scenario.arm_slow_pages
            machine.create_page(page_id, tier, protected=protected)
            tracker.track(page_id)


class Simulation:
    """One run: a machine, a scenario stream, a policy, and the clock."""

    def __init__(self, machine: Machine, tracker: Tracker, scenario: Scenario,
                 policy: Policy, *, cores: int | None = None,
                 snapshot_interval: int = DEFAULT_SNAPSHOT_INTERVAL,
                 slice_period: int = DEFAULT_SLICE,
                 strict_audit: bool = True):
        self.machine = machine
        self.tracker = tracker
        self.scenario = scenario
        self.policy = policy
        self.cores = cores if cores is not None else machine.cores
        self.snapshot_interval = snapshot_interval
        self.slice_period = slice_period
        self.strict_audit = strict_audit

        self.metrics = Metrics()
        self.now = 0
        self.stream = make_stream(scenario)
        self.snapshots: list[MetricsSnapshot] = []
        self.oom_terminated = False

        self._heap: list = []
        self._seq = itertools.count()
        self._blocked: dict[int, int] = {}
        self._pending: dict[int, _PendingAccess | None] = {}
        self._idle_cores = 0
        self._finished = False
        self._end_cycle = 0
        self._placed = False
        self._wss_ids = scenario.wss_page_ids()

    # -- scheduling primitives ---------------------------------------------

    def schedule(self, cycle: int, fn) -> None:
        heapq.heappush(self._heap, (cycle, next(self._seq), fn))

    def block_page(self, page_id: int, until: int) -> None:
        if self._blocked.get(page_id, 0) < until:
            self._blocked[page_id] = until

    def blocked_until(self, page_id: int) -> int:
        return self._blocked.get(page_id, 0)

    # -- run loop -------------------------------------------------------------

    def setup(self) -> None:
        """Materialize initial placement; idempotent, runs implicitly from
        run() but callable first so tests can adjust page state."""
        if self._placed:
            return
        place_scenario(self.machine, self.tracker, self.scenario,
                       arm=self.policy.needs_arming)
        self._placed = True

    def run(self) -> PhaseReport:
        self.setup()
        self.policy.start(self)
        for core in range(self.cores):
            self._pending[core] = None
            self.schedule(0, lambda at, core=core: self._fire_core(core, at))
        self.schedule(self.snapshot_interval, self._snapshot_event)
        self._take_snapshot(0)

        while self._heap and not self._finished:
            cycle, _, fn = heapq.heappop(self._heap)
            self.now = cycle
            try:
                fn(cycle)
            except OutOfMemoryError:
                self.oom_terminated = True
                self._end_cycle = cycle
                break
        if not self.oom_terminated:
            self.now = self._end_cycle
        self._take_snapshot(self._end_cycle)
        if self.strict_audit:
            self.machine.audit_frames()
            self._audit_accounting()
        return self._build_report()

    # -- core actor ---------------------------------------------------------

    def _fire_core(self, core: int, now: int) -> None:
        rec = self._pending[core]
        if rec is None:
            event = self.stream.next_event()
            if event is None:
                self._idle_cores += 1
                if self._idle_cores == self.cores:
                    self._finished = True
                    self._end_cycle = max(self._end_cycle, now)
                return
            rec = _PendingAccess(event.page_id, event.kind, now)
            self._pending[core] = rec

        t = now
        machine = self.machine
        while True:
            ready = self._blocked.get(rec.page_id, 0)
            if ready > t:
                rec.stall_cycles += ready - t
                self.schedule(ready, lambda at, core=core: self._fire_core(core, at))
                return
            result = machine.access(rec.page_id, rec.kind, core,
                                    count_touch=rec.count_touch,
                                    bypass_protection=rec.bypass)
            fault = result.fault
            if fault is None:
                break
            if fault is FaultKind.HINT:
                cost = self.policy.on_hint_fault(rec.page_id, rec.kind, core, t)
                self.metrics.minor_faults += 1
                rec.fault_cycles += cost
                t += cost
                rec.bypass = True
                rec.count_touch = False
                continue
            if fault is FaultKind.SHADOW_WRITE:
                cost = self.policy.on_shadow_fault(rec.page_id, t)
                self.metrics.shadow_faults += 1
                rec.fault_cycles += cost
                t += cost
                continue
            if fault is FaultKind.NOT_PRESENT:
                ready = self._blocked.get(rec.page_id, 0)
                if ready <= t:
                    raise SimulationError(
                        f"page {rec.page_id} unmapped with no pending remap")
                continue
            # genuine permission violation: surfaced to the workload
            self.metrics.perm_errors += 1
            self._complete(core, rec, t, latency=0)
            return

        if rec.kind is AccessKind.READ:
            self._check_read(rec.page_id)
        t += result.latency
        self._complete(core, rec, t, latency=result.latency)

    def _check_read(self, page_id: int) -> None:
        # content oracle: a read must observe the last committed write
        observed = self.machine.read_observes(page_id)
        expected = self.machine.infos[page_id].content_version
        if observed != expected:
            raise SimulationError(
                f"read of page {page_id} observed version {observed}, "
                f"last committed write is {expected}")

    def _complete(self, core: int, rec: _PendingAccess, t: int, latency: int) -> None:
        m = self.metrics
        total = t - rec.issue_cycle
        if total != rec.stall_cycles + rec.fault_cycles + latency:
            raise SimulationError("per-access cycle accounting leaked")
        m.access_count += 1
        if rec.kind is AccessKind.READ:
            m.read_count += 1
        else:
            m.write_count += 1
        m.total_access_cycles += total
        m.latency_cycles += latency
        m.stall_cycles += rec.stall_cycles
        m.fault_cycles += rec.fault_cycles
        self.policy.on_access_complete(rec.page_id, rec.kind, core, t)
        self._pending[core] = None
        self._end_cycle = max(self._end_cycle, t)
        self.schedule(t, lambda at, core=core: self._fire_core(core, at))

    # -- snapshots and phases ---------------------------------------------------

    def _snapshot_event(self, now: int) -> None:
        self._take_snapshot(now)
        if not self._finished:
            self.schedule(now + self.snapshot_interval, self._snapshot_event)

    def _wss_resident(self) -> int:
        count = 0
        for page_id in self._wss_ids:
            pte = self.machine.ptes.get(page_id)
            if pte is not None and pte.tier is Tier.FAST:
                count += 1
        return count

    def _take_snapshot(self, cycle: int) -> None:
        if self.snapshots and self.snapshots[-1].cycle == cycle:
            return
        m = self.metrics
        shadow_pages = getattr(getattr(self.policy, "shadow_mgr", None),
                               "total_shadow_pages", 0)
        proxy = (m.access_count * CACHE_LINE / cycle) if cycle else 0.0
        self.snapshots.append(MetricsSnapshot(
            cycle=cycle,
            access_count=m.access_count,
            read_count=m.read_count,
            write_count=m.write_count,
            total_access_cycles=m.total_access_cycles,
            minor_faults=m.minor_faults,
            shadow_faults=m.shadow_faults,
            promotions_read=m.promotions_read,
            promotions_write=m.promotions_write,
            demotions_remap=m.demotions_remap,
            demotions_copy=m.demotions_copy,
            tpm_committed=m.tpm_committed,
            tpm_aborted=m.tpm_aborted,
            shadow_pages=shadow_pages,
            fast_free=self.machine.fast_free(),
            wss_fast_resident=self._wss_resident(),
            throughput_proxy=proxy,
        ))

    def _audit_accounting(self) -> None:
        m = self.metrics
        if m.total_access_cycles != m.latency_cycles + m.stall_cycles + m.fault_cycles:
            raise SimulationError("global cycle accounting does not close")

    # -- report ---------------------------------------------------------------

    def _phase_boundary(self) -> tuple[int, bool]:
        """Index into snapshots where the stable phase starts, via the
        detector applied to growing window prefixes."""
        snaps = self.snapshots
        if len(snaps) < 3:
            return len(snaps) - 1, False
        windows = []
        for i in range(1, len(snaps)):
            migrations = snaps[i].migrations - snaps[i - 1].migrations
            windows.append((migrations, snaps[i].wss_fast_resident))
            if detect_stable(windows):
                # the detecting window itself belongs to the stable phase
                return i - 1, True
        return len(snaps) - 1, False

    @staticmethod
    def _phase_stats(first: MetricsSnapshot, last: MetricsSnapshot) -> PhaseStats:
        cycles = last.cycle - first.cycle
        accesses = last.access_count - first.access_count
        return PhaseStats(
            cycles=cycles,
            access_count=accesses,
            read_count=last.read_count - first.read_count,
            write_count=last.write_count - first.write_count,
            total_access_cycles=last.total_access_cycles - first.total_access_cycles,
            minor_faults=last.minor_faults - first.minor_faults,
            shadow_faults=last.shadow_faults - first.shadow_faults,
            promotions_read=last.promotions_read - first.promotions_read,
            promotions_write=last.promotions_write - first.promotions_write,
            demotions_remap=last.demotions_remap - first.demotions_remap,
            demotions_copy=last.demotions_copy - first.demotions_copy,
            tpm_committed=last.tpm_committed - first.tpm_committed,
            tpm_aborted=last.tpm_aborted - first.tpm_aborted,
            throughput_proxy=(accesses * CACHE_LINE / cycles) if cycles else 0.0,
        )

    def _build_report(self) -> PhaseReport:
        from .tpm import success_ratio

        boundary, detected = self._phase_boundary()
        first, cut, last = self.snapshots[0], self.snapshots[boundary], self.snapshots[-1]
        m = self.metrics
        totals = {
            "access_count": m.access_count,
            "read_count": m.read_count,
            "write_count": m.write_count,
            "total_access_cycles": m.total_access_cycles,
            "latency_cycles": m.latency_cycles,
            "stall_cycles": m.stall_cycles,
            "fault_cycles": m.fault_cycles,
            "minor_faults": m.minor_faults,
            "shadow_faults": m.shadow_faults,
            "promotions_read": m.promotions_read,
            "promotions_write": m.promotions_write,
            "demotions_remap": m.demotions_remap,
            "demotions_copy": m.demotions_copy,
            "tpm_committed": m.tpm_committed,
            "tpm_aborted": m.tpm_aborted,
            "perm_errors": m.perm_errors,
            "demotion_cycles_remap": m.demotion_cycles_remap,
            "demotion_cycles_copy": m.demotion_cycles_copy,
            "shadow_pages_end": last.shadow_pages,
            "fast_free_end": last.fast_free,
            "wss_fast_resident_end": last.wss_fast_resident,
        }
        return PhaseReport(
            schema_version=SCHEMA_VERSION,
            seed=self.scenario.seed,
            end_cycle=last.cycle,
            transient_end_cycle=cut.cycle,
            stable_detected=detected,
            oom_terminated=self.oom_terminated,
            transient=self._phase_stats(first, cut),
            stable=self._phase_stats(cut, last),
            totals=totals,
            success_ratio=success_ratio(m.tpm_committed, m.tpm_aborted),
            snapshots=self.snapshots,
        )


def build_simulation(scenario: Scenario, policy_kind: str, *,
                     fast_spec: TierSpec, slow_spec: TierSpec, costs: CostModel,
                     cores: int = 4, policy_params: dict | None = None,
                     snapshot_interval: int = DEFAULT_SNAPSHOT_INTERVAL,
                     slice_period: int = DEFAULT_SLICE) -> Simulation:
    """Wire machine, tracker, policy, and engine for one configuration."""
    from .policies import build_policy

    machine = Machine(fast_spec, slow_spec, costs, cores=cores)
    thresholds = PressureThresholds.for_capacity(fast_spec.capacity_pages)
    tracker = Tracker(machine, thresholds)
    params = dict(policy_params or {})
    params.setdefault("seed", scenario.seed + 1)
    policy = build_policy(policy_kind, machine, tracker, **params)
    return Simulation(machine, tracker, scenario, policy,
                      cores=cores, snapshot_interval=snapshot_interval,
                      slice_period=slice_period)
