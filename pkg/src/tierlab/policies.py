"""Pluggable tier-management policies over the shared substrate.

Four strategies: asynchronous transactional migration with shadowing,
synchronous fault-time migration (kernel NUMA-style), sampling-driven
background migration, and a no-migration baseline.  Each policy installs
its background actors on the engine and handles hint faults in the
faulting core's context.
"""

from __future__ import annotations

import heapq

import numpy as np

from .access_tracking import Tracker
from .mem_model import AccessKind, Machine, SimulationError, Tier
from .shadowing import DemotionMode, ReclaimTrigger, ShadowManager
from .tpm import TransactionalMigrator

TPP_MAX_MIGRATE_ATTEMPTS = 10
KPROMOTE_BUDGET = 64
SAMPLING_BATCH = 32


def sync_migrate(machine: Machine, page_id: int, dst_frame: int) -> int:
    """Classic unmap-copy-remap promotion; the page is unreadable for the
    whole window and the old slow frame is freed (exclusive move)."""
    old, cost = machine.atomic_unmap(page_id)
    machine.copy_frame(old.mapped_frame, dst_frame)
    machine.free_frame(old.mapped_frame)
    cost += machine.costs.page_copy_cost
    cost += machine.remap(page_id, dst_frame, Tier.FAST)
    return cost


class Policy:
    """Base: no faults handled, no actors."""

    name = "base"
    needs_arming = False

    def __init__(self, machine: Machine, tracker: Tracker):
        self.machine = machine
        self.tracker = tracker
        self.engine = None

    def start(self, engine) -> None:
        self.engine = engine

    def on_hint_fault(self, page_id: int, kind: AccessKind, core: int, now: int) -> int:
        raise SimulationError(f"{self.name} received an unexpected hint fault")

    def on_shadow_fault(self, page_id: int, now: int) -> int:
        raise SimulationError(f"{self.name} received an unexpected shadow-write fault")

    def on_access_complete(self, page_id: int, kind: AccessKind, core: int, now: int) -> None:
        pass


class KswapdActor:
    """Watermark-driven demotion daemon shared by the fault-based policies.

    With shadowing active it first frees enough shadow frames that a whole
    demotion batch can land in the slow tier, then demotes the scan's
    victims (remap where a shadow exists, copy otherwise).
    """

    def __init__(self, policy: Policy, shadow_mgr: ShadowManager):
        self.policy = policy
        self.shadow_mgr = shadow_mgr
        self.busy_cycles = 0

    def start(self, engine) -> None:
        self.engine = engine
        engine.schedule(engine.slice_period, self.fire)

    def fire(self, now: int) -> None:
        engine = self.engine
        machine = self.policy.machine
        tracker = self.policy.tracker
        t = now
        if machine.fast_free() < tracker.thresholds.low_water_mark:
            batch = tracker.thresholds.demotion_batch
            # shadowed, cooled masters first: discarding them is a remap with
            # zero copy traffic and zero new slow frames, the cheapest way to
            # free fast memory
            discarded = self._discard_shadowed(batch, t)
            t = discarded[1]
            remaining = batch - discarded[0]
            if remaining > 0 and machine.fast_free() < tracker.thresholds.low_water_mark:
                victims = tracker.kswapd_scan(machine.fast_free())[:remaining]
                infos = machine.infos
                bare = sum(1 for v in victims if not infos[v].shadow)
                overflow = bare - machine.slow_free()
                if overflow > 0:
                    # copy demotions need destination frames; free old shadows
                    # for whatever will not fit, the rest waits a pass
                    self.shadow_mgr.reclaim_shadow(overflow, ReclaimTrigger.KSWAPD)
                for page_id in victims:
                    if not machine.infos[page_id].shadow and machine.slow_free() == 0:
                        break
                    t = self._demote(page_id, t)
        self.busy_cycles += t - now
        engine.schedule(max(now + engine.slice_period, t), self.fire)

    def _discard_shadowed(self, budget: int, t: int) -> tuple[int, int]:
        """Demote masters of the oldest shadows that have gone cold: not on
        the active list and not accessed since their last look (accessed
        clears as a second chance)."""
        machine = self.policy.machine
        lru = self.policy.tracker.lru
        done = 0
        index = self.shadow_mgr.index
        for _, _, page_id in index.oldest(len(index)):
            if done >= budget:
                break
            pte = machine.ptes[page_id]
            if not pte.present or pte.tier is not Tier.FAST:
                continue
            if machine.infos[page_id].pinned or page_id in lru.active:
                continue
            if pte.accessed:
                pte.accessed = False
                continue
            t = self._demote(page_id, t)
            done += 1
        return done, t

    def _demote(self, page_id: int, t: int) -> int:
        result = self.shadow_mgr.demote_page(page_id)
        self.engine.block_page(page_id, t + result.cycles)
        self.engine.metrics.count_demotion(result.mode)
        return t + result.cycles


class NomadPolicy(Policy):
    """Hint faults feed the promotion queues; a background promoter runs
    migration transactions off the critical path; committed pages keep
    their slow copy as a shadow for remap-only demotion."""

    name = "nomad"
    needs_arming = True

    def __init__(self, machine: Machine, tracker: Tracker,
                 kpromote_budget: int = KPROMOTE_BUDGET):
        super().__init__(machine, tracker)
        self.shadow_mgr = ShadowManager(machine, tracker)
        self.migrator = TransactionalMigrator(machine, tracker)
        self.kswapd = KswapdActor(self, self.shadow_mgr)
        self.budget = kpromote_budget
        self.fault_kind: dict[int, AccessKind] = {}
        self.active_txn = None
        self._in_flight = False
        self._started_this_round = 0
        self.busy_cycles = 0

    def start(self, engine) -> None:
        super().start(engine)
        self.kswapd.start(engine)
        engine.schedule(engine.slice_period, self._on_slice)

    # -- fault side ---------------------------------------------------------

    def on_hint_fault(self, page_id: int, kind: AccessKind, core: int, now: int) -> int:
        self.fault_kind[page_id] = kind
        return self.migrator.on_hint_fault(page_id, now)

    def on_shadow_fault(self, page_id: int, now: int) -> int:
        return self.shadow_mgr.shadow_page_fault(page_id)

    def on_access_complete(self, page_id: int, kind: AccessKind, core: int, now: int) -> None:
        self.migrator.note_access(page_id)

    # -- kpromote actor -------------------------------------------------------

    def _on_slice(self, now: int) -> None:
        self.migrator.begin_round()
        self._started_this_round = 0
        if not self._in_flight:
            self._pump(now)
        self.engine.schedule(now + self.engine.slice_period, self._on_slice)

    def _pump(self, now: int) -> None:
        """Start transactions until one is in flight or the queue/budget runs dry."""
        machine = self.machine
        t = now
        while self._started_this_round < self.budget:
            begin = self.migrator.txn_begin(t)
            if begin is None:
                break
            self._started_this_round += 1
            t += begin.cost
            if begin.action == "defer":
                # fast-tier pressure: the page retries next round once kswapd
                # has demoted; free shadows only when a full slow tier is what
                # blocks that demotion
                if machine.fast_free() == 0 and machine.slow_free() == 0:
                    self.shadow_mgr.reclaim_shadow(1, ReclaimTrigger.ALLOC_FAILURE)
                continue
            if begin.action == "sync":
                t = self._sync_fallback(begin.entry.page_id, t)
                continue
            txn = begin.txn
            done = t + machine.costs.page_copy_cost
            self._in_flight = True
            self.active_txn = txn
            self.engine.schedule(done, lambda at, txn=txn: self._copy_done(txn, at))
            self.busy_cycles += t - now
            return
        self._in_flight = False
        self.busy_cycles += t - now

    def _copy_done(self, txn, now: int) -> None:
        commit, cost = self.migrator.txn_unmap_and_check(txn, now)
        finish = now + cost + self.machine.costs.remap_cost
        self.engine.block_page(txn.page_id, finish)
        self.engine.schedule(finish, lambda at: self._finalize(txn, commit, at))

    def _finalize(self, txn, commit: bool, now: int) -> None:
        self.migrator.txn_finalize(txn, commit, now,
                                   shadow_mgr=self.shadow_mgr if commit else None)
        metrics = self.engine.metrics
        metrics.tpm_committed = self.migrator.committed
        metrics.tpm_aborted = self.migrator.aborted
        if commit:
            kind = self.fault_kind.get(txn.page_id, AccessKind.READ)
            metrics.count_promotion(kind)
        self._in_flight = False
        self.active_txn = None
        self._pump(now)

    def _sync_fallback(self, page_id: int, t: int) -> int:
        """Multi-mapped pages skip the transactional path (one shootdown per
        mapping would be needed twice) and migrate synchronously."""
        dst = self.machine.allocate_frame(Tier.FAST)
        if dst is None:
            self.shadow_mgr.reclaim_shadow(1, ReclaimTrigger.ALLOC_FAILURE)
            dst = self.machine.allocate_frame(Tier.FAST)
        if dst is None:
            return t
        start = t
        cost = sync_migrate(self.machine, page_id, dst)
        self.engine.block_page(page_id, start + cost)
        kind = self.fault_kind.get(page_id, AccessKind.READ)
        self.engine.metrics.count_promotion(kind)
        return t + cost


class TppSyncPolicy(Policy):
    """Fault-time synchronous promotion: the faulting core performs the
    whole unmap-copy-remap, retrying allocation up to ten times with direct
    demotion in between; pages not yet on the active list are re-armed so
    they fault again (the repeated-fault pathology)."""

    name = "tpp"
    needs_arming = True

    def __init__(self, machine: Machine, tracker: Tracker):
        super().__init__(machine, tracker)
        # never registers shadows: demotions always copy
        self.shadow_mgr = ShadowManager(machine, tracker)
        self.kswapd = KswapdActor(self, self.shadow_mgr)
        self.last_attempts = 0
        self.giveups = 0

    def start(self, engine) -> None:
        super().start(engine)
        self.kswapd.start(engine)

    def on_hint_fault(self, page_id: int, kind: AccessKind, core: int, now: int) -> int:
        machine = self.machine
        pte = machine.ptes[page_id]
        if not pte.protected:
            return 0
        pte.protected = False
        cost = machine.costs.minor_fault_cost
        self.tracker.mark_accessed(page_id, requeue=True)

        if self.tracker.lru.list_of(page_id) != "active":
            pte.protected = True   # fault again until the batched activation lands
            return cost

        t = now + cost
        for attempt in range(1, TPP_MAX_MIGRATE_ATTEMPTS + 1):
            self.last_attempts = attempt
            dst = machine.allocate_frame(Tier.FAST)
            if dst is not None:
                start = t
                mig = sync_migrate(machine, page_id, dst)
                self.engine.block_page(page_id, start + mig)
                t += mig
                self.engine.metrics.count_promotion(kind)
                return t - now
            t = self._direct_demote(t)
        self.giveups += 1
        pte.protected = True   # next touch retries the whole round
        return t - now

    def _direct_demote(self, t: int) -> int:
        """Direct reclaim in the faulting context between attempts."""
        victims = self.tracker.kswapd_scan(self.machine.fast_free())
        for page_id in victims:
            result = self.shadow_mgr.demote_page(page_id)
            self.engine.block_page(page_id, t + result.cycles)
            t += result.cycles
            self.engine.metrics.count_demotion(result.mode, result.cycles)
        return t


class SamplingHistogram:
    """Per-page access counts from probabilistic sampling, with periodic
    cooling: every cooling_period samples, all counts halve."""

    def __init__(self, cooling_period: int, sample_prob: float, seed: int):
        if cooling_period <= 0:
            raise ValueError("cooling_period must be positive")
        if not 0.0 <= sample_prob <= 1.0:
            raise ValueError("sample_prob must be in [0, 1]")
        self.cooling_period = cooling_period
        self.sample_prob = sample_prob
        self.counts: dict[int, int] = {}
        self.samples_seen = 0
        self.coolings = 0
        self._rng = np.random.default_rng(seed)

    def record(self, page_id: int) -> None:
        if self.sample_prob < 1.0 and self._rng.random() >= self.sample_prob:
            return
        self.counts[page_id] = self.counts.get(page_id, 0) + 1
        self.samples_seen += 1
        if self.samples_seen % self.cooling_period == 0:
            self.cool()

    def cool(self) -> None:
        self.coolings += 1
        for page_id in list(self.counts):
            halved = self.counts[page_id] // 2
            if halved:
                self.counts[page_id] = halved
            else:
                del self.counts[page_id]

    def count(self, page_id: int) -> int:
        return self.counts.get(page_id, 0)


class SamplingPolicy(Policy):
    """Counter-sampling tier management: no hint faults; a background
    migrator promotes the hottest sampled slow pages and demotes the
    coldest fast pages under watermark pressure."""

    name = "sampling"
    needs_arming = False

    def __init__(self, machine: Machine, tracker: Tracker, *,
                 cooling_period: int = 2_000_000, sample_prob: float = 0.01,
                 seed: int = 0, batch: int = SAMPLING_BATCH):
        super().__init__(machine, tracker)
        self.histogram = SamplingHistogram(cooling_period, sample_prob, seed)
        self.shadow_mgr = ShadowManager(machine, tracker)   # copy demotions only
        self.batch = batch
        self.fast_pages: set[int] = set()
        self.slow_pages: set[int] = set()
        # never-sampled fast pages in placement order: cheap cold victims
        self._cold_fast: dict[int, None] = {}
        self.last_kind: dict[int, AccessKind] = {}
        self.busy_cycles = 0

    def start(self, engine) -> None:
        super().start(engine)
        for page_id, pte in self.machine.ptes.items():
            if pte.tier is Tier.FAST:
                self.fast_pages.add(page_id)
                self._cold_fast[page_id] = None
            else:
                self.slow_pages.add(page_id)
        engine.schedule(engine.slice_period, self._tick)

    def on_access_complete(self, page_id: int, kind: AccessKind, core: int, now: int) -> None:
        self.histogram.record(page_id)
        self.last_kind[page_id] = kind

    def _tick(self, now: int) -> None:
        t = now
        demote_budget = self.batch
        watermark = self.tracker.thresholds.low_water_mark
        # restore headroom under watermark pressure
        deficit = watermark - self.machine.fast_free()
        if deficit > 0:
            take = min(demote_budget, deficit, self.machine.slow_free())
            for page_id in self._pick_victims(take):
                t = self._demote(page_id, t)
                demote_budget -= 1
        t = self._promote_hottest(t, demote_budget)
        self.busy_cycles += t - now
        self.engine.schedule(now + self.engine.slice_period, self._tick)

    def _pick_victims(self, count: int, hotter_than: int | None = None) -> list[int]:
        """Coldest fast pages; never-sampled ones first (cheap, count 0),
        else a full scan by count.  hotter_than guards displacement: only
        yield victims strictly colder than the incoming page."""
        victims: list[int] = []
        stale: list[int] = []
        for page_id in self._cold_fast:
            if len(victims) >= count:
                break
            if page_id not in self.fast_pages or self.histogram.count(page_id) > 0:
                stale.append(page_id)
                continue
            victims.append(page_id)
        for page_id in stale + victims:
            self._cold_fast.pop(page_id, None)
        if len(victims) < count:
            rest = heapq.nsmallest(
                count - len(victims),
                (p for p in self.fast_pages if p not in victims),
                key=lambda p: (self.histogram.count(p), p))
            for page_id in rest:
                if hotter_than is not None and \
                        self.histogram.count(page_id) >= hotter_than:
                    continue
                victims.append(page_id)
        return victims

    def _demote(self, page_id: int, t: int) -> int:
        result = self.shadow_mgr.demote_page(page_id, rearm=False)
        self.engine.block_page(page_id, t + result.cycles)
        self.engine.metrics.count_demotion(result.mode, result.cycles)
        self.fast_pages.discard(page_id)
        self.slow_pages.add(page_id)
        return t + result.cycles

    def _promote_hottest(self, t: int, demote_budget: int) -> int:
        """Move the hottest sampled slow pages up, displacing strictly colder
        fast pages when no free room remains above the watermark."""
        machine = self.machine
        watermark = self.tracker.thresholds.low_water_mark
        candidates = [p for p in self.histogram.counts if p in self.slow_pages]
        if not candidates:
            return t
        chosen = heapq.nlargest(self.batch, candidates,
                                key=lambda p: (self.histogram.count(p), -p))
        for page_id in chosen:
            room = machine.fast_free() - watermark
            if room <= 0:
                if demote_budget <= 0 or machine.slow_free() == 0:
                    break
                victims = self._pick_victims(1, hotter_than=self.histogram.count(page_id))
                if not victims:
                    break   # nothing colder resident; later candidates are colder still
                t = self._demote(victims[0], t)
                demote_budget -= 1
            dst = machine.allocate_frame(Tier.FAST)
            if dst is None:
                break
            start = t
            t += sync_migrate(machine, page_id, dst)
            self.engine.block_page(page_id, t)
            kind = self.last_kind.get(page_id, AccessKind.READ)
            self.engine.metrics.count_promotion(kind)
            self.slow_pages.discard(page_id)
            self.fast_pages.add(page_id)
        return t

    def on_hint_fault(self, page_id: int, kind: AccessKind, core: int, now: int) -> int:
        # sampling runs with arming disabled; tolerate a pre-armed scenario
        self.machine.ptes[page_id].protected = False
        return self.machine.costs.minor_fault_cost


class NoMigrationPolicy(Policy):
    """Serve every access in place; the only cost is one fault per
    initially protected page."""

    name = "none"
    needs_arming = True

    def on_hint_fault(self, page_id: int, kind: AccessKind, core: int, now: int) -> int:
        pte = self.machine.ptes[page_id]
        if not pte.protected:
            return 0
        pte.protected = False
        return self.machine.costs.minor_fault_cost


def build_policy(kind: str, machine: Machine, tracker: Tracker, *,
                 seed: int = 0, cooling_period: int = 2_000_000,
                 sample_prob: float = 0.01,
                 kpromote_budget: int = KPROMOTE_BUDGET) -> Policy:
    if kind == "nomad":
        return NomadPolicy(machine, tracker, kpromote_budget=kpromote_budget)
    if kind == "tpp":
        return TppSyncPolicy(machine, tracker)
    if kind == "sampling":
        return SamplingPolicy(machine, tracker, cooling_period=cooling_period,
                              sample_prob=sample_prob, seed=seed)
    if kind == "none":
        return NoMigrationPolicy(machine, tracker)
    raise ValueError(f"unknown policy kind {kind!r}")
