"""Physical substrate for a two-tier memory system.

Models two memory tiers with frame pools and fixed access latencies, a
page table with per-page permission/tracking bits, a per-core TLB
directory, and a cycle cost model for kernel operations (faults, IPIs,
copies, remaps).

Time does not live here: every operation returns its cost in cycles and
the caller (the simulation engine) owns the clock.  Page content is a
version counter, not bytes -- enough to prove that no write is ever lost
across migrations and far cheaper than byte buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum


PAGE_SIZE = 4096          # bytes; base pages only, huge pages out of scope
CACHE_LINE = 64           # bytes per line access


class Tier(Enum):
    FAST = "fast"
    SLOW = "slow"


class AccessKind(Enum):
    READ = "read"
    WRITE = "write"


class FaultKind(Enum):
    HINT = "hint"               # protection-armed page touched
    SHADOW_WRITE = "shadow_write"  # write hit a read-only shadowed master
    NOT_PRESENT = "not_present"    # page is mid-migration (unmapped)
    PERM_DENIED = "perm_denied"    # write to a genuinely read-only page


class SimulationError(Exception):
    """Internal invariant breach: indicates a simulator bug, never workload state."""


class NotMappedError(SimulationError):
    pass


class FrameUnallocatedError(SimulationError):
    pass


class OutOfMemoryError(Exception):
    """Reclamation could not satisfy an allocation; surfaced, never dropped."""


@dataclass(frozen=True)
class TierSpec:
    """Capacity and timing of one memory tier."""
    tier: Tier
    capacity_pages: int
    read_latency: int          # cycles per line access
    write_latency: int
    copy_bandwidth: float      # bytes per cycle, single-threaded page copy

    def __post_init__(self):
        if self.capacity_pages <= 0:
            raise ValueError("capacity_pages must be positive")
        if self.read_latency <= 0 or self.write_latency <= 0:
            raise ValueError("latencies must be positive")
        if self.copy_bandwidth <= 0:
            raise ValueError("copy_bandwidth must be positive")

    def latency(self, kind: AccessKind) -> int:
        return self.read_latency if kind is AccessKind.READ else self.write_latency


@dataclass(frozen=True)
class CostModel:
    """Cycle costs of kernel-side operations.

    The device tables give tier latencies but not kernel operation costs,
    so these are explicit knobs.  Acceptance logic relies on orderings
    (copy > remap), never on the absolute defaults.
    """
    minor_fault_cost: int = 2000
    tlb_ipi_cost_per_core: int = 500
    page_copy_cost: int = 1911     # PAGE_SIZE / slow-tier copy bandwidth
    remap_cost: int = 300
    queue_op_cost: int = 50

    def __post_init__(self):
        for name in ("minor_fault_cost", "tlb_ipi_cost_per_core",
                     "page_copy_cost", "remap_cost", "queue_op_cost"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        # Remap-only demotion must stay cheaper than a copy or shadowing
        # has no reason to exist.
        if self.page_copy_cost <= self.remap_cost:
            raise ValueError("page_copy_cost must exceed remap_cost")


@dataclass
class PageTableEntry:
    """Per-page mapping state (one address space, map_count models sharing)."""
    page_id: int
    mapped_frame: int | None = None
    tier: Tier = Tier.SLOW
    present: bool = False
    protected: bool = False    # hint-fault armed ("inaccessible" mode)
    accessed: bool = False
    dirty: bool = False
    writable: bool = True      # hardware r/w permission
    shadow_rw: bool = False    # preserved original permission while shadowed
    map_count: int = 1

    def snapshot(self) -> "PageTableEntry":
        return replace(self)


@dataclass
class PageInfo:
    """Kernel-side per-page bookkeeping (struct-page analogue)."""
    page_id: int
    content_version: int = 0   # increments by exactly 1 per committed write
    pg_referenced: bool = False
    pg_active: bool = False
    shadow: bool = False       # a shadow copy exists for this page's frame
    lru_list: str = "none"     # "active" | "inactive" | "none"
    pinned: bool = False


@dataclass
class AccessResult:
    latency: int
    fault: FaultKind | None = None


# Platform profiles: per-tier read latencies measured on real testbeds,
# single-thread slow-tier copy bandwidth converted to bytes/cycle at the
# platform's clock.  Write latency is not reported per tier; we reuse the
# read latency (configurable).
@dataclass(frozen=True)
class PlatformProfile:
    name: str
    fast_read_latency: int
    slow_read_latency: int
    copy_bandwidth: float      # bytes/cycle for page copies (slow tier, 1 thread)
    cores: int = 4

    def tier_specs(self, fast_pages: int, slow_pages: int) -> tuple[TierSpec, TierSpec]:
        fast = TierSpec(Tier.FAST, fast_pages, self.fast_read_latency,
                        self.fast_read_latency, self.copy_bandwidth)
        slow = TierSpec(Tier.SLOW, slow_pages, self.slow_read_latency,
                        self.slow_read_latency, self.copy_bandwidth)
        return fast, slow

    def cost_model(self, **overrides) -> CostModel:
        page_copy = int(round(PAGE_SIZE / self.copy_bandwidth))
        kwargs = dict(page_copy_cost=page_copy)
        kwargs.update(overrides)
        return CostModel(**kwargs)


PLATFORM_PROFILES = {
    # 4.5 GB/s at 2.1 GHz -> 2.14 B/cycle, etc.
    "platform_a": PlatformProfile("platform_a", 316, 854, 4.5e9 / 2.1e9),
    "platform_b": PlatformProfile("platform_b", 226, 737, 4.45e9 / 3.5e9),
    "platform_c": PlatformProfile("platform_c", 249, 1077, 4.0e9 / 3.9e9),
    "platform_d": PlatformProfile("platform_d", 391, 712, 20.25e9 / 3.7e9),
}


class FramePool:
    """Per-tier frame allocator with conservation accounting."""

    def __init__(self, spec: TierSpec, base: int):
        self.spec = spec
        self.base = base
        self.capacity = spec.capacity_pages
        self._free: list[int] = list(range(base + self.capacity - 1, base - 1, -1))
        self._allocated: set[int] = set()

    @property
    def free_count(self) -> int:
        return len(self._free)

    @property
    def allocated_count(self) -> int:
        return len(self._allocated)

    def allocate(self) -> int | None:
        """Returns a frame id, or None under pressure (tier exhausted)."""
        if not self._free:
            return None
        frame = self._free.pop()
        self._allocated.add(frame)
        return frame

    def free(self, frame: int) -> None:
        if frame not in self._allocated:
            raise FrameUnallocatedError(f"frame {frame} not allocated")
        self._allocated.remove(frame)
        self._free.append(frame)

    def owns(self, frame: int) -> bool:
        return self.base <= frame < self.base + self.capacity

    def audit(self) -> None:
        if self.free_count + self.allocated_count != self.capacity:
            raise SimulationError(
                f"frame conservation broken on {self.spec.tier}: "
                f"{self.free_count} free + {self.allocated_count} allocated "
                f"!= {self.capacity}")


class Machine:
    """Two tiers, page table, TLB directory, and frame contents.

    Not thread-safe; instantiate one Machine per simulation.  All methods
    return cycle costs and mutate state immediately -- the engine decides
    when those cycles elapse.
    """

    def __init__(self, fast: TierSpec, slow: TierSpec, costs: CostModel,
                 cores: int = 4):
        if fast.read_latency >= slow.read_latency:
            raise ValueError("fast tier must be faster than slow tier")
        self.costs = costs
        self.cores = cores
        self.pools = {
            Tier.FAST: FramePool(fast, base=0),
            Tier.SLOW: FramePool(slow, base=fast.capacity_pages),
        }
        self.specs = {Tier.FAST: fast, Tier.SLOW: slow}
        self.ptes: dict[int, PageTableEntry] = {}
        self.infos: dict[int, PageInfo] = {}
        # frame id -> (page_id, content version at last store/copy)
        self.frame_contents: dict[int, tuple[int, int]] = {}
        # reverse TLB directory: page -> set of cores holding its translation
        self._tlb: dict[int, set[int]] = {}

    # -- page lifecycle ----------------------------------------------------

    def create_page(self, page_id: int, tier: Tier, writable: bool = True,
                    protected: bool = False) -> PageTableEntry:
        if page_id in self.ptes:
            raise SimulationError(f"page {page_id} already exists")
        frame = self.pools[tier].allocate()
        if frame is None:
            raise OutOfMemoryError(f"no free frames in {tier.value} for initial placement")
        pte = PageTableEntry(page_id=page_id, mapped_frame=frame, tier=tier,
                             present=True, protected=protected, writable=writable)
        info = PageInfo(page_id=page_id)
        self.ptes[page_id] = pte
        self.infos[page_id] = info
        self.frame_contents[frame] = (page_id, 0)
        return pte

    def reserve_frames(self, tier: Tier, count: int) -> list[int]:
        """Pin frames with no page behind them (kernel-reserve emulation)."""
        frames = []
        for _ in range(count):
            frame = self.pools[tier].allocate()
            if frame is None:
                raise OutOfMemoryError(f"cannot reserve {count} frames in {tier.value}")
            frames.append(frame)
        return frames

    # -- TLB directory -----------------------------------------------------

    def tlb_record(self, page_id: int, core: int) -> None:
        self._tlb.setdefault(page_id, set()).add(core)

    def tlb_holders(self, page_id: int) -> set[int]:
        return self._tlb.get(page_id, set())

    def tlb_shootdown(self, page_id: int) -> int:
        """Invalidate every cached translation of the page; cost is one IPI per core."""
        holders = self._tlb.pop(page_id, None)
        if not holders:
            return 0
        return self.costs.tlb_ipi_cost_per_core * len(holders)

    # -- core operations (spec contracts) -----------------------------------

    def access(self, page_id: int, kind: AccessKind, core: int,
               count_touch: bool = True,
               bypass_protection: bool = False) -> AccessResult:
        """One access attempt.  Faults return without completing; the caller
        handles the fault and re-issues.

        count_touch=False suppresses setting the PTE accessed bit: used when
        a fault handler already accounted this access as a tracking touch,
        so the completion does not double-count as a *new* reference.
        bypass_protection=True completes an access whose hint fault was just
        handled even if the handler re-armed the page (arming traps the
        *next* access, not this one).
        """
        pte = self.ptes.get(page_id)
        if pte is None:
            raise NotMappedError(f"unknown page {page_id}")
        if pte.protected and not bypass_protection:
            return AccessResult(latency=0, fault=FaultKind.HINT)
        if not pte.present:
            return AccessResult(latency=0, fault=FaultKind.NOT_PRESENT)
        if kind is AccessKind.WRITE and not pte.writable:
            info = self.infos[page_id]
            if info.shadow:
                return AccessResult(latency=0, fault=FaultKind.SHADOW_WRITE)
            return AccessResult(latency=0, fault=FaultKind.PERM_DENIED)

        if count_touch:
            pte.accessed = True
        if kind is AccessKind.WRITE:
            pte.dirty = True
            info = self.infos[page_id]
            info.content_version += 1
            self.frame_contents[pte.mapped_frame] = (page_id, info.content_version)
        self.tlb_record(page_id, core)
        return AccessResult(latency=self.specs[pte.tier].latency(kind))

    def read_observes(self, page_id: int) -> int:
        """Content version a read of the page sees right now (oracle hook)."""
        pte = self.ptes[page_id]
        if not pte.present:
            raise NotMappedError(f"page {page_id} not present")
        owner, version = self.frame_contents[pte.mapped_frame]
        if owner != page_id:
            raise SimulationError(
                f"frame {pte.mapped_frame} holds page {owner}, expected {page_id}")
        return version

    def clear_dirty_and_flush(self, page_id: int) -> int:
        """Clear the PTE dirty bit and shoot down all cores that ever
        accessed the page, so subsequent writes are recorded on the PTE."""
        pte = self.ptes.get(page_id)
        if pte is None or not pte.present:
            raise NotMappedError(f"page {page_id} not present")
        pte.dirty = False
        return self.tlb_shootdown(page_id)

    def atomic_unmap(self, page_id: int) -> tuple[PageTableEntry, int]:
        """Atomically load-and-clear the PTE.  The page becomes inaccessible
        until remap/restore; the returned snapshot captures the dirty bit as
        of the atomic load."""
        pte = self.ptes.get(page_id)
        if pte is None or not pte.present:
            raise NotMappedError(f"page {page_id} not present")
        old = pte.snapshot()
        pte.present = False
        pte.mapped_frame = None
        cost = self.tlb_shootdown(page_id)
        return old, cost

    def remap(self, page_id: int, frame: int, tier: Tier) -> int:
        """Point the (currently unmapped) PTE at a new frame."""
        pte = self.ptes[page_id]
        if pte.present:
            raise SimulationError(f"page {page_id} still mapped")
        pool = self.pools[tier]
        if not pool.owns(frame) or frame not in pool._allocated:
            raise FrameUnallocatedError(f"frame {frame} not allocated in {tier.value}")
        pte.mapped_frame = frame
        pte.tier = tier
        pte.present = True
        pte.dirty = False
        pte.accessed = False
        return self.costs.remap_cost

    def restore(self, page_id: int, old_pte: PageTableEntry) -> int:
        """Reinstate the PTE bit-identically from an atomic_unmap snapshot."""
        pte = self.ptes[page_id]
        if pte.present:
            raise SimulationError(f"page {page_id} still mapped")
        self.ptes[page_id] = old_pte.snapshot()
        return self.costs.remap_cost

    def allocate_frame(self, tier: Tier) -> int | None:
        """Returns a frame or None on pressure; pressure handling (shadow
        reclaim, kswapd) is the caller's job."""
        return self.pools[tier].allocate()

    def free_frame(self, frame: int) -> None:
        tier = Tier.FAST if self.pools[Tier.FAST].owns(frame) else Tier.SLOW
        self.pools[tier].free(frame)
        self.frame_contents.pop(frame, None)

    def copy_frame(self, src: int, dst: int) -> None:
        """Propagate content (page id + version) from src to dst frame."""
        if src not in self.frame_contents:
            raise SimulationError(f"copy from empty frame {src}")
        self.frame_contents[dst] = self.frame_contents[src]

    # -- audits --------------------------------------------------------------

    def audit_frames(self) -> None:
        for pool in self.pools.values():
            pool.audit()

    def fast_free(self) -> int:
        return self.pools[Tier.FAST].free_count

    def slow_free(self) -> int:
        return self.pools[Tier.SLOW].free_count
