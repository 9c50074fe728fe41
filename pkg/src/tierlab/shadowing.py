"""Non-exclusive tiering support: shadow copies of promoted pages.

A page promoted from the slow tier keeps its old slow frame as a shadow.
The master (fast) copy is forced read-only with its real permission stashed
in a software PTE bit; the first write faults, restores the permission and
discards the shadow.  While the shadow exists, demotion degenerates to a
page-table remap with zero copy traffic.

Shadow frames occupy real slow-tier capacity, so two reclamation paths
exist: kswapd frees shadows before considering ordinary demotion, and an
allocation failure frees ten times the requested pages (or everything).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .access_tracking import Tracker
from .mem_model import (
    AccessKind,
    Machine,
    OutOfMemoryError,
    SimulationError,
    Tier,
)


class DemotionMode(Enum):
    REMAP = "remap"
    COPY = "copy"


class ReclaimTrigger(Enum):
    KSWAPD = "kswapd"
    ALLOC_FAILURE = "alloc_failure"


ALLOC_FAILURE_MULTIPLIER = 10


@dataclass
class DemotionResult:
    mode: DemotionMode
    cycles: int


class ShadowIndex:
    """Associative map: fast frame id -> (slow shadow frame id, page id).

    One-way by construction: only pages promoted from the slow tier get
    entries.  Insertion order doubles as reclamation order (FIFO).
    """

    def __init__(self):
        self._entries: dict[int, tuple[int, int]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, fast_frame: int) -> bool:
        return fast_frame in self._entries

    def insert(self, fast_frame: int, slow_frame: int, page_id: int) -> None:
        if fast_frame in self._entries:
            raise SimulationError(f"duplicate shadow entry for frame {fast_frame}")
        self._entries[fast_frame] = (slow_frame, page_id)

    def pop(self, fast_frame: int) -> tuple[int, int]:
        if fast_frame not in self._entries:
            raise SimulationError(f"no shadow entry for frame {fast_frame}")
        return self._entries.pop(fast_frame)

    def oldest(self, count: int) -> list[tuple[int, int, int]]:
        out = []
        for fast_frame, (slow_frame, page_id) in self._entries.items():
            if len(out) >= count:
                break
            out.append((fast_frame, slow_frame, page_id))
        return out


class ShadowManager:
    """Registration, the shadow write fault, demotion, and reclamation."""

    def __init__(self, machine: Machine, tracker: Tracker):
        self.machine = machine
        self.tracker = tracker
        self.index = ShadowIndex()
        self.reclaimed_total = 0

    @property
    def total_shadow_pages(self) -> int:
        return len(self.index)

    # -- registration -----------------------------------------------------

    def register_shadow(self, page_id: int, fast_frame: int, slow_frame: int) -> None:
        """Record the old slow frame as the shadow of a just-committed
        promotion and force the master read-only."""
        pte = self.machine.ptes[page_id]
        info = self.machine.infos[page_id]
        if self.machine.frame_contents.get(slow_frame) != self.machine.frame_contents.get(fast_frame):
            raise SimulationError(f"shadow of page {page_id} diverges at registration")
        self.index.insert(fast_frame, slow_frame, page_id)
        info.shadow = True
        pte.shadow_rw = pte.writable
        pte.writable = False

    # -- write fault --------------------------------------------------------

    def shadow_page_fault(self, page_id: int) -> int:
        """Restore the master's real write permission and discard its shadow;
        the blocked write proceeds after this returns."""
        pte = self.machine.ptes[page_id]
        info = self.machine.infos[page_id]
        if not info.shadow:
            raise SimulationError(f"shadow fault on unshadowed page {page_id}")
        slow_frame, owner = self.index.pop(pte.mapped_frame)
        if owner != page_id:
            raise SimulationError(f"shadow entry for frame {pte.mapped_frame} "
                                  f"names page {owner}, expected {page_id}")
        pte.writable = pte.shadow_rw
        info.shadow = False
        self.machine.free_frame(slow_frame)
        return self.machine.costs.minor_fault_cost

    # -- demotion -------------------------------------------------------------

    def demote_page(self, page_id: int, rearm: bool = True) -> DemotionResult:
        """Demote a fast-tier page: remap onto its shadow when one exists
        (clean by construction), full copy otherwise."""
        machine = self.machine
        pte = machine.ptes[page_id]
        info = machine.infos[page_id]
        if pte.tier is not Tier.FAST or not pte.present:
            raise SimulationError(f"demotion of non-resident page {page_id}")

        if info.shadow:
            fast_frame = pte.mapped_frame
            slow_frame, owner = self.index.pop(fast_frame)
            if owner != page_id:
                raise SimulationError("shadow index out of sync")
            # discard-on-write guarantees the copies still agree
            if machine.frame_contents[slow_frame] != machine.frame_contents[fast_frame]:
                raise SimulationError(f"stale shadow survived for page {page_id}")
            old, cycles = machine.atomic_unmap(page_id)
            machine.free_frame(fast_frame)
            cycles += machine.remap(page_id, slow_frame, Tier.SLOW)
            pte = machine.ptes[page_id]
            pte.writable = old.shadow_rw
            pte.shadow_rw = False
            info.shadow = False
            mode = DemotionMode.REMAP
        else:
            slow_frame = self._allocate_slow_or_reclaim()
            old, cycles = machine.atomic_unmap(page_id)
            machine.copy_frame(old.mapped_frame, slow_frame)
            machine.free_frame(old.mapped_frame)
            cycles += machine.costs.page_copy_cost
            cycles += machine.remap(page_id, slow_frame, Tier.SLOW)
            mode = DemotionMode.COPY

        if rearm:
            machine.ptes[page_id].protected = True
        self.tracker.reset_on_demotion(page_id)
        return DemotionResult(mode, cycles)

    def _allocate_slow_or_reclaim(self) -> int:
        frame = self.machine.allocate_frame(Tier.SLOW)
        if frame is not None:
            return frame
        self.reclaim_shadow(1, ReclaimTrigger.ALLOC_FAILURE)
        frame = self.machine.allocate_frame(Tier.SLOW)
        if frame is None:
            raise OutOfMemoryError("slow tier exhausted after shadow reclamation")
        return frame

    # -- reclamation ---------------------------------------------------------

    def reclaim_shadow(self, requested: int, trigger: ReclaimTrigger) -> int:
        """Free shadow frames, oldest registration first.

        An allocation failure frees ten times the requested pages or every
        shadow, whichever is smaller; the kswapd path frees exactly what the
        caller asks for.  Masters of freed shadows get their original write
        permission back.
        """
        if trigger is ReclaimTrigger.ALLOC_FAILURE:
            target = min(ALLOC_FAILURE_MULTIPLIER * requested, len(self.index))
        else:
            target = min(requested, len(self.index))
        freed = 0
        for fast_frame, slow_frame, page_id in self.index.oldest(target):
            self.index.pop(fast_frame)
            self.machine.free_frame(slow_frame)
            pte = self.machine.ptes[page_id]
            info = self.machine.infos[page_id]
            pte.writable = pte.shadow_rw
            pte.shadow_rw = False
            info.shadow = False
            freed += 1
        self.reclaimed_total += freed
        return freed
