"""Linux-style lazy access tracking: active/inactive LRU lists, the
two-touch reference flags, pagevec batching, and the kswapd demotion scan.

List order is insertion order updated on list transitions only -- there is
no per-access reordering, matching the kernel's lazy scanning.  Flags are
harvested from the PTE accessed bit during scans, never on the access path.
"""

from __future__ import annotations

from dataclasses import dataclass

from .mem_model import Machine, Tier

PAGEVEC_CAPACITY = 15


@dataclass(frozen=True)
class PressureThresholds:
    low_water_mark: int       # free fast pages below which kswapd demotes
    demotion_batch: int = 32

    @staticmethod
    def for_capacity(fast_pages: int, demotion_batch: int = 32) -> "PressureThresholds":
        # 2% of fast capacity, at least one page
        return PressureThresholds(max(1, fast_pages // 50), demotion_batch)


class _OrderedSet:
    """Insertion-ordered set; oldest first on iteration."""

    def __init__(self):
        self._d: dict[int, None] = {}

    def add(self, x: int) -> None:
        self._d[x] = None

    def discard(self, x: int) -> None:
        self._d.pop(x, None)

    def __contains__(self, x: int) -> bool:
        return x in self._d

    def __len__(self) -> int:
        return len(self._d)

    def __iter__(self):
        return iter(self._d)

    def oldest(self) -> list[int]:
        return list(self._d)


class LruLists:
    """Active/inactive lists plus the bounded activation buffer.

    The buffer (pagevec) holds activation requests and drains only when
    full or explicitly flushed; repeated requests for the same page are
    allowed and collapse at drain time.
    """

    def __init__(self):
        self.active = _OrderedSet()
        self.inactive = _OrderedSet()
        self.pagevec: list[int] = []

    def insert_inactive(self, page_id: int) -> None:
        self.active.discard(page_id)
        self.inactive.add(page_id)

    def remove(self, page_id: int) -> None:
        self.active.discard(page_id)
        self.inactive.discard(page_id)

    def list_of(self, page_id: int) -> str:
        if page_id in self.active:
            return "active"
        if page_id in self.inactive:
            return "inactive"
        return "none"


class Tracker:
    """Reference-flag bookkeeping shared by every policy."""

    def __init__(self, machine: Machine, thresholds: PressureThresholds):
        self.machine = machine
        self.thresholds = thresholds
        self.lru = LruLists()
        self.pagevec_drains = 0

    def track(self, page_id: int) -> None:
        """New pages start on the inactive list."""
        self.lru.insert_inactive(page_id)
        self.machine.infos[page_id].lru_list = "inactive"

    def untrack(self, page_id: int) -> None:
        self.lru.remove(page_id)
        self.machine.infos[page_id].lru_list = "none"

    # -- reference flags ------------------------------------------------------

    def mark_accessed(self, page_id: int, requeue: bool = False) -> None:
        """One tracking touch.  First touch sets the referenced flag; the
        second sets the active flag and buffers an activation request.
        Later touches add nothing unless the caller explicitly re-requests
        (fault paths do, producing the duplicate-request pathology).
        """
        info = self.machine.infos[page_id]
        if not info.pg_referenced:
            info.pg_referenced = True
            return
        newly_active = not info.pg_active
        info.pg_active = True
        if newly_active or requeue:
            self.request_activation(page_id)

    def request_activation(self, page_id: int) -> None:
        """Buffer a move to the active list; drains in batches of 15."""
        self.pagevec.append(page_id)
        if len(self.pagevec) >= PAGEVEC_CAPACITY:
            self.drain_pagevec()

    @property
    def pagevec(self) -> list[int]:
        return self.lru.pagevec

    def drain_pagevec(self) -> int:
        """Apply all buffered requests; returns distinct pages moved."""
        moved = 0
        seen: set[int] = set()
        for page_id in self.lru.pagevec:
            if page_id in seen:
                continue
            seen.add(page_id)
            info = self.machine.infos.get(page_id)
            if info is None or not info.pg_referenced:
                continue
            if page_id in self.lru.inactive:
                info.pg_active = True
                self.lru.inactive.discard(page_id)
                self.lru.active.add(page_id)
                info.lru_list = "active"
                moved += 1
        self.lru.pagevec.clear()
        if moved:
            self.pagevec_drains += 1
        return moved

    # -- kswapd scan ------------------------------------------------------------

    def kswapd_scan(self, fast_free: int) -> list[int]:
        """Lazy demotion scan.  Below the watermark, walk the inactive list
        oldest-first and pick up to demotion_batch cold fast-tier pages.

        During the walk the PTE accessed bit is folded into the reference
        flags (the kernel's deferred flag update): a fresh access rescues a
        page for one pass, a second promotes it to the active list.  The
        active and inactive lists are kept balanced so pages spend a long
        window on the inactive list, letting accessed bits accumulate and
        separate the genuinely hot from the marginal before eviction.
        """
        if fast_free >= self.thresholds.low_water_mark:
            return []
        self.drain_pagevec()
        self._balance_lists()
        victims = self._scan_inactive()
        if len(victims) < self.thresholds.demotion_batch:
            deficit = self.thresholds.demotion_batch - len(victims)
            if self._deactivate_oldest(deficit * 2):
                victims.extend(self._scan_inactive(
                    limit=self.thresholds.demotion_batch - len(victims),
                    exclude=set(victims)))
        return victims

    def _balance_lists(self) -> None:
        """Deactivate old active pages until the inactive list holds about
        half of the resident fast pages (bounded work per pass)."""
        active_fast = 0
        inactive_fast = 0
        machine = self.machine
        for page_id in self.lru.active:
            pte = machine.ptes[page_id]
            if pte.tier is Tier.FAST and pte.present:
                active_fast += 1
        for page_id in self.lru.inactive:
            pte = machine.ptes[page_id]
            if pte.tier is Tier.FAST and pte.present:
                inactive_fast += 1
        deficit = (active_fast + inactive_fast) // 2 - inactive_fast
        if deficit > 0:
            self._deactivate_oldest(min(deficit, 2 * self.thresholds.demotion_batch))

    def _scan_inactive(self, limit: int | None = None,
                       exclude: set[int] | None = None) -> list[int]:
        limit = self.thresholds.demotion_batch if limit is None else limit
        exclude = exclude or set()
        victims: list[int] = []
        for page_id in self.lru.inactive.oldest():
            if len(victims) >= limit:
                break
            if page_id in exclude:
                continue
            info = self.machine.infos[page_id]
            pte = self.machine.ptes[page_id]
            if info.pinned or pte.tier is not Tier.FAST or not pte.present:
                continue
            if pte.accessed:
                # harvest: the page was touched since the last look
                pte.accessed = False
                self.mark_accessed(page_id)
                if info.pg_active:
                    self.lru.inactive.discard(page_id)
                    self.lru.active.add(page_id)
                    info.lru_list = "active"
                continue
            if info.pg_active:
                self.lru.inactive.discard(page_id)
                self.lru.active.add(page_id)
                info.lru_list = "active"
                continue
            if info.pg_referenced:
                info.pg_referenced = False   # second chance, demotable next pass
                continue
            victims.append(page_id)
        return victims

    def _deactivate_oldest(self, count: int) -> int:
        """Move cold fast pages from the active list back to inactive."""
        moved = 0
        for page_id in self.lru.active.oldest():
            if moved >= count:
                break
            pte = self.machine.ptes[page_id]
            info = self.machine.infos[page_id]
            if info.pinned or pte.tier is not Tier.FAST or not pte.present:
                continue
            if pte.accessed:
                pte.accessed = False   # recently used: spare it this round
                continue
            info.pg_active = False
            info.pg_referenced = False
            self.lru.active.discard(page_id)
            self.lru.inactive.add(page_id)
            info.lru_list = "inactive"
            moved += 1
        return moved

    def reset_on_demotion(self, page_id: int) -> None:
        """Demoted pages drop both flags and rejoin the inactive tail."""
        info = self.machine.infos[page_id]
        info.pg_referenced = False
        info.pg_active = False
        self.lru.remove(page_id)
        self.lru.inactive.add(page_id)
        info.lru_list = "inactive"
