"""Transactional page migration: copy-while-mapped promotion.

A migration transaction clears the page's dirty bit, shoots down stale
TLB entries so later writes hit the PTE, copies the page to the fast tier
while the application keeps accessing the slow copy, then atomically
unmaps and checks the dirty bit: clean pages commit (remap to fast, old
frame kept as shadow), dirtied pages abort (PTE restored bit-identically,
fast frame returned).  The page is inaccessible only between the atomic
unmap and the remap/restore.

Promotion feeds through two queues: a candidate queue of pages that
faulted once but are not yet proven hot, and a pending queue of pages
whose tracking bits qualify them for migration by the background promoter.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

from .access_tracking import Tracker
from .mem_model import AccessKind, Machine, SimulationError, Tier

BACKOFF_CAP_ROUNDS = 8


class TxnState(Enum):
    PENDING = "pending"
    DIRTY_CLEARED = "dirty_cleared"
    COPYING = "copying"
    CHECKING = "checking"
    COMMITTED = "committed"
    ABORTED = "aborted"


_ALLOWED = {
    TxnState.PENDING: {TxnState.DIRTY_CLEARED},
    TxnState.DIRTY_CLEARED: {TxnState.COPYING},
    TxnState.COPYING: {TxnState.CHECKING},
    TxnState.CHECKING: {TxnState.COMMITTED, TxnState.ABORTED},
}


@dataclass
class MigrationTransaction:
    page_id: int
    src_frame: int
    state: TxnState = TxnState.PENDING
    dst_frame: int | None = None
    old_pte: object = None
    start_cycle: int = 0
    copy_done_cycle: int = 0
    unmap_cycle: int = 0
    finish_cycle: int = 0
    entry: "_PendingEntry | None" = None

    def advance(self, new_state: TxnState) -> None:
        if new_state not in _ALLOWED.get(self.state, set()):
            raise SimulationError(
                f"illegal transition {self.state.value} -> {new_state.value} "
                f"for page {self.page_id}")
        self.state = new_state


@dataclass
class _PendingEntry:
    page_id: int
    eligible_round: int
    aborts: int = 0


class PromotionQueues:
    """Candidate queue (faulted, not yet hot) and migration-pending queue."""

    def __init__(self):
        self.candidates: dict[int, None] = {}      # ordered set
        self.pending: deque[_PendingEntry] = deque()
        self._pending_pages: set[int] = set()

    def in_candidates(self, page_id: int) -> bool:
        return page_id in self.candidates

    def in_pending(self, page_id: int) -> bool:
        return page_id in self._pending_pages

    def add_candidate(self, page_id: int) -> None:
        self.candidates[page_id] = None

    def promote_to_pending(self, page_id: int, round_no: int) -> None:
        if page_id in self._pending_pages:
            raise SimulationError(f"page {page_id} queued for migration twice")
        self.candidates.pop(page_id, None)
        self.pending.append(_PendingEntry(page_id, round_no))
        self._pending_pages.add(page_id)

    def requeue(self, entry: _PendingEntry) -> None:
        if entry.page_id in self._pending_pages:
            raise SimulationError(f"page {entry.page_id} queued for migration twice")
        self.pending.append(entry)
        self._pending_pages.add(entry.page_id)

    def take_eligible(self, round_no: int) -> _PendingEntry | None:
        """First entry whose backoff has expired; preserves queue order."""
        for i, entry in enumerate(self.pending):
            if entry.eligible_round <= round_no:
                del self.pending[i]
                self._pending_pages.remove(entry.page_id)
                return entry
        return None

    def drop(self, page_id: int) -> None:
        self.candidates.pop(page_id, None)
        if page_id in self._pending_pages:
            self._pending_pages.remove(page_id)
            for i, entry in enumerate(self.pending):
                if entry.page_id == page_id:
                    del self.pending[i]
                    break


@dataclass
class TxnBegin:
    """What the promoter should do next for a dequeued page."""
    action: str                      # "transact" | "sync" | "defer"
    txn: MigrationTransaction | None = None
    cost: int = 0
    entry: _PendingEntry | None = None


class TransactionalMigrator:
    """State machine driver; the engine owns event timing."""

    def __init__(self, machine: Machine, tracker: Tracker):
        self.machine = machine
        self.tracker = tracker
        self.queues = PromotionQueues()
        self.round_no = 0
        self.committed = 0
        self.aborted = 0
        self.sync_fallbacks = 0
        self.deferred = 0
        # candidate pages re-touched since their last scan visit
        self._touched: dict[int, None] = {}

    # -- fault-side entry points ------------------------------------------------

    def on_hint_fault(self, page_id: int, now: int) -> int:
        """Handle a hint fault without blocking the access: disarm the page,
        record the touch, queue it as a promotion candidate, and re-scan
        candidates for pages whose tracking bits turned hot."""
        machine = self.machine
        pte = machine.ptes[page_id]
        if not pte.protected:
            return 0  # spurious fault, nothing armed
        pte.protected = False
        self.tracker.mark_accessed(page_id, requeue=True)
        cost = machine.costs.minor_fault_cost
        if not self.queues.in_candidates(page_id) and not self.queues.in_pending(page_id):
            self.queues.add_candidate(page_id)
            # arm the re-reference test: only accesses after this fault count
            pte.accessed = False
            cost += machine.costs.queue_op_cost
        cost += self.scan_candidates() * machine.costs.queue_op_cost
        return cost

    def note_access(self, page_id: int) -> None:
        """Cheap hook on every completed access: remember candidates whose
        accessed bit turned on so the next scan is O(retouched)."""
        if page_id in self.queues.candidates:
            self._touched[page_id] = None

    def scan_candidates(self) -> int:
        """Move candidates with both tracking flags hot to the pending queue.

        Equivalent to walking the whole candidate queue, restricted to pages
        whose accessed bit could have changed since the last walk.
        """
        moved = 0
        if not self._touched:
            return 0
        touched = list(self._touched)
        self._touched.clear()
        for page_id in touched:
            if page_id not in self.queues.candidates:
                continue
            pte = self.machine.ptes.get(page_id)
            if pte is None or not pte.accessed:
                continue
            self.tracker.mark_accessed(page_id)   # harvest the new reference
            info = self.machine.infos[page_id]
            if info.pg_active and pte.accessed:
                self.queues.promote_to_pending(page_id, self.round_no)
                moved += 1
        return moved

    # -- promoter-side state machine ----------------------------------------------

    def begin_round(self) -> None:
        self.round_no += 1

    def txn_begin(self, now: int) -> TxnBegin | None:
        """Dequeue the next eligible page and start its migration.

        Multi-mapped pages skip the transactional path entirely (two rounds
        of shootdown per mapping are not worth it) and report action="sync"
        for the caller to migrate synchronously.  Fast-tier allocation
        pressure defers the page, leaving it queued.
        """
        entry = self.queues.take_eligible(self.round_no)
        if entry is None:
            return None
        machine = self.machine
        page_id = entry.page_id
        pte = machine.ptes[page_id]
        cost = machine.costs.queue_op_cost

        if pte.tier is not Tier.SLOW or not pte.present:
            # already promoted or mid-demotion; nothing to migrate
            return TxnBegin("defer", cost=cost, entry=None)

        if pte.map_count > 1:
            self.sync_fallbacks += 1
            return TxnBegin("sync", cost=cost, entry=entry)

        dst = machine.allocate_frame(Tier.FAST)
        if dst is None:
            self.deferred += 1
            entry.eligible_round = self.round_no + 1
            self.queues.requeue(entry)
            return TxnBegin("defer", cost=cost, entry=entry)

        txn = MigrationTransaction(page_id=page_id, src_frame=pte.mapped_frame,
                                   dst_frame=dst, start_cycle=now)
        txn.advance(TxnState.DIRTY_CLEARED)
        cost += machine.clear_dirty_and_flush(page_id)
        txn.advance(TxnState.COPYING)
        txn.entry = entry
        return TxnBegin("transact", txn=txn, cost=cost)

    def txn_unmap_and_check(self, txn: MigrationTransaction, now: int) -> tuple[bool, int]:
        """Copy finished: atomically unmap, then decide commit vs abort from
        the dirty bit captured by the atomic load."""
        txn.copy_done_cycle = now
        self.machine.copy_frame(txn.src_frame, txn.dst_frame)
        old, cost = self.machine.atomic_unmap(txn.page_id)
        txn.old_pte = old
        txn.unmap_cycle = now
        txn.advance(TxnState.CHECKING)
        return (not old.dirty), cost

    def txn_finalize(self, txn: MigrationTransaction, commit: bool, now: int,
                     shadow_mgr=None) -> int:
        """Apply the decision: remap to the fast copy and register the old
        frame as a shadow, or restore the PTE and discard the copy."""
        machine = self.machine
        if commit:
            cost = machine.remap(txn.page_id, txn.dst_frame, Tier.FAST)
            if shadow_mgr is not None:
                shadow_mgr.register_shadow(txn.page_id, txn.dst_frame, txn.src_frame)
            txn.advance(TxnState.COMMITTED)
            self.committed += 1
        else:
            cost = machine.restore(txn.page_id, txn.old_pte)
            machine.free_frame(txn.dst_frame)
            txn.advance(TxnState.ABORTED)
            self.aborted += 1
            entry = txn.entry
            entry.aborts += 1
            entry.eligible_round = self.round_no + min(2 ** (entry.aborts - 1),
                                                       BACKOFF_CAP_ROUNDS)
            self.queues.requeue(entry)
        txn.finish_cycle = now
        return cost


def success_ratio(committed: int, aborted: int) -> str | None:
    """Format the commit:abort ratio; None when nothing ran."""
    if committed + aborted == 0:
        return None
    if aborted == 0:
        return f"{committed}:0"
    return f"{committed / aborted:.1f}:1"
