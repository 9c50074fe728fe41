import pytest

from tierlab.mem_model import AccessKind, SimulationError, Tier
from tierlab.shadowing import ShadowManager
from tierlab.tpm import (
    MigrationTransaction,
    TransactionalMigrator,
    TxnState,
    success_ratio,
)

from conftest import make_machine, make_tracker


def setup_migrator(n_slow=4, fast_pages=8):
    m = make_machine(fast_pages=fast_pages, slow_pages=n_slow + 4)
    t = make_tracker(m)
    mig = TransactionalMigrator(m, t)
    shadows = ShadowManager(m, t)
    for i in range(n_slow):
        m.create_page(i, Tier.SLOW, protected=True)
        t.track(i)
    return m, t, mig, shadows


def fault(m, mig, page, kind=AccessKind.READ, core=0):
    """Drive one hint-faulting access the way the engine would."""
    res = m.access(page, kind, core)
    assert res.fault is not None
    cost = mig.on_hint_fault(page, now=0)
    m.access(page, kind, core, count_touch=False, bypass_protection=True)
    return cost


def run_transaction(m, mig, shadows, dirty_mid_copy=False, writer_core=1):
    begin = mig.txn_begin(now=0)
    assert begin.action == "transact"
    txn = begin.txn
    if dirty_mid_copy:
        m.access(txn.page_id, AccessKind.WRITE, writer_core)
    commit, _ = mig.txn_unmap_and_check(txn, now=100)
    mig.txn_finalize(txn, commit, now=200, shadow_mgr=shadows if commit else None)
    return txn


class TestHintFault:
    def test_first_fault_joins_candidates_not_pending(self):
        m, t, mig, _ = setup_migrator()
        fault(m, mig, 0)
        assert mig.queues.in_candidates(0)
        assert not mig.queues.in_pending(0)

    def test_retouched_candidate_qualifies_on_next_scan(self):
        m, t, mig, _ = setup_migrator()
        fault(m, mig, 0)
        m.access(0, AccessKind.READ, core=1)   # fresh reference
        mig.note_access(0)
        fault(m, mig, 1)                       # any fault triggers the scan
        assert mig.queues.in_pending(0)

    def test_cold_candidate_stays_put_across_scans(self):
        m, t, mig, _ = setup_migrator()
        fault(m, mig, 0)
        for other in (1, 2, 3):
            fault(m, mig, other)
        assert mig.queues.in_candidates(0)
        assert not mig.queues.in_pending(0)

    def test_rearmed_page_with_hot_bits_moves_to_pending(self):
        # a page whose tracking bits are already hot qualifies at its next fault
        m, t, mig, _ = setup_migrator()
        fault(m, mig, 0)
        m.infos[0].pg_active = True
        m.infos[0].pg_referenced = True
        m.ptes[0].accessed = True
        mig.note_access(0)
        m.ptes[0].protected = True             # re-armed (e.g. after demotion)
        fault(m, mig, 0)
        assert mig.queues.in_pending(0)

    def test_fault_on_unprotected_page_is_noop(self):
        m, t, mig, _ = setup_migrator()
        m.ptes[0].protected = False
        assert mig.on_hint_fault(0, now=0) == 0
        assert not mig.queues.in_candidates(0)


def promote_to_pending(m, mig, page, trigger_page):
    fault(m, mig, page)
    m.access(page, AccessKind.READ, core=1)
    mig.note_access(page)
    fault(m, mig, trigger_page)
    assert mig.queues.in_pending(page)


class TestTransaction:
    def test_clean_copy_commits_with_shadow(self):
        m, t, mig, shadows = setup_migrator()
        promote_to_pending(m, mig, 0, trigger_page=1)
        src = m.ptes[0].mapped_frame
        txn = run_transaction(m, mig, shadows)
        assert txn.state is TxnState.COMMITTED
        assert m.ptes[0].tier is Tier.FAST
        assert m.infos[0].shadow
        assert shadows.index.pop(m.ptes[0].mapped_frame) == (src, 0)
        assert mig.committed == 1 and mig.aborted == 0

    def test_write_during_copy_aborts_and_restores(self):
        m, t, mig, shadows = setup_migrator()
        promote_to_pending(m, mig, 0, trigger_page=1)
        fast_free_before = m.fast_free()
        txn = run_transaction(m, mig, shadows, dirty_mid_copy=True)
        assert txn.state is TxnState.ABORTED
        pte = m.ptes[0]
        assert pte.tier is Tier.SLOW and pte.present and pte.dirty
        assert pte == txn.old_pte
        assert m.fast_free() == fast_free_before   # dst frame returned
        assert mig.queues.in_pending(0)            # requeued for retry

    def test_committed_copy_carries_content_version(self):
        m, t, mig, shadows = setup_migrator()
        m.ptes[0].protected = False
        m.access(0, AccessKind.WRITE, core=0)
        m.access(0, AccessKind.WRITE, core=0)
        m.ptes[0].protected = True
        promote_to_pending(m, mig, 0, trigger_page=1)
        run_transaction(m, mig, shadows)
        assert m.read_observes(0) == m.infos[0].content_version == 2

    def test_abort_backoff_delays_retry(self):
        m, t, mig, shadows = setup_migrator()
        promote_to_pending(m, mig, 0, trigger_page=1)
        run_transaction(m, mig, shadows, dirty_mid_copy=True)
        assert mig.txn_begin(now=0) is None        # backoff: 1 round
        mig.begin_round()
        begin = mig.txn_begin(now=0)
        assert begin is not None and begin.txn.page_id == 0
        mig.txn_unmap_and_check(begin.txn, now=100)

    def test_replay_after_restore_is_identical(self):
        # re-running the transaction after an abort walks the same states
        def trace(run_seed_write):
            m, t, mig, shadows = setup_migrator()
            promote_to_pending(m, mig, 0, trigger_page=1)
            txn = run_transaction(m, mig, shadows, dirty_mid_copy=run_seed_write)
            return txn.state

        assert trace(True) is TxnState.ABORTED
        assert trace(True) is TxnState.ABORTED
        assert trace(False) is TxnState.COMMITTED

    def test_multi_mapped_page_bypasses_transactions(self):
        m, t, mig, shadows = setup_migrator()
        m.ptes[0].map_count = 2
        promote_to_pending(m, mig, 0, trigger_page=1)
        begin = mig.txn_begin(now=0)
        assert begin.action == "sync"
        assert mig.sync_fallbacks == 1

    def test_fast_pressure_defers_and_requeues(self):
        m, t, mig, shadows = setup_migrator(fast_pages=2)
        for f in (m.allocate_frame(Tier.FAST), m.allocate_frame(Tier.FAST)):
            assert f is not None
        promote_to_pending(m, mig, 0, trigger_page=1)
        begin = mig.txn_begin(now=0)
        assert begin.action == "defer"
        assert mig.queues.in_pending(0)


class TestStateMachine:
    def test_illegal_transition_rejected(self):
        txn = MigrationTransaction(page_id=1, src_frame=0)
        with pytest.raises(SimulationError):
            txn.advance(TxnState.COMMITTED)

    def test_double_queue_insert_rejected(self):
        m, t, mig, _ = setup_migrator()
        mig.queues.promote_to_pending(0, 0)
        with pytest.raises(SimulationError):
            mig.queues.promote_to_pending(0, 0)


class TestAdversarialTrace:
    def test_writer_every_cycle_always_aborts(self):
        # a writer that dirties the migrating page inside every copy window
        # forces aborts to dominate commits
        m, t, mig, shadows = setup_migrator()
        promote_to_pending(m, mig, 0, trigger_page=1)
        for round_no in range(12):
            mig.begin_round()
            begin = mig.txn_begin(now=round_no * 1000)
            if begin is None or begin.action != "transact":
                continue
            m.access(0, AccessKind.WRITE, core=1)   # adversary strikes
            commit, _ = mig.txn_unmap_and_check(begin.txn, now=round_no * 1000 + 100)
            mig.txn_finalize(begin.txn, commit, now=round_no * 1000 + 200,
                             shadow_mgr=shadows if commit else None)
        assert mig.aborted > mig.committed
        assert mig.committed == 0


def test_success_ratio_formatting():
    assert success_ratio(0, 0) is None
    assert success_ratio(5, 0) == "5:0"
    assert success_ratio(300, 2) == "150.0:1"


def test_accessibility_window_bounds():
    # the page is unreadable only between the atomic unmap and the remap
    m, t, mig, shadows = setup_migrator()
    promote_to_pending(m, mig, 0, trigger_page=1)
    begin = mig.txn_begin(now=0)
    txn = begin.txn
    assert m.access(0, AccessKind.READ, core=2).fault is None   # during copy
    commit, _ = mig.txn_unmap_and_check(txn, now=100)
    assert m.access(0, AccessKind.READ, core=2).fault is not None  # window
    mig.txn_finalize(txn, commit, now=200, shadow_mgr=shadows)
    assert m.access(0, AccessKind.READ, core=2).fault is None   # after remap
