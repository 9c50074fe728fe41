import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tierlab.mem_model import (
    AccessKind,
    CostModel,
    FaultKind,
    Machine,
    NotMappedError,
    OutOfMemoryError,
    PLATFORM_PROFILES,
    SimulationError,
    Tier,
    TierSpec,
)

from conftest import make_machine


def test_tier_spec_validation():
    with pytest.raises(ValueError):
        TierSpec(Tier.FAST, 0, 100, 100, 1.0)
    with pytest.raises(ValueError):
        TierSpec(Tier.FAST, 10, 0, 100, 1.0)
    with pytest.raises(ValueError):
        TierSpec(Tier.FAST, 10, 100, 100, 0.0)


def test_cost_model_requires_copy_dearer_than_remap():
    with pytest.raises(ValueError):
        CostModel(page_copy_cost=100, remap_cost=300)
    CostModel(page_copy_cost=301, remap_cost=300)  # boundary ok


def test_tiering_premise_enforced():
    fast = TierSpec(Tier.FAST, 4, 800, 800, 1.0)
    slow = TierSpec(Tier.SLOW, 4, 500, 500, 1.0)
    with pytest.raises(ValueError):
        Machine(fast, slow, CostModel())


def test_platform_a_access_latencies():
    # measured read latencies: 316 cycles fast tier, 854 cycles slow tier
    prof = PLATFORM_PROFILES["platform_a"]
    fast, slow = prof.tier_specs(4, 4)
    m = Machine(fast, slow, prof.cost_model())
    m.create_page(1, Tier.FAST)
    m.create_page(2, Tier.SLOW)
    assert m.access(1, AccessKind.READ, core=0).latency == 316
    assert m.access(2, AccessKind.READ, core=0).latency == 854


def test_protected_write_faults_without_side_effects(machine):
    machine.create_page(1, Tier.SLOW, protected=True)
    res = machine.access(1, AccessKind.WRITE, core=0)
    assert res.fault is FaultKind.HINT
    pte = machine.ptes[1]
    assert not pte.dirty
    assert machine.infos[1].content_version == 0


def test_unknown_page_is_hard_error(machine):
    with pytest.raises(NotMappedError):
        machine.access(99, AccessKind.READ, core=0)


def test_write_bumps_version_and_dirty(machine):
    machine.create_page(1, Tier.FAST)
    machine.access(1, AccessKind.WRITE, core=2)
    assert machine.ptes[1].dirty
    assert machine.infos[1].content_version == 1
    assert machine.read_observes(1) == 1
    assert 2 in machine.tlb_holders(1)


class TestClearDirtyAndFlush:
    def test_two_cores_cost_is_two_ipis(self, machine):
        # hand count: cores {0, 2} in the directory, 500 cycles per IPI
        machine.create_page(1, Tier.SLOW)
        machine.access(1, AccessKind.WRITE, core=0)
        machine.access(1, AccessKind.READ, core=2)
        cost = machine.clear_dirty_and_flush(1)
        assert cost == 2 * machine.costs.tlb_ipi_cost_per_core == 1000
        assert not machine.ptes[1].dirty
        assert machine.tlb_holders(1) == set()

    def test_never_accessed_page_flushes_nothing(self, machine):
        machine.create_page(1, Tier.SLOW)
        assert machine.clear_dirty_and_flush(1) == 0

    def test_second_call_is_free(self, machine):
        machine.create_page(1, Tier.SLOW)
        machine.access(1, AccessKind.READ, core=3)
        assert machine.clear_dirty_and_flush(1) == 500
        assert machine.clear_dirty_and_flush(1) == 0

    def test_not_mapped_error(self, machine):
        machine.create_page(1, Tier.SLOW)
        machine.atomic_unmap(1)
        with pytest.raises(NotMappedError):
            machine.clear_dirty_and_flush(1)


class TestAtomicUnmap:
    def test_captures_dirty_at_load(self, machine):
        machine.create_page(1, Tier.SLOW)
        machine.clear_dirty_and_flush(1)
        machine.access(1, AccessKind.WRITE, core=0)   # dirtied mid-copy
        old, _ = machine.atomic_unmap(1)
        assert old.dirty

    def test_clean_when_untouched(self, machine):
        machine.create_page(1, Tier.SLOW)
        machine.clear_dirty_and_flush(1)
        old, _ = machine.atomic_unmap(1)
        assert not old.dirty

    def test_unmapped_page_is_inaccessible(self, machine):
        machine.create_page(1, Tier.SLOW)
        machine.atomic_unmap(1)
        res = machine.access(1, AccessKind.READ, core=0)
        assert res.fault is FaultKind.NOT_PRESENT

    def test_second_shootdown_counts_cores_since_first(self, machine):
        machine.create_page(1, Tier.SLOW)
        machine.access(1, AccessKind.READ, core=0)
        machine.clear_dirty_and_flush(1)
        machine.access(1, AccessKind.READ, core=1)
        machine.access(1, AccessKind.READ, core=2)
        _, cost = machine.atomic_unmap(1)
        assert cost == 1000


class TestRemapRestore:
    def test_restore_after_abort_serves_slow_reads(self, machine):
        machine.create_page(1, Tier.SLOW)
        old, _ = machine.atomic_unmap(1)
        machine.restore(1, old)
        res = machine.access(1, AccessKind.READ, core=0)
        assert res.fault is None
        assert res.latency == 854

    def test_restore_is_bit_identical(self, machine):
        machine.create_page(1, Tier.SLOW)
        machine.access(1, AccessKind.WRITE, core=1)
        before = machine.ptes[1].snapshot()
        old, _ = machine.atomic_unmap(1)
        machine.restore(1, old)
        assert machine.ptes[1] == before

    def test_remap_to_fast_serves_fast_reads(self, machine):
        machine.create_page(1, Tier.SLOW)
        src = machine.ptes[1].mapped_frame
        dst = machine.allocate_frame(Tier.FAST)
        machine.atomic_unmap(1)
        machine.copy_frame(src, dst)
        machine.remap(1, dst, Tier.FAST)
        res = machine.access(1, AccessKind.READ, core=0)
        assert res.latency == 316

    def test_remap_requires_allocated_frame(self, machine):
        machine.create_page(1, Tier.SLOW)
        machine.atomic_unmap(1)
        with pytest.raises(SimulationError):
            machine.remap(1, 999, Tier.FAST)


class TestFrameAllocation:
    def test_pressure_after_exhaustion(self):
        m = make_machine(fast_pages=4)
        for _ in range(4):
            assert m.allocate_frame(Tier.FAST) is not None
        assert m.allocate_frame(Tier.FAST) is None

    def test_free_then_alloc_restores_count(self, machine):
        before = machine.fast_free()
        frame = machine.allocate_frame(Tier.FAST)
        machine.free_frame(frame)
        assert machine.fast_free() == before

    def test_reserve_beyond_capacity_raises(self):
        m = make_machine(fast_pages=2)
        with pytest.raises(OutOfMemoryError):
            m.reserve_frames(Tier.FAST, 3)

    def test_conservation_audit(self, machine):
        machine.create_page(1, Tier.FAST)
        machine.allocate_frame(Tier.SLOW)
        machine.audit_frames()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["alloc_f", "alloc_s", "free"]), max_size=60))
def test_frame_conservation_random_ops(ops):
    m = make_machine(fast_pages=6, slow_pages=6)
    live = []
    for op in ops:
        if op == "alloc_f":
            f = m.allocate_frame(Tier.FAST)
            if f is not None:
                live.append(f)
        elif op == "alloc_s":
            f = m.allocate_frame(Tier.SLOW)
            if f is not None:
                live.append(f)
        elif live:
            m.free_frame(live.pop())
        m.audit_frames()
    for pool in m.pools.values():
        assert pool.free_count + pool.allocated_count == pool.capacity


def test_tlb_coherence_after_shootdown(machine):
    # after a shootdown no core holds the page, and the next write is
    # recorded on the PTE (which is what makes the dirty check sound)
    machine.create_page(1, Tier.SLOW)
    for core in range(4):
        machine.access(1, AccessKind.READ, core=core)
    machine.clear_dirty_and_flush(1)
    assert machine.tlb_holders(1) == set()
    machine.access(1, AccessKind.WRITE, core=1)
    assert machine.ptes[1].dirty
