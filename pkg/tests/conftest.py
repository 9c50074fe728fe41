import pytest

from tierlab.access_tracking import PressureThresholds, Tracker
from tierlab.mem_model import CostModel, Machine, Tier, TierSpec


def make_machine(fast_pages=8, slow_pages=8, cores=4, fast_lat=316, slow_lat=854,
                 **cost_overrides) -> Machine:
    fast = TierSpec(Tier.FAST, fast_pages, fast_lat, fast_lat, 2.0)
    slow = TierSpec(Tier.SLOW, slow_pages, slow_lat, slow_lat, 2.0)
    costs = CostModel(**cost_overrides)
    return Machine(fast, slow, costs, cores=cores)


def make_tracker(machine: Machine, low_water_mark=2, demotion_batch=8) -> Tracker:
    return Tracker(machine, PressureThresholds(low_water_mark, demotion_batch))


@pytest.fixture
def machine() -> Machine:
    return make_machine()


@pytest.fixture
def tracked_machine():
    m = make_machine(fast_pages=32, slow_pages=32)
    return m, make_tracker(m)
