"""Synthetic workloads and initial-placement builders.

Three provisioning scenarios (working set below / near / above fast-tier
capacity), a Zipfian access stream over a shuffled hot-rank assignment,
and a block-chase pattern that walks every cache line of fixed-size blocks
with Zipfian block popularity.

All generators are pure functions of the seed: identical seeds produce
identical event streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .mem_model import PAGE_SIZE, AccessKind, Tier

LINES_PER_PAGE = PAGE_SIZE // 64


class ScenarioKind(Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


class ConfigError(Exception):
    """Scenario description violates a capacity or consistency constraint."""


@dataclass(frozen=True)
class AccessEvent:
    page_id: int
    kind: AccessKind


@dataclass
class Scenario:
    """Workload plus initial placement, all sizes in pages."""
    name: str
    rss_pages: int
    wss_pages: int
    placement: list[tuple[range, Tier]]
    read_fraction: float = 0.5
    pattern: str = "zipf"             # "zipf" | "block_chase"
    zipf_skew: float = 0.99
    block_pages: int = 0              # block_chase only
    duration: int = 100_000           # total accesses
    seed: int = 1
    pinned_fast_pages: int = 0        # kernel-reserve emulation
    arm_slow_pages: bool = True       # hint-fault arming at placement

    def __post_init__(self):
        if self.wss_pages > self.rss_pages:
            raise ConfigError(
                f"wss_pages ({self.wss_pages}) exceeds rss_pages ({self.rss_pages})")
        covered = sum(len(r) for r, _ in self.placement)
        if covered != self.rss_pages:
            raise ConfigError(
                f"placement covers {covered} pages, rss is {self.rss_pages}")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ConfigError("read_fraction must be in [0, 1]")

    def tier_totals(self) -> dict[Tier, int]:
        totals = {Tier.FAST: self.pinned_fast_pages, Tier.SLOW: 0}
        for rng, tier in self.placement:
            totals[tier] += len(rng)
        return totals

    def validate_against(self, fast_pages: int, slow_pages: int) -> None:
        totals = self.tier_totals()
        if totals[Tier.FAST] > fast_pages:
            raise ConfigError(
                f"placement needs {totals[Tier.FAST]} fast pages, capacity {fast_pages}")
        if totals[Tier.SLOW] > slow_pages:
            raise ConfigError(
                f"placement needs {totals[Tier.SLOW]} slow pages, capacity {slow_pages}")

    def wss_page_ids(self) -> range:
        # working set occupies the first wss_pages of the id space
        return range(self.wss_pages)


def zipf_sample(rank_count: int, skew: float, rng: np.random.Generator,
                size: int | None = None):
    """Draw ranks (1-based) with P(r) proportional to 1/r^skew."""
    if rank_count < 1:
        raise ValueError("rank_count must be >= 1")
    if skew <= 0:
        raise ValueError("skew must be > 0")
    cdf = zipf_cdf(rank_count, skew)
    if size is None:
        return int(np.searchsorted(cdf, rng.random(), side="right")) + 1
    return np.searchsorted(cdf, rng.random(size), side="right") + 1


def zipf_cdf(rank_count: int, skew: float) -> np.ndarray:
    weights = 1.0 / np.power(np.arange(1, rank_count + 1, dtype=np.float64), skew)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return cdf


def zipf_pmf(rank_count: int, skew: float) -> np.ndarray:
    weights = 1.0 / np.power(np.arange(1, rank_count + 1, dtype=np.float64), skew)
    return weights / weights.sum()


class ZipfStream:
    """Zipfian page accesses; rank-to-page assignment is a seeded shuffle so
    hot pages are uniformly spread over the working set."""

    CHUNK = 8192

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.rank_to_page = np.arange(scenario.wss_pages, dtype=np.int64)
        self.rng.shuffle(self.rank_to_page)
        self._cdf = zipf_cdf(scenario.wss_pages, scenario.zipf_skew)
        self._remaining = scenario.duration
        self._buf: list[AccessEvent] = []

    def _refill(self) -> None:
        n = min(self.CHUNK, self._remaining)
        if n <= 0:
            return
        ranks = np.searchsorted(self._cdf, self.rng.random(n), side="right")
        pages = self.rank_to_page[ranks]
        reads = self.rng.random(n) < self.scenario.read_fraction
        self._buf = [
            AccessEvent(int(p), AccessKind.READ if r else AccessKind.WRITE)
            for p, r in zip(pages[::-1], reads[::-1])
        ]
        self._remaining -= n

    def next_event(self) -> AccessEvent | None:
        if not self._buf:
            self._refill()
            if not self._buf:
                return None
        return self._buf.pop()


class BlockChaseStream:
    """Walks every cache line of one block in random order, then picks the
    next block Zipfian-ly; each touched page contributes 64 line events."""

    def __init__(self, scenario: Scenario):
        if scenario.block_pages <= 0:
            raise ConfigError("block_chase needs block_pages > 0")
        if scenario.wss_pages % scenario.block_pages:
            raise ConfigError("wss_pages must be a multiple of block_pages")
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.block_count = scenario.wss_pages // scenario.block_pages
        self._block_cdf = zipf_cdf(self.block_count, scenario.zipf_skew)
        self._remaining = scenario.duration
        self._perm: list[int] = []
        self._block = 0

    def _next_block(self) -> None:
        self._block = int(np.searchsorted(self._block_cdf, self.rng.random(),
                                          side="right"))
        lines = self.scenario.block_pages * LINES_PER_PAGE
        perm = self.rng.permutation(lines)
        self._perm = list(perm[::-1])

    def next_event(self) -> AccessEvent | None:
        if self._remaining <= 0:
            return None
        if not self._perm:
            self._next_block()
        line = self._perm.pop()
        self._remaining -= 1
        page = self._block * self.scenario.block_pages + line // LINES_PER_PAGE
        kind = (AccessKind.READ
                if self.rng.random() < self.scenario.read_fraction
                else AccessKind.WRITE)
        return AccessEvent(page, kind)


def make_stream(scenario: Scenario):
    if scenario.pattern == "zipf":
        return ZipfStream(scenario)
    if scenario.pattern == "block_chase":
        return BlockChaseStream(scenario)
    raise ConfigError(f"unknown access pattern {scenario.pattern!r}")


GIB = 1024 ** 3


def gb_to_pages(gb: float, scale: int) -> int:
    """Scenario sizes are quoted in GB at full scale; scale divides bytes."""
    return int(round(gb * GIB / scale / PAGE_SIZE))


def build_scenario(kind: ScenarioKind | str, scale: int = 1024, *,
                   read_fraction: float = 0.5, duration: int | None = None,
                   seed: int = 1, fast_capacity_pages: int | None = None) -> Scenario:
    """The three provisioning layouts, scaled down from GB to desk size.

    small:  10 GB working set / 20 GB resident; fast tier pre-filled with
            cold data, working set split 6 GB fast + 4 GB slow.
    medium: 13.5 GB / 27 GB; a pinned kernel-reserve emulation (3.5 GB)
            squeezes the working set so it barely misses fitting.
    large:  27 GB working set == resident set; fast tier starts 100% full,
            the remaining 11 GB spills to the slow tier.
    """
    if isinstance(kind, str):
        kind = ScenarioKind(kind)
    if scale < 1:
        raise ConfigError("scale must be >= 1")
    fast_cap = fast_capacity_pages if fast_capacity_pages is not None \
        else gb_to_pages(16, scale)

    if kind is ScenarioKind.SMALL:
        wss = gb_to_pages(10, scale)
        rss = gb_to_pages(20, scale)
        wss_fast = gb_to_pages(6, scale)
        pinned = 0
    elif kind is ScenarioKind.MEDIUM:
        wss = gb_to_pages(13.5, scale)
        rss = gb_to_pages(27, scale)
        wss_fast = gb_to_pages(2.5, scale)
        pinned = gb_to_pages(3.5, scale)
    else:
        wss = gb_to_pages(27, scale)
        rss = wss
        wss_fast = fast_cap
        pinned = 0

    cold = rss - wss
    # page ids: [0, wss) working set, [wss, rss) cold resident data.
    # Placement order is LRU insertion order: cold data fills fast memory
    # first (it is the oldest), then the working set, spilling to slow.
    fast_budget = fast_cap - pinned
    wss_fast = min(wss_fast, wss, fast_budget)
    cold_fast = min(cold, fast_budget - wss_fast)
    placement = []
    if cold_fast:
        placement.append((range(wss, wss + cold_fast), Tier.FAST))
    if cold - cold_fast:
        placement.append((range(wss + cold_fast, rss), Tier.SLOW))
    if wss_fast:
        placement.append((range(0, wss_fast), Tier.FAST))
    if wss - wss_fast:
        placement.append((range(wss_fast, wss), Tier.SLOW))

    return Scenario(
        name=kind.value,
        rss_pages=rss,
        wss_pages=wss,
        placement=placement,
        read_fraction=read_fraction,
        duration=duration if duration is not None else 60 * wss,
        seed=seed,
        pinned_fast_pages=pinned,
    )


def export_trace(scenario: Scenario, path: str) -> int:
    """Write the access stream as `cycle,page,kind,core` text for replay by
    other tools; cycle/core are filled by a nominal serial schedule."""
    stream = make_stream(scenario)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cycle,page,kind,core\n")
        cycle = 0
        while True:
            ev = stream.next_event()
            if ev is None:
                break
            fh.write(f"{cycle},{ev.page_id},{ev.kind.value},{count % 4}\n")
            cycle += 1
            count += 1
    return count
