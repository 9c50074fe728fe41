import math

import numpy as np
import pytest

from tierlab.mem_model import AccessKind, Tier
from tierlab.workload import (
    BlockChaseStream,
    ConfigError,
    LINES_PER_PAGE,
    Scenario,
    ScenarioKind,
    ZipfStream,
    build_scenario,
    export_trace,
    gb_to_pages,
    make_stream,
    zipf_pmf,
    zipf_sample,
)


class TestZipfSample:
    def test_single_rank_always_one(self):
        rng = np.random.default_rng(0)
        assert all(zipf_sample(1, 0.99, rng) == 1 for _ in range(10))

    def test_frequency_ratio_matches_closed_form(self):
        # oracle: P(rank1)/P(rank2) = 2^skew; empirical counts over 1e6 draws
        # must match each rank's closed-form mass within 3 sigma
        skew = 0.99
        n_draws = 1_000_000
        rng = np.random.default_rng(42)
        ranks = zipf_sample(100, skew, rng, size=n_draws)
        pmf = zipf_pmf(100, skew)
        for rank in (1, 2):
            observed = np.count_nonzero(ranks == rank) / n_draws
            p = pmf[rank - 1]
            sigma = math.sqrt(p * (1 - p) / n_draws)
            assert abs(observed - p) < 3 * sigma
        f1 = np.count_nonzero(ranks == 1)
        f2 = np.count_nonzero(ranks == 2)
        assert f1 / f2 == pytest.approx(2 ** skew, rel=0.02)

    def test_small_skew_is_nearly_uniform(self):
        rng = np.random.default_rng(7)
        ranks = zipf_sample(10, 1e-9, rng, size=200_000)
        counts = np.bincount(ranks, minlength=11)[1:]
        expected = 20_000
        sigma = math.sqrt(0.1 * 0.9 * 200_000)
        assert all(abs(c - expected) < 4 * sigma for c in counts)

    def test_invalid_args(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            zipf_sample(0, 1.0, rng)
        with pytest.raises(ValueError):
            zipf_sample(10, 0.0, rng)


class TestScenarioInvariants:
    def test_wss_must_fit_in_rss(self):
        with pytest.raises(ConfigError):
            Scenario(name="x", rss_pages=10, wss_pages=20,
                     placement=[(range(0, 10), Tier.FAST)])

    def test_placement_must_cover_rss(self):
        with pytest.raises(ConfigError):
            Scenario(name="x", rss_pages=10, wss_pages=5,
                     placement=[(range(0, 6), Tier.FAST)])

    def test_capacity_validation(self):
        scn = Scenario(name="x", rss_pages=10, wss_pages=5,
                       placement=[(range(0, 10), Tier.FAST)])
        with pytest.raises(ConfigError):
            scn.validate_against(fast_pages=8, slow_pages=8)


class TestBuildScenario:
    def test_small_layout_at_desk_scale(self):
        # 10 GB working set / 20 GB resident at scale 1024: 2560 working-set
        # pages split 1536 fast + 1024 slow, fast tier filled to 4096
        scn = build_scenario(ScenarioKind.SMALL, 1024)
        assert scn.wss_pages == 2560 and scn.rss_pages == 5120
        totals = scn.tier_totals()
        assert totals[Tier.FAST] == 4096
        assert totals[Tier.SLOW] == 1024
        wss_fast = sum(len(r) for r, t in scn.placement
                       if t is Tier.FAST and r.start < scn.wss_pages)
        assert wss_fast == 1536

    def test_large_layout_fills_fast_tier(self):
        for scale in (512, 1024, 2048):
            scn = build_scenario(ScenarioKind.LARGE, scale)
            assert scn.tier_totals()[Tier.FAST] == gb_to_pages(16, scale)
            assert scn.wss_pages == scn.rss_pages

    def test_medium_reserve_squeezes_working_set(self):
        scn = build_scenario(ScenarioKind.MEDIUM, 1024)
        assert scn.pinned_fast_pages == gb_to_pages(3.5, 1024)
        totals = scn.tier_totals()
        assert totals[Tier.FAST] == 4096       # pinned + data fill the tier
        # usable fast space is smaller than the working set: churn expected
        assert 4096 - scn.pinned_fast_pages < scn.wss_pages

    def test_placement_is_cold_first(self):
        scn = build_scenario(ScenarioKind.SMALL, 1024)
        first_range, tier = scn.placement[0]
        assert tier is Tier.FAST
        assert first_range.start == scn.wss_pages   # cold block leads


class TestStreams:
    def test_zipf_stream_deterministic(self):
        scn = build_scenario(ScenarioKind.SMALL, 1024, duration=5000, seed=9)
        a = [(" ", e.page_id, e.kind) for e in iter_stream(ZipfStream(scn))]
        b = [(" ", e.page_id, e.kind) for e in iter_stream(ZipfStream(scn))]
        assert a == b
        assert len(a) == 5000

    def test_zipf_stream_stays_in_working_set(self):
        scn = build_scenario(ScenarioKind.SMALL, 1024, duration=2000, seed=3)
        for event in iter_stream(ZipfStream(scn)):
            assert 0 <= event.page_id < scn.wss_pages

    def test_read_fraction_extremes(self):
        scn = build_scenario(ScenarioKind.SMALL, 1024, duration=500, seed=3,
                             read_fraction=1.0)
        assert all(e.kind is AccessKind.READ for e in iter_stream(ZipfStream(scn)))


def iter_stream(stream):
    while True:
        event = stream.next_event()
        if event is None:
            return
        yield event


class TestBlockChase:
    def scenario(self, blocks=3, block_pages=4, duration=None, seed=5):
        wss = blocks * block_pages
        n = duration if duration is not None else blocks * block_pages * LINES_PER_PAGE
        return Scenario(name="bc", rss_pages=wss, wss_pages=wss,
                        placement=[(range(0, wss), Tier.SLOW)],
                        pattern="block_chase", block_pages=block_pages,
                        duration=n, read_fraction=1.0, seed=seed)

    def test_one_pass_is_256_line_events_for_4_page_block(self):
        scn = self.scenario(blocks=1, block_pages=4, duration=256)
        events = list(iter_stream(BlockChaseStream(scn)))
        assert len(events) == 4 * LINES_PER_PAGE == 256

    def test_每_page_touched_64_times_per_pass(self):
        scn = self.scenario(blocks=1, block_pages=4, duration=256)
        counts = {}
        for e in iter_stream(BlockChaseStream(scn)):
            counts[e.page_id] = counts.get(e.page_id, 0) + 1
        assert counts == {0: 64, 1: 64, 2: 64, 3: 64}

    def test_block_popularity_matches_zipf_oracle(self):
        blocks, block_pages = 8, 2
        passes = 3000
        scn = self.scenario(blocks=blocks, block_pages=block_pages,
                            duration=passes * block_pages * LINES_PER_PAGE)
        stream = BlockChaseStream(scn)
        visits = np.zeros(blocks)
        for e in iter_stream(stream):
            visits[e.page_id // block_pages] += 1
        visits /= block_pages * LINES_PER_PAGE   # line events -> block passes
        total = visits.sum()
        pmf = zipf_pmf(blocks, scn.zipf_skew)
        for b in range(blocks):
            p = pmf[b]
            sigma = math.sqrt(p * (1 - p) * total)
            assert abs(visits[b] - p * total) < 4 * sigma

    def test_block_pages_must_divide_wss(self):
        with pytest.raises(ConfigError):
            BlockChaseStream(Scenario(
                name="bc", rss_pages=10, wss_pages=10,
                placement=[(range(0, 10), Tier.SLOW)],
                pattern="block_chase", block_pages=3, duration=10))


def test_make_stream_dispatch():
    scn = build_scenario(ScenarioKind.SMALL, 1024, duration=10)
    assert isinstance(make_stream(scn), ZipfStream)
    with pytest.raises(ConfigError):
        make_stream(Scenario(name="x", rss_pages=4, wss_pages=4,
                             placement=[(range(0, 4), Tier.FAST)],
                             pattern="nope"))


def test_export_trace(tmp_path):
    scn = build_scenario(ScenarioKind.SMALL, 1024, duration=50, seed=2)
    path = tmp_path / "trace.csv"
    count = export_trace(scn, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "cycle,page,kind,core"
    assert count == 50 and len(lines) == 51
    cycle, page, kind, core = lines[1].split(",")
    assert kind in ("read", "write")
