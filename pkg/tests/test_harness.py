import io

import numpy as np
import pytest

from latentcache.harness import (
    ExperimentConfig,
    HitRateReport,
    ReportError,
    connected_subset,
    hit_rate,
    improvement,
    run_experiment,
)
from latentcache.powerlaw import PowerLawParams
from latentcache.scoring import BaselineConfig, CacheDecision, ScoreVector, top_k
from latentcache.synthgen import PlantedWorld, generate, random_graph
from latentcache.trace import HOUR, Trace


def period(videos, n_videos=None):
    return Trace.from_arrays(np.arange(len(videos), dtype=float), np.zeros(len(videos), int), videos,
                             n_videos=n_videos)


@pytest.fixture(scope="module")
def synthetic():
    world = PlantedWorld(random_graph(40, 1.5, rng=1), PowerLawParams(2.5, 1800.0), n_videos=150,
                         noise_rate=0.3, rng_seed=1)
    return generate(world, 40 * HOUR)


def small_config(**kw):
    kw.setdefault("k_values", (5, 10, 20))
    return ExperimentConfig.split(0.0, 20, 20, **kw)


class TestHitRate:
    def test_cache_everything(self):
        actual = period([0, 1, 1, 2])
        assert hit_rate(CacheDecision(0, 3, (0, 1, 2)), actual) == 1.0

    def test_empty_cache(self):
        assert hit_rate(CacheDecision(0, 0, ()), period([0, 1])) == 0.0

    def test_dot_product(self):
        # X = (3, 1, 1), cache {v1, v3}: (3 + 1) / 5
        actual = period([0, 0, 0, 1, 2])
        assert hit_rate(CacheDecision(0, 2, (0, 2)), actual) == 0.8

    def test_idle_period(self):
        assert hit_rate(CacheDecision(0, 1, (0,)), period([])) is None

    @pytest.mark.invariant
    def test_monotone_in_k(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            sv = ScoreVector(0, {v: float(s) for v, s in enumerate(rng.random(12))})
            actual = period(rng.integers(0, 15, 30).tolist(), n_videos=15)
            rates = [hit_rate(top_k(sv, k), actual) for k in range(15)]
            assert all(a <= b for a, b in zip(rates, rates[1:]))


class TestRunExperiment:
    def alternating(self):
        # hour 0: A A B | 1: B B B | 2: A B B | 3: A A | 4: B A A
        rows = [(0.1, "A"), (0.2, "A"), (0.3, "B"), (1.1, "B"), (1.2, "B"), (1.3, "B"),
                (2.1, "A"), (2.2, "B"), (2.3, "B"), (3.1, "A"), (3.2, "A"),
                (4.1, "B"), (4.2, "A"), (4.3, "A")]
        return Trace.from_records((h * HOUR, "u", v) for h, v in rows)

    def test_hand_simulation(self):
        tr = self.alternating()
        cfg = ExperimentConfig.split(0.0, 2, 3, k_values=(1, 2), methods=("baseline",),
                                     baseline=BaselineConfig(gamma=0.0))
        rep = run_experiment(tr, cfg)
        # LFU counts before t=2h: A2 B4 -> B; t=3h: A3 B6 -> B; t=4h: A5 B6 -> B
        assert [h for _, h in rep.series[("baseline", 1)]] == pytest.approx([2 / 3, 0.0, 1 / 3])
        assert rep.average("baseline", 1) == pytest.approx(1 / 3)
        assert [h for _, h in rep.series[("baseline", 2)]] == [1.0, 1.0, 1.0]

    def test_large_cache_hits_everything_seen(self):
        tr = Trace.from_arrays([h * HOUR + 1 for h in range(6)], [0] * 6, [0, 1, 0, 1, 0, 1])
        cfg = ExperimentConfig.split(0.0, 2, 4, k_values=(5,), methods=("baseline", "viral"))
        rep = run_experiment(tr, cfg)
        for m in ("baseline", "viral"):
            assert all(h == 1.0 for _, h in rep.series[(m, 5)])

    def test_all_methods_run(self, synthetic):
        rep = run_experiment(synthetic, small_config())
        assert rep.skipped == {}
        assert set(rep.methods) == {"baseline", "viral", "inter", "social", "combined"}
        for rows in rep.series.values():
            assert rows and all(0.0 <= h <= 1.0 for _, h in rows)
        assert len(rep.graphs) == 2

    @pytest.mark.invariant
    def test_no_leakage(self, synthetic):
        rep = run_experiment(synthetic, small_config())
        assert rep.audit
        for t, what, latest in rep.audit:
            if what == "graph_instant":
                assert latest <= t
            else:
                assert latest < t, (what, t, latest)

    @pytest.mark.invariant
    def test_averages_recompute_from_series(self, synthetic):
        rep = run_experiment(synthetic, small_config(methods=("baseline", "inter")))
        for (m, k), rows in rep.series.items():
            assert rep.average(m, k) == pytest.approx(sum(h for _, h in rows) / len(rows), rel=1e-15)
        buf = io.StringIO()
        rep.write_periods(buf)
        back = HitRateReport.read_periods(io.StringIO(buf.getvalue()))
        for m in ("baseline", "inter"):
            for k in rep.k_values:
                assert back.average(m, k) == rep.average(m, k)

    @pytest.mark.invariant
    def test_connected_only_empty(self):
        tr = Trace.from_arrays([h * HOUR for h in range(10)], list(range(10)), list(range(10)))
        cfg = ExperimentConfig.split(0.0, 5, 5, k_values=(1,), connected_only=True)
        rep = run_experiment(tr, cfg)
        assert rep.series.get(("baseline", 1), []) == []
        assert rep.series.get(("social", 1), []) == []

    def test_skips_graph_methods_without_cascades(self):
        tr = Trace.from_arrays([h * HOUR + 5 * i for h in range(10) for i in range(5)],
                               [0] * 50, [h for h in range(10) for _ in range(5)])
        cfg = ExperimentConfig.split(0.0, 5, 5, k_values=(1,))
        rep = run_experiment(tr, cfg)
        assert "social" in rep.skipped and "combined" in rep.skipped
        assert rep.series[("inter", 1)]

    def test_fit_failure_skips(self):
        tr = Trace.from_arrays([h * HOUR for h in range(10)], [0] * 10, list(range(10)))
        rep = run_experiment(tr, ExperimentConfig.split(0.0, 5, 5, k_values=(1,)))
        assert {"inter", "social", "combined"} <= set(rep.skipped)
        assert rep.series[("baseline", 1)]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig((0, 10), (20, 30))
        with pytest.raises(ValueError):
            ExperimentConfig((0, 10), (10, 20), k_values=())
        with pytest.raises(ValueError):
            ExperimentConfig((0, 10), (10, 20), methods=("lru",))


class TestConnectedSubset:
    def test_single_viewers(self):
        tr = Trace.from_arrays([0, 1, 2], [0, 1, 2], [0, 1, 2])
        assert len(connected_subset(tr)) == 0

    def test_one_cascade(self):
        tr = Trace.from_arrays([0, 1, 2, 3], [0, 1, 2, 0], [5, 5, 5, 6])
        sub = connected_subset(tr)
        assert sub.videos.tolist() == [5, 5, 5]

    def test_mixed(self):
        rng = np.random.default_rng(9)
        tr = Trace.from_arrays(rng.uniform(0, 100, 80), rng.integers(0, 6, 80), rng.integers(0, 25, 80))
        sub = connected_subset(tr)
        # oracle: filter by distinct viewers, then union the requests
        viewers: dict[int, set] = {}
        for u, v, _ in tr:
            viewers.setdefault(v, set()).add(u)
        keep = {v for v, us in viewers.items() if len(us) >= 3}
        assert sorted(sub) == sorted(x for x in tr if x.video in keep)


class TestImprovement:
    def report(self, a, b):
        return HitRateReport((1,), {("a", 1): [(0.0, a)], ("b", 1): [(0.0, b)]})

    def test_identical(self):
        assert improvement(self.report(0.3, 0.3), "a", "b") == 0.0

    def test_thirteen_percent(self):
        assert improvement(self.report(0.20, 0.226), "a", "b") == pytest.approx(13.0)

    def test_negative(self):
        assert improvement(self.report(0.3, 0.2), "a", "b") < 0

    def test_missing_method(self):
        with pytest.raises(ReportError):
            improvement(self.report(0.3, 0.2), "a", "zzz")

    def test_mean_over_k(self):
        rep = HitRateReport((1, 2), {("a", 1): [(0, 0.1)], ("a", 2): [(0, 0.3)],
                                     ("b", 1): [(0, 0.2)], ("b", 2): [(0, 0.4)]})
        assert improvement(rep, "a", "b") == pytest.approx(50.0)
        assert improvement(rep, "a", "b", k_values=(1,)) == pytest.approx(100.0)
