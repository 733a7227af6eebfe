import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize
from scipy.stats import mannwhitneyu

from latentcache.netinfer import (
    UPPER,
    CascadeIndex,
    InferenceConfig,
    TransmissionGraph,
    column_gradient,
    column_loglik,
    infer_column,
    infer_graph,
    inference_schedule,
    maximize,
    valid_inference_cascades,
)
from latentcache.powerlaw import PowerLawParams, incubation_weight
from latentcache.synthgen import PlantedWorld, generate, planted_star
from latentcache.trace import HOUR, Cascade, Trace, cascades

PL = PowerLawParams(2.5, 60.0)


def casc(users, times, video=0):
    return Cascade(video, np.asarray(times, dtype=float), np.asarray(users, dtype=np.int64))


def brute_loglik(target, a: dict, cascade_list, pl):
    """Direct loop over the likelihood definition; ``a`` maps source -> A[source, target]."""
    total = 0.0
    for c in cascade_list:
        times = dict(zip(c.users.tolist(), c.times.tolist()))
        if target in times:
            tau = times[target]
            parents = [j for j, t in times.items() if t < tau and j != target]
            if not parents:
                continue
            prod = 1.0
            for j in parents:
                prod *= 1 - a.get(j, 0.0) * incubation_weight(pl, max(tau - times[j], 1.0))
            total += math.log(1 - prod) if prod < 1 else -math.inf
        else:
            for j in times:
                total += math.log(1 - a.get(j, 0.0)) if a.get(j, 0.0) < 1 else -math.inf
    return total


def random_instance(rng, n_users=6, n_cascades=10):
    cs = []
    for v in range(rng.integers(1, n_cascades + 1)):
        size = rng.integers(1, n_users + 1)
        users = rng.permutation(n_users)[:size]
        times = np.sort(rng.uniform(0, 600, size))
        cs.append(casc(users, times, v))
    return cs


class TestValidCascades:
    cfg = InferenceConfig()

    def view(self, users, times=None):
        times = list(range(len(users))) if times is None else times
        return Trace.from_arrays(times, users, [0] * len(users))

    def test_single_user_rejected(self):
        assert valid_inference_cascades(self.view([0, 0, 0]), self.cfg) == []

    def test_three_users_kept(self):
        (c,) = valid_inference_cascades(self.view([0, 1, 2], [1, 2, 3]), self.cfg)
        assert c.events == [(0, 1.0), (1, 2.0), (2, 3.0)]

    def test_reduced_to_first_events(self):
        (c,) = valid_inference_cascades(self.view([0, 1, 0, 2, 1]), self.cfg)
        # oracle: keep the first occurrence of each user
        seen, expected = set(), []
        for t, u in enumerate([0, 1, 0, 2, 1]):
            if u not in seen:
                seen.add(u)
                expected.append((u, float(t)))
        assert c.events == expected

    def test_two_users_below_threshold(self):
        assert valid_inference_cascades(self.view([0, 1, 0, 1]), self.cfg) == []


class TestColumnLoglik:
    def test_single_parent(self):
        cs = [casc([0, 1], [0, 60])]
        assert column_loglik(1, [0], [0.5], cs, PL) == pytest.approx(math.log(0.5), abs=1e-15)

    def test_zero_column_survival(self):
        cs = [casc([0, 2], [0, 60], v) for v in range(3)]
        assert column_loglik(1, [0, 2], [0.0, 0.0], cs, PL) == 0.0

    def test_two_parents(self):
        cs = [casc([0, 2, 1], [0, 0, 60])]
        assert column_loglik(1, [0, 2], [0.5, 0.5], cs, PL) == pytest.approx(math.log(1 - 0.25))

    def test_seed_contributes_nothing(self):
        cs = [casc([1, 0], [0, 60])]
        # target 1 is the seed; 0 comes later so no term involves it
        assert column_loglik(1, [0], [0.9], cs, PL) == 0.0

    def test_certain_edge_with_survival_is_minus_inf(self):
        cs = [casc([0, 2], [0, 60])]
        assert column_loglik(1, [0], [1.0], cs, PL) == -math.inf

    def test_self_edge_rejected(self):
        with pytest.raises(ValueError):
            column_loglik(1, [1], [0.5], [casc([0, 1], [0, 1])], PL)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            cs = random_instance(rng)
            target = int(rng.integers(6))
            src = [j for j in range(6) if j != target]
            a = rng.uniform(0, 0.95, len(src))
            got = column_loglik(target, src, a, cs, PL)
            want = brute_loglik(target, dict(zip(src, a)), cs, PL)
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    @pytest.mark.invariant
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            cs = random_instance(rng)
            target = int(rng.integers(6))
            src = [j for j in range(6) if j != target]
            a = rng.uniform(0.05, 0.9, len(src))
            g = column_gradient(target, src, a, cs, PL)
            h = 1e-6
            for i in range(len(src)):
                up, dn = a.copy(), a.copy()
                up[i] += h
                dn[i] -= h
                fd = (column_loglik(target, src, up, cs, PL) - column_loglik(target, src, dn, cs, PL)) / (2 * h)
                assert abs(g[i] - fd) <= 1e-5 * max(abs(fd), 1.0)

    @pytest.mark.invariant
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.5))
    @settings(max_examples=40, deadline=None)
    def test_survival_terms_strictly_decrease(self, seed, bump):
        rng = np.random.default_rng(seed)
        cs = random_instance(rng)
        # user 6 never appears as an earlier parent of target, only alongside it elsewhere
        cs.append(casc([6, 0], [0, 10], 99))
        target = 5
        cs = [c for c in cs if target not in c.users.tolist()]
        src = [0, 1, 2, 3, 4, 6]
        a = rng.uniform(0, 0.4, len(src))
        base = column_loglik(target, src, a, cs, PL)
        present = {u for c in cs for u in c.users.tolist()}
        for i, j in enumerate(src):
            if j not in present:
                continue
            a2 = a.copy()
            a2[i] += bump
            assert column_loglik(target, src, a2, cs, PL) < base

    @pytest.mark.invariant
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        cs = random_instance(rng)
        src = [0, 1, 2, 3, 4]
        a = rng.uniform(0, 0.9, 5)
        perm = [cs[i] for i in rng.permutation(len(cs))]
        assert column_loglik(5, src, a, perm, PL) == pytest.approx(column_loglik(5, src, a, cs, PL), rel=1e-12)


class TestInferColumn:
    cfg = InferenceConfig(incubation=PL)

    def test_planted_chain(self):
        cs = [casc([0, 1], [0, 60], v) for v in range(50)]
        src, p = infer_column(1, cs, self.cfg)
        assert src.tolist() == [0] and p[0] >= 0.8
        # grid oracle: the scalar likelihood is largest at the top of the box
        grid = np.linspace(0, UPPER, 201)
        vals = [column_loglik(1, [0], [g], cs, PL) for g in grid]
        assert grid[int(np.argmax(vals))] == UPPER
        assert p[0] == pytest.approx(UPPER, abs=1e-6)
        src0, _ = infer_column(0, cs, self.cfg)
        assert src0.size == 0

    def test_absent_user_is_isolated(self):
        cs = [casc([0, 1, 2], [0, 60, 120])]
        src, p = infer_column(7, cs, self.cfg, n_users=8)
        assert src.size == 0 and p.size == 0

    def test_needs_incubation(self):
        with pytest.raises(ValueError):
            infer_column(0, [], InferenceConfig())

    def test_reaches_quasi_newton_optimum(self):
        # independent optimizer on the same concave objective
        rng = np.random.default_rng(23)
        for _ in range(10):
            cs = random_instance(rng, n_users=6, n_cascades=10)
            index = CascadeIndex(cs, 6, PL)
            for target in range(6):
                prob = index.problem(target)
                if prob.n_events == 0:
                    continue
                a0 = np.full(prob.candidates.size, 0.5)
                _, f_pga = maximize(prob, a0, self.cfg.solver)
                res = optimize.minimize(
                    lambda x: -prob.loglik(x), a0, jac=lambda x: -prob.gradient(x),
                    method="L-BFGS-B", bounds=[(0, UPPER)] * a0.size,
                    options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 5000},
                )
                assert f_pga >= -res.fun - 1e-5 * max(1.0, abs(res.fun))

    @pytest.mark.invariant
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_box_and_sparsity(self, seed, sparsity):
        rng = np.random.default_rng(seed)
        cs = random_instance(rng, n_users=6, n_cascades=10)
        cfg = InferenceConfig(incubation=PL, sparsity=sparsity)
        for target in range(6):
            src, p = infer_column(target, cs, cfg, n_users=6)
            assert p.size <= sparsity
            assert np.all((p >= 0) & (p <= UPPER))
            assert target not in src.tolist()

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        cs = random_instance(rng)
        a = infer_column(3, cs, self.cfg, n_users=6)
        b = infer_column(3, cs, self.cfg, n_users=6)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


def star_auc(seed):
    truth = planted_star(20, 20, (0.3, 0.8), rng=seed)
    world = PlantedWorld(truth, PL, n_videos=200, rng_seed=seed)
    tr = generate(world, 200 * HOUR)
    cs = [c.first_infections() for c in cascades(tr).values()]
    got = infer_graph(cs, 20, InferenceConfig(incubation=PL)).dense()
    t = truth.dense()
    off = ~np.eye(20, dtype=bool)
    pos, neg = got[(t > 0) & off], got[(t == 0) & off]
    hub_leaf = got[0, 1:][t[0, 1:] > 0]
    auc = mannwhitneyu(pos, neg).statistic / (pos.size * neg.size)
    hub_auc = mannwhitneyu(hub_leaf, neg).statistic / (hub_leaf.size * neg.size)
    return auc, hub_auc


class TestGraph:
    def test_planted_star_recovery(self):
        auc, hub_auc = star_auc(0)
        assert auc >= 0.9
        assert hub_auc >= 0.9

    def test_parallel_matches_serial(self):
        rng = np.random.default_rng(8)
        cs = random_instance(rng, n_users=6, n_cascades=10)
        cfg = InferenceConfig(incubation=PL)
        a = infer_graph(cs, 6, cfg)
        b = infer_graph(cs, 6, cfg, workers=2)
        assert a.edges() == b.edges()

    def test_dump_load_round_trip(self):
        g = TransmissionGraph.from_dense(np.array([[0, 0.5, 0], [0.25, 0, 0.125], [0, 0, 0]]),
                                         relearn_time=36000.0, config_hash="abc")
        buf = io.StringIO()
        g.dump(buf)
        back = TransmissionGraph.load(io.StringIO(buf.getvalue()))
        assert back.edges() == g.edges()
        assert (back.n_users, back.relearn_time, back.config_hash) == (3, 36000.0, "abc")

    def test_dump_with_keys(self):
        g = TransmissionGraph.from_dense(np.array([[0, 0.5], [0, 0]]))
        buf = io.StringIO()
        g.dump(buf, ("alice", "bob"))
        assert buf.getvalue().splitlines()[-1] == "alice,bob,0.5"
        back = TransmissionGraph.load(io.StringIO(buf.getvalue()), ("alice", "bob"))
        assert back.edges() == [(0, 1, 0.5)]

    def test_rejects_bad_probabilities(self):
        with pytest.raises(ValueError):
            TransmissionGraph(2, {1: ([0], [1.5])})

    def test_support(self):
        g = TransmissionGraph.from_dense(np.array([[0, 0.5, 0], [0, 0, 0], [0, 0, 0]]))
        assert g.support().tolist() == [0, 1]


class TestSchedule:
    cfg = InferenceConfig()

    def test_sixty_hours(self):
        assert len(inference_schedule(0, 60 * HOUR, self.cfg)) == 6

    def test_short_span(self):
        sched = inference_schedule(5.0, 5 * HOUR, self.cfg)
        assert [t for t, _ in sched] == [5.0]

    def test_offsets(self):
        sched = inference_schedule(0, 25 * HOUR, self.cfg)
        assert [t / HOUR for t, _ in sched] == [0, 10, 20]
        assert all(spec.end == t and spec.width == 60 * HOUR for t, spec in sched)

    def test_empty_span(self):
        with pytest.raises(ValueError):
            inference_schedule(5, 5, self.cfg)
