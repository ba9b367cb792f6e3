import math

import numpy as np
import pytest

from oracles import dense_sag, peek
from sagcrf.baselines import BaselineConfig, grid_tune
from sagcrf.crf import local_grad, local_nll
from sagcrf.errors import ContractError, NonFiniteError
from sagcrf.features import Dataset, synth_generate
from sagcrf.memory import GradientMemory
from sagcrf.objective import CrfObjective
from sagcrf.runlog import EvalCounter
from sagcrf.sag import (
    GRAD_SQ_GUARD,
    SagConfig,
    UniformPolicy,
    line_search,
    lipschitz_line_search,
    make_policy,
    sag_step,
    sag_train,
    refresh_memory,
    should_stop,
)
from sagcrf.weights import ScaledWeights


def quadratic_probe(c, w, g):
    return lambda L: 0.5 * c * (w - g / L) ** 2


class TestLineSearch:
    def test_exact_constant_accepted(self):
        c, w = 3.0, 2.0
        f, g = 0.5 * c * w * w, c * w
        L, b = line_search(f, g * g, quadratic_probe(c, w, g), c)
        assert (L, b) == (c, 0)

    def test_three_doublings(self):
        c, w = 3.0, 2.0
        f, g = 0.5 * c * w * w, c * w
        counter = EvalCounter(1)
        L, b = line_search(f, g * g, quadratic_probe(c, w, g), c / 8, counter)
        assert L == c and b == 3
        assert counter.probes == 4 and counter.evals == 4

    def test_postcondition(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            c, w, L0 = rng.uniform(0.1, 10), rng.normal(), rng.uniform(1e-3, 10)
            f, g = 0.5 * c * w * w, c * w
            probe = quadratic_probe(c, w, g)
            L, _ = line_search(f, g * g, probe, L0)
            assert probe(L) <= f - g * g / (2 * L)

    def test_too_many_doublings(self):
        with pytest.raises(NonFiniteError):
            line_search(0.0, 1.0, lambda L: math.nan, 1.0)

    def test_needs_positive_start(self):
        with pytest.raises(ContractError):
            line_search(1.0, 1.0, lambda L: 0.0, 0.0)

    def test_crf_curvature_oracle(self, small_ds):
        rng = np.random.default_rng(4)
        for i in range(8):
            cs = small_ds.compiled[i]
            w = rng.normal(scale=0.5, size=len(cs.support))
            f, g, _ = local_grad(cs, w)
            L0 = 1e-3
            L, _ = lipschitz_line_search(cs, f, g, w, L0)
            # L/2 was rejected, so the curvature of t -> f(w - t u) must reach L/2
            # somewhere on the segment that probe covered
            gn = np.linalg.norm(g)
            u = g / gn
            ts = np.linspace(0.0, 2 * gn / L, 4001)
            h = ts[1] - ts[0]
            vals = np.array([local_nll(cs, w - t * u) for t in ts])
            curvature = np.max(np.diff(vals, 2)) / h**2
            assert L <= 2 * curvature * (1 + 1e-3)


class TestSagStep:
    def test_plain_gradient_step(self):
        g = np.array([1.0, -2.0, 0.5])
        w0 = np.array([0.3, 0.1, -0.2])
        sw = ScaledWeights(3, direction=g.copy(), w0=w0)
        sag_step(sw, 1, 0.25, 0.0)
        np.testing.assert_allclose(sw.materialize(), w0 - 0.25 * g, atol=1e-15)

    def test_flip_guard(self):
        with pytest.raises(ContractError):
            sag_step(ScaledWeights(2, direction=np.zeros(2)), 1, 2.0, 0.5)

    def test_global_estimate_halves_over_n(self):
        n = 37
        pol = UniformPolicy(n, np.random.default_rng(0), initial_lg=3.0)
        for _ in range(n):
            pol.end_iteration()
        assert pol.Lg == pytest.approx(1.5, rel=1e-13)

    def test_fresh_memory_gives_full_gradient_step(self, small_ds):
        lam = 0.05
        obj = CrfObjective(small_ds, lam)
        w = np.random.default_rng(2).normal(scale=0.2, size=small_ds.D)
        mem = GradientMemory(small_ds.compiled, small_ds.D, "mixed")
        for i, cs in enumerate(small_ds.compiled):
            _, g, marg = local_grad(cs, w[cs.support])
            mem.update(i, g, marg)
        sw = ScaledWeights(small_ds.D, direction=mem.d, w0=w)
        alpha = 0.7
        sag_step(sw, mem.m, alpha, lam)
        _, grad = obj.value_and_grad(w)
        np.testing.assert_allclose(sw.materialize(), w - alpha * grad, atol=1e-10)

    def test_step_never_exceeds_inverse_lambda(self, compact_ds):
        lam = 0.5
        alphas = []

        class Spy(UniformPolicy):
            def step_size(self, lam_):
                a = super().step_size(lam_)
                alphas.append(a)
                return a

        obj = CrfObjective(compact_ds, lam)
        sag_train(obj, None, SagConfig(lam, max_passes=2), policy=Spy(compact_ds.n, np.random.default_rng(0)))
        assert max(alphas) <= 1 / lam


class TestShouldStop:
    def test_needs_full_coverage(self):
        assert not should_stop(np.zeros(3), 2, 3, np.zeros(3), 0.1, 1.0)

    def test_at_optimum(self):
        w = np.array([1.0, -2.0])
        lam, n = 0.3, 4
        d = -n * lam * w
        assert should_stop(d, n, n, w, lam, 1e-12)

    def test_threshold(self):
        assert not should_stop(np.array([4.0]), 2, 2, np.array([0.0]), 0.0, 1.0)


def test_refresh_makes_direction_exact(compact_ds):
    obj = CrfObjective(compact_ds, 0.05)
    mem = GradientMemory(obj.seqs, obj.D)
    sw = ScaledWeights(obj.D, direction=mem.d, w0=np.random.default_rng(0).normal(scale=0.1, size=obj.D))
    counter = EvalCounter(obj.n)
    w = refresh_memory(obj, mem, sw, counter)
    assert counter.evals == obj.n and counter.probes == 0
    _, grad = obj.value_and_grad(w)
    np.testing.assert_allclose(mem.d / obj.n + obj.lam * w, grad, atol=1e-12)
    np.testing.assert_array_equal(sw.materialize(), w)


class TestLazyVersusDense:
    @pytest.mark.parametrize("name", ["sag", "sag-nus-star", "sag-nus"])
    def test_trajectories_agree(self, compact_ds, name):
        lam = 1.0 / compact_ds.n
        obj = CrfObjective(compact_ds, lam)
        iters = 10 * compact_ds.n
        ref = dense_sag(obj, make_policy(name, obj.n, 3), iters, lam)
        got = []
        sag_train(obj, None, SagConfig(lam, delta=1e-300, max_passes=1000, seed=3),
                  policy=make_policy(name, obj.n, 3),
                  on_iteration=lambda t, sw: got.append(peek(sw)),
                  stop_when=lambda row: len(got) >= iters)
        got = np.array(got[:iters])
        assert np.max(np.abs(got - np.array(ref))) <= 1e-8

    def test_two_example_toy(self):
        ds = Dataset.from_raw([([("a",), ("b",)], ["x", "y"]), ([("b",)], ["x"])], templates=("w0",))
        obj = CrfObjective(ds, 0.1)
        ref = dense_sag(obj, make_policy("sag", 2, 0), 100, 0.1)
        got = []
        sag_train(obj, None, SagConfig(0.1, delta=1e-300, max_passes=1000), policy=make_policy("sag", 2, 0),
                  on_iteration=lambda t, sw: got.append(peek(sw)), stop_when=lambda row: len(got) >= 100)
        np.testing.assert_allclose(np.array(got[:100]), np.array(ref), atol=1e-8)


class TestTraining:
    def test_deterministic(self, compact_ds):
        obj = CrfObjective(compact_ds)
        runs = [sag_train(obj, None, SagConfig(obj.lam, max_passes=5, seed=9),
                          policy=make_policy("sag-nus-star", obj.n, 9)) for _ in range(2)]
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        assert runs[0][1].rows == runs[1][1].rows
        assert runs[0][1].probes == runs[1][1].probes

    def test_single_example_is_monotone(self):
        # without a regularizer the step direction is the searched one, so each
        # accepted step satisfies the sufficient-decrease test on the objective itself
        ds = synth_generate(1, 3, "constant:6", seed=4, templates=("bias", "w0", "suf1"))
        obj = CrfObjective(ds, 0.0)
        _, log = sag_train(obj, None, SagConfig(0.0, max_passes=200, delta=1e-10))
        f = log.column("objective")
        first_pass = np.searchsorted(log.column("passes"), 1.0)
        assert np.all(np.diff(f[first_pass:]) <= 1e-12)
        assert f[-1] < 0.01 * f[0]

    def test_single_example_with_ridge_settles(self):
        # with lam > 0 the search direction (data gradient) and the step direction
        # (data gradient + lam w) differ, so the decrease is not guaranteed per step
        ds = synth_generate(1, 3, "constant:6", seed=4, templates=("bias", "w0", "suf1"))
        obj = CrfObjective(ds, 0.01)
        _, log = sag_train(obj, None, SagConfig(0.01, max_passes=200, delta=1e-10))
        f = log.column("objective")
        assert np.all(f[len(f) // 2:] <= 0.15 * f[0])

    def test_evaluation_accounting(self, compact_ds):
        obj = CrfObjective(compact_ds)
        for name in ("sag", "sag-nus-star", "sag-nus"):
            _, log = sag_train(obj, None, SagConfig(obj.lam, max_passes=4), policy=make_policy(name, obj.n, 0))
            # one gradient per iteration, every other evaluation is a line-search probe
            assert log.final.evals - log.probes[-1] == log.meta["iterations"]

    def test_skipped_iterations_cost_one_evaluation(self, compact_ds):
        obj = CrfObjective(compact_ds)
        pol = make_policy("sag-nus-star", obj.n, 0)
        costs = []
        prev = [0]

        def track(t, sw):
            costs.append(pol.last)

        _, log = sag_train(obj, None, SagConfig(obj.lam, max_passes=10), policy=pol, on_iteration=track)
        skipped = sum(c["skipped"] for c in costs)
        searched = sum(c["searched"] for c in costs)
        backtracks = sum(c["backtracks"] for c in costs)
        assert skipped > 0
        assert log.probes[-1] == searched + backtracks
        assert log.final.evals == len(costs) + searched + backtracks

    def test_stopping_rule(self, compact_ds):
        obj = CrfObjective(compact_ds, 0.1)
        w, log = sag_train(obj, None, SagConfig(0.1, delta=1e-4, max_passes=300))
        assert log.meta["stopped"]
        _, grad = obj.value_and_grad(w)
        assert np.max(np.abs(grad)) <= 2e-4

    def test_log_rows_at_each_pass(self, compact_ds):
        obj = CrfObjective(compact_ds)
        _, log = sag_train(obj, None, SagConfig(obj.lam, max_passes=6, delta=1e-300))
        passes = log.column("passes")
        assert passes[0] == 0
        assert len(passes) >= 7
        assert np.all(np.diff(passes) > 0)
        for k in range(1, 6):
            below = passes[passes <= k]
            assert k - below.max() < (2 + 60) / obj.n

    def test_logger_contract(self, compact_ds):
        calls = []
        obj = CrfObjective(compact_ds)
        sag_train(obj, None, SagConfig(obj.lam, max_passes=3), logger=lambda *a: calls.append(a))
        assert len(calls) >= 4
        assert all(len(c) == 4 for c in calls)

    def test_lambda_mismatch(self, compact_ds):
        with pytest.raises(ContractError):
            sag_train(CrfObjective(compact_ds, 0.1), None, SagConfig(0.2))

    @pytest.mark.parametrize("kw", [dict(lam=-1.0), dict(lam=0.1, delta=0.0), dict(lam=0.1, max_passes=0.5)])
    def test_config_contracts(self, kw):
        with pytest.raises(ContractError):
            SagConfig(**kw)

    def test_warm_start(self, compact_ds):
        obj = CrfObjective(compact_ds)
        mem = GradientMemory(obj.seqs, obj.D)
        w, _ = sag_train(obj, mem, SagConfig(obj.lam, max_passes=3))
        mem2 = GradientMemory(obj.seqs, obj.D)
        _, log = sag_train(obj, mem2, SagConfig(obj.lam, max_passes=1), w0=w, warm_start=mem.export())
        assert log.rows[0].objective == pytest.approx(obj.value(w))
        assert mem2.m >= mem.m > 0

    def test_beats_constant_step_sg(self, bench_split):
        train, _ = bench_split
        obj = CrfObjective(train)
        _, sag_log = sag_train(obj, None, SagConfig(obj.lam, max_passes=30, delta=1e-300))
        tuned = grid_tune(obj, BaselineConfig("sg", lam=obj.lam, max_passes=30), grid=(1e-2, 1e-1, 1.0))
        assert sag_log.final.objective < tuned.best_log.final.objective


def test_guard_constant():
    assert GRAD_SQ_GUARD == 1e-8
