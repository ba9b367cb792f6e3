import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from sagcrf.errors import ContractError
from sagcrf.nus import (
    FenwickTree,
    LegacyNusPolicy,
    LipschitzState,
    NusSampler,
    NusStarPolicy,
    nus_sample,
    nus_step_size,
    on_selected,
)


def fixed_search(L_out, backtracks=0):
    return lambda L0: (L_out if L_out is not None else L0, backtracks)


class TestFenwick:
    @given(st.integers(1, 40), st.lists(st.tuples(st.integers(0, 10**6), st.floats(0.0, 100.0)), max_size=60))
    def test_prefix_sums_match_numpy(self, n, updates):
        tree = FenwickTree(n)
        ref = np.zeros(n)
        for i, v in updates:
            tree.set(i % n, v)
            ref[i % n] = v
            assert tree.total == pytest.approx(ref.sum(), abs=1e-9)
        for i in range(n + 1):
            assert tree.prefix(i) == pytest.approx(ref[:i].sum(), abs=1e-9)

    @given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=30), st.floats(0.0, 1.0, exclude_max=True))
    def test_find_inverts_prefix(self, values, frac):
        tree = FenwickTree(len(values))
        for i, v in enumerate(values):
            tree.set(i, v)
        if tree.total <= 0:
            return
        u = frac * tree.total
        i = tree.find(u)
        assert values[i] > 0
        assert tree.prefix(i) <= u + 1e-9
        assert tree.prefix(i + 1) > u - 1e-9

    def test_rebuild_keeps_sums(self):
        tree = FenwickTree(7)
        for i in range(7):
            tree.set(i, 0.1 * (i + 1))
        before = [tree.prefix(i) for i in range(8)]
        tree.rebuild()
        np.testing.assert_allclose([tree.prefix(i) for i in range(8)], before, atol=1e-12)
        tree.rebuild(np.ones(7))
        assert tree.total == 7.0

    def test_contracts(self):
        with pytest.raises(ContractError):
            FenwickTree(0)
        with pytest.raises(ContractError):
            FenwickTree(2).set(0, -1.0)


class TestLipschitzState:
    @given(st.lists(st.tuples(st.integers(0, 9), st.floats(1e-3, 1e3)), min_size=1, max_size=80))
    def test_running_mean_and_max(self, updates):
        state = LipschitzState(10, rebuild_every=7)
        for i, v in updates:
            state.set(i, v)
            seen = state.L[state.seen]
            assert state.Lbar == pytest.approx(seen.mean(), rel=1e-12)
            assert state.Lmax == seen.max()
            assert state.Lmax >= state.Lbar * (1 - 1e-12)
            assert state.tree.total == pytest.approx(seen.sum(), abs=1e-9)

    def test_cold_start_uses_global_estimate(self):
        assert LipschitzState(4, initial_lg=3.0).Lbar == 3.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ContractError):
            LipschitzState(3).set(0, 0.0)


class TestSampler:
    def test_uniform_before_any_visit(self):
        s = NusSampler(LipschitzState(5), np.random.default_rng(0))
        np.testing.assert_allclose(s.probabilities(), 0.2)
        draws = np.bincount([nus_sample(s) for _ in range(5000)], minlength=5)
        assert stats.chisquare(draws).pvalue > 0.01

    def test_equal_estimates_are_uniform(self):
        state = LipschitzState(4)
        for i in range(4):
            state.set(i, 2.5)
        np.testing.assert_allclose(NusSampler(state, np.random.default_rng(0)).probabilities(), 0.25)

    def test_mixture_probabilities(self):
        state = LipschitzState(3)
        for i, v in enumerate((1.0, 1.0, 2.0)):
            state.set(i, v)
        s = NusSampler(state, np.random.default_rng(7))
        np.testing.assert_allclose(s.probabilities(), np.array([7, 7, 10]) / 24, atol=1e-15)

    def test_weighted_branch_only_reaches_seen(self):
        state = LipschitzState(6)
        state.set(4, 1.0)
        s = NusSampler(state, np.random.default_rng(1), weighted_prob=1.0)
        assert {s.sample() for _ in range(200)} == {4}


class TestOnSelected:
    def test_first_visit_halves_mean(self):
        state = LipschitzState(5)
        state.set(0, 4.0)
        info = on_selected(state, 1, None)
        assert info["first"]
        assert state.L[1] == 2.0

    def test_first_visit_searches_from_half_mean(self):
        state = LipschitzState(5, initial_lg=4.0)
        starts = []
        on_selected(state, 2, lambda L0: (starts.append(L0), (L0 * 4, 2))[1])
        assert starts == [2.0]
        assert state.L[2] == 8.0  # no decay on the first visit

    def test_decay_after_search(self):
        state = LipschitzState(3)
        state.set(0, 5.0)
        on_selected(state, 0, fixed_search(8.0, backtracks=1), skipping=True)
        assert state.L[0] == pytest.approx(7.2)
        assert state.xi[0] == 0

    def test_skip_schedule(self):
        state = LipschitzState(2)
        state.set(0, 1.0)
        for k in (1, 2, 3):
            info = on_selected(state, 0, fixed_search(None))
            assert info["searched"] and not info["skipped"]
            assert state.xi[0] == k
            assert state.skip_remaining[0] == 2 ** (k - 1)
            for _ in range(2 ** (k - 1)):
                L_before = state.L[0]
                info = on_selected(state, 0, fixed_search(99.0))
                assert info["skipped"]
                assert state.L[0] == L_before
        assert state.skip_remaining[0] == 0

    def test_xi_three_gives_four_skips(self):
        state = LipschitzState(1)
        state.set(0, 1.0)
        state.xi[0] = 2
        on_selected(state, 0, fixed_search(None))
        assert state.xi[0] == 3 and state.skip_remaining[0] == 4

    def test_backtrack_resets_counter(self):
        state = LipschitzState(1)
        state.set(0, 1.0)
        state.xi[0] = 5
        on_selected(state, 0, fixed_search(2.0, backtracks=1))
        assert state.xi[0] == 0 and state.skip_remaining[0] == 0

    def test_no_search_when_gradient_tiny(self):
        state = LipschitzState(2)
        state.set(0, 3.0)
        info = on_selected(state, 0, None)
        assert not info["searched"] and state.L[0] == 3.0


class TestStepSize:
    @pytest.mark.parametrize("Lmax,Lbar,lam,alpha", [(2.0, 2.0, 0.0, 0.5), (4.0, 1.0, 0.0, 0.625),
                                                     (3.0, 1.0, 1.0, 0.375)])
    def test_values(self, Lmax, Lbar, lam, alpha):
        assert nus_step_size(Lmax, Lbar, lam) == pytest.approx(alpha, abs=1e-15)

    def test_rejects_nonpositive(self):
        with pytest.raises(ContractError):
            nus_step_size(0.0, 1.0, 0.1)


class TestPolicies:
    def test_star_policy_reports_last(self):
        p = NusStarPolicy(3, np.random.default_rng(0), initial_lg=2.0)
        p.process(1, True, fixed_search(None))
        assert p.last["first"] and p.state.L[1] == 1.0
        assert p.step_size(0.0) == pytest.approx(1.0)
        assert "skipping" in p.metadata()

    def test_legacy_estimates(self):
        p = LegacyNusPolicy(4, np.random.default_rng(0))
        p.process(2, True, fixed_search(None))
        assert p.state.L[2] == 1.0
        p.process(2, False, fixed_search(None))
        assert p.state.L[2] == 0.5

    def test_legacy_weighting_grows_with_coverage(self):
        p = LegacyNusPolicy(4, np.random.default_rng(0))
        p.sample()
        assert p.sampler.weighted_prob == 0.0
        for i in range(4):
            p.process(i, True, fixed_search(float(i + 1)))
        p.sample()
        assert p.sampler.weighted_prob == 0.5
        # full coverage: L_m is the mean
        assert p.step_size(0.0) == pytest.approx(1.0 / 2.5)

    def test_legacy_step_before_full_coverage(self):
        p = LegacyNusPolicy(4, np.random.default_rng(0))
        p.process(0, True, fixed_search(2.0))
        p.process(1, True, fixed_search(6.0))
        Lm = 0.5 * 4.0 + 0.5 * 6.0
        assert p.step_size(0.5) == pytest.approx(1.0 / (Lm + 0.5))
