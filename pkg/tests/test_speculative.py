import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from specdiff.denoiser import AnalyticGaussianMixtureDenoiser, MeanBiasedDenoiser
from specdiff.errors import ParameterError
from specdiff.rng import RngStreams
from specdiff.schedule import build_schedule, posterior_step
from specdiff.speculative import (AcceptanceRecord, LatentState, NfeTally, SpecParams,
                                  accept_prob, ddpm_sample, draft_rollout, log_accept_ratio,
                                  reflect_couple, speculative_denoise, speculative_denoise_batch,
                                  verify)


@pytest.fixture(scope="module")
def sched():
    return build_schedule(50, 1e-4, 0.04)


@pytest.fixture(scope="module")
def pair(sched):
    target = AnalyticGaussianMixtureDenoiser.standard_normal(1, sched)
    return target, MeanBiasedDenoiser(target, 0.2, sched)


class TestSpecParams:
    @pytest.mark.parametrize("kw", [{"draft_horizon": -1}, {"draft_horizon": 1.5},
                                    {"accept_threshold": 0.0}, {"accept_threshold": 1.1},
                                    {"sigma_scale": 0.0}, {"accept_mode": "greedy"}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            SpecParams(**kw)

    def test_round_trip(self):
        p = SpecParams(4, 0.5, 2.0, "stochastic")
        assert SpecParams(**p.to_dict()) == p


class TestAcceptRatio:
    def test_equal_means(self):
        assert log_accept_ratio(np.ones(3), np.ones(3), 0.7, np.ones(3)) == 0
        assert accept_prob(0.0) == 1.0

    def test_hand_values(self):
        la = log_accept_ratio(np.array([0.3]), np.array([0.0]), 0.5, np.array([1.0]))
        assert la == pytest.approx(-0.78, abs=1e-12)
        assert accept_prob(la) == pytest.approx(np.exp(-0.78), abs=1e-12)
        assert accept_prob(la) == pytest.approx(0.4584, abs=1e-4)
        la2 = log_accept_ratio(np.array([0.3]), np.array([0.0]), 0.5, np.array([-0.6]))
        assert la2 == pytest.approx(0.18, abs=1e-12)
        assert accept_prob(la2) == 1.0

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_nonpositive_sigma(self, sigma):
        with pytest.raises(ParameterError):
            log_accept_ratio(np.zeros(1), np.zeros(1), sigma, np.zeros(1))

    def test_density_ratio_identity(self):
        rng = np.random.default_rng(0)
        n, d = 10_000, 3
        mu_hat, mu, xi = rng.standard_normal((3, n, d))
        sigma = rng.uniform(0.05, 2.0, n)
        x = mu_hat + sigma[:, None] * xi
        direct = (stats.norm.logpdf(x, mu, sigma[:, None]).sum(-1)
                  - stats.norm.logpdf(x, mu_hat, sigma[:, None]).sum(-1))
        np.testing.assert_allclose(log_accept_ratio(mu_hat, mu, sigma, xi), direct, atol=1e-9)


class TestReflect:
    def test_examples(self):
        np.testing.assert_allclose(reflect_couple([1.5], [1.0], [0.0]), [-0.5])
        np.testing.assert_allclose(reflect_couple([1.3, 0.4], [1.0, 0.0], [0.0, 0.0]), [-0.3, 0.4],
                                   atol=1e-15)
        x = np.array([0.2, -0.9])
        np.testing.assert_array_equal(reflect_couple(x, [0.5, 0.5], [0.5, 0.5]), x)

    def test_non_finite(self):
        with pytest.raises(ParameterError):
            reflect_couple([np.nan], [0.0], [1.0])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 6))
    def test_isometry(self, seed, d):
        rng = np.random.default_rng(seed)
        x, m_r, m_s = rng.standard_normal((3, d)) * 3
        y = reflect_couple(x, m_r, m_s)
        assert np.linalg.norm(y - m_s) == pytest.approx(np.linalg.norm(x - m_r), abs=1e-10)

    def test_marginal_is_target_gaussian(self):
        rng = np.random.default_rng(11)
        m_r, m_s, sigma, n = 0.3, 0.0, 0.5, 200_000
        x = m_r + sigma * rng.standard_normal(n)
        la = log_accept_ratio(np.full((n, 1), m_r), np.full((n, 1), m_s), sigma,
                              ((x - m_r) / sigma)[:, None])
        keep = rng.random(n) <= accept_prob(la)
        out = np.where(keep, x, reflect_couple(x[:, None], [m_r], [m_s], sigma)[:, 0])
        assert stats.kstest(out, stats.norm(m_s, sigma).cdf).pvalue > 1e-3


class TestRollout:
    def test_k0_single_candidate(self, sched, pair):
        target, drafter = pair
        b = draft_rollout(target, drafter, LatentState(np.ones(1), 20), None, 0, sched,
                          np.random.default_rng(0))
        assert b.num_drafts == 0
        assert b.ts.tolist() == [19]
        assert b.seeded

    def test_truncated_at_zero(self, sched, pair):
        target, drafter = pair
        b = draft_rollout(target, drafter, LatentState(np.ones(1), 3), None, 10, sched,
                          np.random.default_rng(0))
        assert len(b.candidates) == 3
        assert b.ts.tolist() == [2, 1, 0]

    def test_negative_k(self, sched, pair):
        with pytest.raises(ParameterError):
            draft_rollout(*pair, LatentState(np.ones(1), 3), None, -1, sched,
                          np.random.default_rng(0))

    def test_candidate_structure(self, sched, pair):
        b = draft_rollout(*pair, LatentState(np.array([0.4]), 30), None, 6, sched,
                          np.random.default_rng(1))
        assert len(b.candidates) == 7
        assert np.all(np.diff(b.ts) == -1)
        np.testing.assert_allclose(b.xs, b.means + b.sigmas[:, None] * b.noises, rtol=1e-14)

    def test_identical_drafter_means_match_verifier(self, sched):
        target = AnalyticGaussianMixtureDenoiser.standard_normal(1, sched)
        b = draft_rollout(target, target, LatentState(np.array([0.4]), 30), None, 6, sched,
                          np.random.default_rng(1))
        rec, _ = verify(target, b, SpecParams(6), sched, np.random.default_rng(2))
        np.testing.assert_allclose(b.means, rec.target_means, atol=1e-12)
        assert rec.accepted.all() and rec.first_reject is None
        np.testing.assert_allclose(rec.p, 1.0)


class TestVerify:
    def test_threshold_one_rejects_first_draft(self, sched, pair):
        rng = np.random.default_rng(5)
        for _ in range(20):
            b = draft_rollout(*pair, LatentState(rng.standard_normal(1), 40), None, 5, sched, rng)
            rec, _ = verify(pair[0], b, SpecParams(5, 1.0), sched, rng)
            assert rec.accepted.tolist() == [True] + [False] * 5 or rec.p[1] == 1.0
            if rec.p[1] < 1:
                assert rec.first_reject == 1

    def test_stochastic_rate_matches_density_ratio(self, sched, pair):
        target, drafter = pair
        rng = np.random.default_rng(7)
        t, n = 25, 100_000
        x = rng.standard_normal((n, 1))
        tt = np.full(n, t)
        mu, sig = posterior_step(target.evaluate(x, tt), t, x, sched)
        mu_hat, _ = posterior_step(drafter.evaluate(x, tt), t, x, sched)
        xi = rng.standard_normal((n, 1))
        acc = rng.random(n) <= accept_prob(log_accept_ratio(mu_hat, mu, sig, xi))
        # independent estimate: E[min(1, s(x)/r(x))] with x drawn from the drafter step
        xd = mu_hat + sig * rng.standard_normal((n, 1))
        ratio = np.exp(stats.norm.logpdf(xd, mu, sig) - stats.norm.logpdf(xd, mu_hat, sig))[:, 0]
        direct = np.minimum(1, ratio)
        se = np.sqrt(acc.var() / n + direct.var() / n)
        assert abs(acc.mean() - direct.mean()) < 2 * se

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(0, 8),
           mode=st.sampled_from(["stochastic", "threshold"]))
    def test_accepted_is_prefix(self, sched, pair, seed, k, mode):
        rng = np.random.default_rng(seed)
        b = draft_rollout(*pair, LatentState(rng.standard_normal(1), 30), None, k, sched, rng)
        rec, outs = verify(pair[0], b, SpecParams(k, 0.6, accept_mode=mode), sched, rng)
        acc = rec.accepted.astype(int)
        assert acc[0] == 1
        assert np.all(np.diff(acc) <= 0)
        assert len(outs) == k + 1
        if rec.first_reject is not None:
            assert rec.first_reject == acc.sum()


class TestLoop:
    def test_full_acceptance_accounting(self):
        s = build_schedule(100)
        target = AnalyticGaussianMixtureDenoiser.standard_normal(1, s)
        drafter = MeanBiasedDenoiser(target, 0.0, s)
        _, records, tally = speculative_denoise(target, drafter, SpecParams(9), np.zeros(1), None,
                                                s, RngStreams.from_seed(0))
        assert (tally.target_passes, tally.draft_calls) == (11, 90)
        assert tally.nfe == 22.25
        assert tally.speedup_by_nfe == pytest.approx(100 / 22.25)
        assert all(r.first_reject is None for r in records)

    @pytest.mark.parametrize("seed", range(5))
    def test_k0_matches_ancestral(self, sched, pair, seed):
        s1, s2 = RngStreams.from_seed(seed), RngStreams.from_seed(seed)
        x_T = s1.latent.standard_normal(1)
        assert np.array_equal(x_T, s2.latent.standard_normal(1))
        tr1, tr2 = [], []
        x1, _, tally = speculative_denoise(*pair, SpecParams(0), x_T, None, sched, s1, trajectory=tr1)
        x2, base = ddpm_sample(pair[0], x_T, None, sched, s2, trajectory=tr2)
        np.testing.assert_array_equal(x1, x2)
        assert [t for t, _ in tr1] == [t for t, _ in tr2]
        for (_, a), (_, b) in zip(tr1, tr2):
            np.testing.assert_array_equal(a, b)
        assert tally.nfe == base.nfe == sched.num_steps

    def test_event_log_replay(self, sched, pair):
        events = []
        _, _, tally = speculative_denoise(*pair, SpecParams(6, 0.5), np.ones(1), None, sched,
                                          RngStreams.from_seed(3), events=events)
        assert sum(e["d_target_passes"] for e in events) == tally.target_passes
        assert sum(e["d_draft_calls"] for e in events) == tally.draft_calls
        assert events[-1]["t_end"] == 0
        for e in events:
            steps = e["t_start"] - e["t_end"]
            assert steps == e["accepted"] + 1 + e["coupled"]

    def test_continues_from_rejected_candidate(self, sched, pair):
        events = []
        speculative_denoise(*pair, SpecParams(8, 0.9), np.ones(1), None, sched,
                            RngStreams.from_seed(9), events=events)
        coupled = [e for e in events if e["coupled"]]
        assert coupled
        for e in coupled:
            j = e["accepted"] + 1
            assert e["t_end"] == e["t_start"] - 1 - j

    def test_schedule_callable(self, sched, pair):
        seen = []

        def source(t):
            seen.append(t)
            return SpecParams(3 if t > 25 else 0)

        _, recs, _ = speculative_denoise(*pair, source, np.ones(1), None, sched, RngStreams.from_seed(0))
        assert seen[0] == sched.num_steps
        assert len(recs) == len(seen)

    @pytest.mark.parametrize("mode", ["stochastic", "threshold"])
    def test_batch_matches_single_chain(self, sched, pair, mode):
        params = SpecParams(5, 0.4, 1.3, mode)
        x1, _, tally = speculative_denoise(*pair, params, np.array([0.3]), None, sched,
                                           RngStreams.from_seed(4))
        res = speculative_denoise_batch(*pair, params, np.array([[0.3]]), None, sched,
                                        RngStreams.from_seed(4))
        np.testing.assert_allclose(res.x0[0], x1, rtol=1e-12)
        assert res.target_passes[0] == tally.target_passes
        assert res.draft_calls[0] == tally.draft_calls


def test_tally_add_and_dict():
    a = NfeTally(3, 8, 0.125, 10)
    a.add(NfeTally(2, 8, 0.125, 10))
    d = a.to_dict()
    assert d["nfe"] == 7.0 and d["baseline_nfe"] == 20
    assert a.speedup_by_nfe == pytest.approx(20 / 7)


def test_record_counts():
    rec = AcceptanceRecord(np.zeros(4), np.ones(4), np.array([True, True, False, False]),
                           None, 2, np.zeros((4, 1)))
    assert rec.num_accepted_drafts == 1
    assert rec.num_tested_drafts == 2
