from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from specdiff.errors import ContractError, ParameterError, TrainingDivergedError
from specdiff.policy import FixedController, run_episode
from specdiff.rng import RngStreams
from specdiff.scheduler import (K_CHOICES, ActionSpec, PolicyNetwork, PPOConfig, RewardConfig,
                                SchedulerAction, SchedulerObservation, SchedulerTrainConfig,
                                StageRule, Transition, compute_gae, final_reward, load_scheduler,
                                log_prob_of_action, make_scheduler_net, policy_act,
                                ppo_loss_and_grad, ppo_update, process_reward, reward_scale,
                                run_episode_with_scheduler, save_scheduler, squashed_log_density,
                                stage_of, train_scheduler)


def _obs(rng, env_dim=4, act_dim=6):
    return SchedulerObservation(rng.standard_normal(env_dim), rng.standard_normal(act_dim),
                                float(rng.random()))


class TestRewards:
    def test_final_discrete(self):
        cfg = RewardConfig(outcome_kind="discrete")
        assert final_reward(True, cfg) == 100
        assert final_reward(False, cfg) == -100

    def test_final_continuous(self):
        cfg = RewardConfig()
        assert final_reward(1.0, cfg) == 100
        assert final_reward(0.8, cfg) == pytest.approx(60, abs=1e-12)
        assert final_reward(0.5, cfg) == 0
        with pytest.raises(ParameterError):
            final_reward(1.2, cfg)

    def test_process(self):
        assert process_reward(0, 50, 100, 0.5) == 0
        assert process_reward(45, 50, 100, 0.5) == pytest.approx(0.675, abs=1e-15)
        assert process_reward(30, 30, 30, 0.25) == 0.5
        assert process_reward(0, 0, 100, 0.5) == 0
        with pytest.raises(ContractError):
            process_reward(5, 4, 100, 0.5)

    def test_scale(self):
        assert reward_scale(100, 400, 8) == Fraction(1, 2)
        assert reward_scale(100, 8, 8) == 25
        assert reward_scale(100, 401, 8) == Fraction(25, 51)
        assert RewardConfig(100, t_max=401, delta_t=8).expected_updates == 51

    @settings(max_examples=200, deadline=None)
    @given(acc=st.integers(0, 50), extra=st.integers(0, 50), n_diff=st.integers(50, 500))
    def test_process_bounded(self, acc, extra, n_diff):
        lam = 0.3
        r = process_reward(acc, acc + extra, n_diff, lam)
        assert 0 <= r <= 2 * lam + 1e-15


class TestStages:
    @pytest.mark.parametrize("t,stage", [(90, "early"), (50, "mid"), (10, "late"), (80, "mid"),
                                         (20, "late"), (21, "mid"), (100, "early"), (1, "late")])
    def test_examples(self, t, stage):
        assert stage_of(t, 100) == stage

    @pytest.mark.parametrize("b", [(0.8, 0.2), (0.0, 0.5), (0.5, 1.0)])
    def test_invalid(self, b):
        with pytest.raises(ParameterError):
            stage_of(5, 10, b)

    def test_rule(self):
        rule = StageRule(SchedulerAction(2.0, 0.4, (6, 4, 2)), 100)
        assert rule(95).draft_horizon == 6
        assert rule(50).draft_horizon == 4
        p = rule(5)
        assert (p.draft_horizon, p.accept_threshold, p.sigma_scale) == (2, 0.4, 2.0)

    @pytest.mark.parametrize("kw", [dict(sigma_scale=0.0), dict(accept_threshold=1.5),
                                    dict(k_stage=(1, 2)), dict(k_stage=(1, -2, 3))])
    def test_action_validation(self, kw):
        base = dict(sigma_scale=1.0, accept_threshold=0.5, k_stage=(1, 2, 3))
        with pytest.raises(ParameterError):
            SchedulerAction(**{**base, **kw})


class TestPolicyNetwork:
    def test_zero_weights_give_midpoint(self):
        net = PolicyNetwork(4, 6)
        net.params[:] = 0.0
        action, raw, _, value = policy_act(net, _obs(np.random.default_rng(0)), deterministic=True)
        assert action.sigma_scale == pytest.approx(5.5)
        assert action.accept_threshold == pytest.approx(0.525)
        assert action.k_stage == (8, 8, 8)
        assert value == 0.0

    def test_same_rng_same_output(self):
        net = PolicyNetwork(4, 6, seed=3)
        obs = _obs(np.random.default_rng(1))
        a = policy_act(net, obs, np.random.default_rng(9))
        b = policy_act(net, obs, np.random.default_rng(9))
        assert a[0] == b[0] and a[2] == b[2] and a[3] == b[3]
        np.testing.assert_array_equal(a[1].u, b[1].u)

    def test_actions_within_bounds(self):
        net = PolicyNetwork(4, 6, seed=0, init_log_std=1.0)
        obs = _obs(np.random.default_rng(2))
        means, logits, _ = net.forward(*net.observation_vector(obs))
        rng = np.random.default_rng(0)
        u = means + np.exp(net.log_std) * rng.standard_normal((100_000, 2)) * 3
        y = net.spec.squash(u)
        for j, (_, lo, hi) in enumerate(net.spec.boxes):
            assert y[:, j].min() >= lo and y[:, j].max() <= hi
        for _ in range(200):
            action, *_ = policy_act(net, obs, rng)
            assert 1 <= action.sigma_scale <= 10
            assert 0.05 <= action.accept_threshold <= 1
            assert all(k in K_CHOICES for k in action.k_stage)

    @pytest.mark.parametrize("mean,log_std", [(0.0, -0.5), (1.2, 0.3), (-2.0, -1.0)])
    def test_squashed_density_integrates_to_one(self, mean, log_std):
        total, _ = integrate.quad(lambda y: np.exp(squashed_log_density(y, mean, log_std, 1.0, 10.0)),
                                  1.0, 10.0, limit=400, points=[1.0 + 9 * (np.tanh(mean) + 1) / 2])
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_log_prob_matches_density(self):
        spec = ActionSpec(boxes=(("sigma_scale", 1.0, 10.0),), choices=(("k", (0, 2, 4)),))
        net = PolicyNetwork(2, 2, spec, seed=0)
        means = np.array([[0.4]])
        logits = np.array([[0.1, -0.3, 0.5]])
        u = np.array([[0.9]])
        lp = log_prob_of_action(net, means, logits, u, np.array([[2]]))[0]
        y = spec.squash(u)[0, 0]
        expected = (squashed_log_density(y, 0.4, net.log_std[0], 1.0, 10.0)
                    + logits[0, 2] - np.log(np.exp(logits[0]).sum()))
        assert lp == pytest.approx(expected, abs=1e-9)

    def test_encoder_separation(self):
        net = PolicyNetwork(4, 6, seed=1)
        rng = np.random.default_rng(0)
        env, act, prog = rng.standard_normal((1, 4)), rng.standard_normal((1, 6)), np.array([[0.3]])
        base = net.trunk_input(env, act, prog)
        e1, e2, _ = net.enc
        moved = net.trunk_input(env + 1.0, act, prog)
        np.testing.assert_array_equal(moved[:, e1:], base[:, e1:])
        assert np.any(moved[:, :e1] != base[:, :e1])
        moved = net.trunk_input(env, act + 1.0, prog)
        np.testing.assert_array_equal(moved[:, :e1], base[:, :e1])
        np.testing.assert_array_equal(moved[:, e1 + e2:], base[:, e1 + e2:])
        moved = net.trunk_input(env, act, prog + 0.5)
        np.testing.assert_array_equal(moved[:, :e1 + e2], base[:, :e1 + e2])

    def test_dimension_check(self):
        net = PolicyNetwork(4, 6)
        with pytest.raises(ParameterError):
            net.forward(np.zeros(3), np.zeros(6), np.zeros(1))

    def test_warm_start(self):
        net = PolicyNetwork(4, 6, seed=0)
        net.params[:] = 0.0
        net.warm_start({"sigma_scale": 2.0, "accept_threshold": 0.3, "k_early": 16,
                        "k_mid": 8, "k_late": 2}, confidence=20.0)
        action, *_ = policy_act(net, _obs(np.random.default_rng(0)), deterministic=True)
        assert action.sigma_scale == pytest.approx(2.0)
        assert action.accept_threshold == pytest.approx(0.3)
        assert action.k_stage == (16, 8, 2)
        with pytest.raises(ParameterError):
            net.warm_start({"sigma_scale": 1.0})

    def test_save_load(self, tmp_path):
        net = PolicyNetwork(4, 6, seed=5)
        save_scheduler(net, tmp_path / "s.ckpt")
        back = load_scheduler(tmp_path / "s.ckpt")
        np.testing.assert_array_equal(back.params, net.params)
        assert back.spec == net.spec


def _buffer(net, n, rng):
    buf = []
    for i in range(n):
        obs = _obs(rng)
        _, raw, lp, v = policy_act(net, obs, rng)
        buf.append(Transition(obs.env_state, obs.recent_actions, obs.progress, raw.u, raw.idx,
                              lp, v, reward=float(rng.normal()), done=(i % 5 == 4)))
    return buf


def _batch(net, buf, adv):
    env = np.array([b.env_state for b in buf])
    act = np.array([b.recent_actions for b in buf])
    prog = np.array([[b.progress] for b in buf])
    u = np.array([b.u for b in buf])
    idx = np.array([b.idx for b in buf])
    old = np.array([b.log_prob for b in buf])
    return env, act, prog, u, idx, old, adv, np.array([b.reward for b in buf])


class TestPPO:
    def test_gae_single_transition(self):
        adv, ret = compute_gae([1.0], [0.3], [True], gamma=1.0, lam=1.0)
        assert adv[0] == pytest.approx(0.7)
        assert ret[0] == pytest.approx(1.0)

    def test_gae_resets_at_episode_end(self):
        adv, _ = compute_gae([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [False, True, True], 1.0, 1.0)
        np.testing.assert_allclose(adv, [3.0, 2.0, 3.0])

    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        net = PolicyNetwork(4, 6, seed=2)
        net.params += 0.05 * rng.standard_normal(net.num_params)
        buf = _buffer(net, 12, rng)
        batch = _batch(net, buf, rng.standard_normal(12))
        lp_old = batch[5] + 0.1 * rng.standard_normal(12)
        batch = batch[:5] + (lp_old,) + batch[6:]
        cfg = PPOConfig(clip_eps=50.0, entropy_coef=0.01, value_coef=0.5)
        _, grad, _ = ppo_loss_and_grad(net, batch, cfg)
        h = 1e-6
        coords = rng.choice(net.num_params, 150, replace=False)
        errs = []
        for i in coords:
            old = net.params[i]
            net.params[i] = old + h
            up = ppo_loss_and_grad(net, batch, cfg)[0]
            net.params[i] = old - h
            dn = ppo_loss_and_grad(net, batch, cfg)[0]
            net.params[i] = old
            fd = (up - dn) / (2 * h)
            errs.append(abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-7))
        assert max(errs) <= 1e-4

    def test_zero_clip_gives_zero_policy_gradient(self):
        rng = np.random.default_rng(1)
        net = PolicyNetwork(4, 6, seed=1)
        buf = _buffer(net, 10, rng)
        batch = _batch(net, buf, rng.standard_normal(10))
        _, grad, info = ppo_loss_and_grad(net, batch, PPOConfig(clip_eps=0.0, value_coef=0.0))
        np.testing.assert_allclose(info["ratio"], 1.0, atol=1e-12)
        np.testing.assert_array_equal(grad, 0.0)

    def test_first_epoch_ratio_is_one(self):
        rng = np.random.default_rng(2)
        net = PolicyNetwork(4, 6, seed=4)
        _, stats = ppo_update(net, _buffer(net, 20, rng), PPOConfig(minibatch=8))
        assert stats["first_ratio_max_dev"] < 1e-12
        assert len(stats["value_loss"]) == 4

    def test_nan_aborts_and_restores(self):
        rng = np.random.default_rng(3)
        net = PolicyNetwork(4, 6, seed=4)
        buf = _buffer(net, 6, rng)
        buf[2].reward = float("nan")
        before = net.params.copy()
        with pytest.raises(TrainingDivergedError):
            ppo_update(net, buf, PPOConfig(normalize_advantages=False))
        np.testing.assert_array_equal(net.params, before)

    def test_empty_buffer(self):
        with pytest.raises(ParameterError):
            ppo_update(PolicyNetwork(4, 6), [])

    def test_bandit(self):
        spec = ActionSpec(boxes=(), choices=(("arm", (0, 1)),))
        net = PolicyNetwork(1, 1, spec, enc=(4, 4, 2), hidden=(8,), seed=0)
        rng = np.random.default_rng(0)
        cfg = PPOConfig(lr=3e-2, epochs=4, minibatch=32, gamma=1.0, gae_lambda=1.0)
        obs = SchedulerObservation(np.zeros(1), np.zeros(1), 0.0)
        for it in range(40):
            buf = []
            for _ in range(64):
                action, raw, lp, v = policy_act(net, obs, rng)
                r = 1.0 if action["arm"] == 1 else -1.0
                buf.append(Transition(obs.env_state, obs.recent_actions, 0.0, raw.u, raw.idx,
                                      lp, v, r, True))
            ppo_update(net, buf, cfg, iteration=it)
        _, logits, _ = net.forward(np.zeros(1), np.zeros(1), np.zeros(1))
        p = np.exp(logits[0]) / np.exp(logits[0]).sum()
        assert p[1] > 0.95


class TestClosedLoop:
    def test_forced_action_equals_fixed_run(self, tiny_policy):
        action = SchedulerAction(1.5, 0.4, (4, 2, 1))
        net = make_scheduler_net(tiny_policy, seed=0)
        T = tiny_policy.schedule.num_steps
        _, ep, ctrl = run_episode_with_scheduler(tiny_policy, net, RewardConfig(t_max=40),
                                                 RngStreams.from_seed(5), 5, forced_action=action)
        ref = run_episode(tiny_policy, FixedController(StageRule(action, T)), RngStreams.from_seed(5), 5)
        assert len(ep.positions) == len(ref.positions)
        for p, q in zip(ep.positions, ref.positions):
            np.testing.assert_array_equal(p, q)
        assert ep.report.tally == ref.report.tally
        assert all(a == action for a in ctrl.actions)

    def test_process_reward_replay_full_acceptance(self, tiny_policy):
        from dataclasses import replace
        same = replace(tiny_policy, drafter=tiny_policy.target.copy(cost_weight=0.125))
        rc = RewardConfig(t_max=40)
        net = make_scheduler_net(same, seed=0)
        trans, ep, ctrl = run_episode_with_scheduler(same, net, rc, RngStreams.from_seed(2), 2,
                                                     keep_events=True)
        assert ep.report.acceptance_rate == 1.0
        # decisions happen every cycle here (n_exec == delta_t)
        T = same.schedule.num_steps
        expected = [(1.0 + a / T) * rc.reward_scale if p else 0.0
                    for a, p in zip(ep.report.accepted_per_cycle, ep.report.proposed_per_cycle)]
        np.testing.assert_allclose(ctrl.process_rewards, expected, rtol=1e-12)
        starts = [i for i, e in enumerate(ep.events) if e["round"] == 0]
        per_cycle = [sum(e["accepted"] for e in ep.events[lo:hi])
                     for lo, hi in zip(starts, starts[1:] + [len(ep.events)])]
        assert per_cycle == ep.report.accepted_per_cycle

    def test_process_reward_cap(self, tiny_policy):
        rc = RewardConfig(t_max=40)
        net = make_scheduler_net(tiny_policy, seed=1)
        for e in range(5):
            _, _, ctrl = run_episode_with_scheduler(tiny_policy, net, rc, RngStreams.from_seed(e), e)
            assert sum(ctrl.process_rewards) <= rc.r_final / 2
            assert ctrl.transitions[-1].done

    def test_training_smoke(self, tiny_policy, tmp_path):
        cfg = SchedulerTrainConfig(iterations=2, episodes_per_iter=2,
                                   reward=RewardConfig(t_max=40))
        net, curve = train_scheduler(tiny_policy, cfg, curve_path=tmp_path / "curve.csv")
        assert len(curve) == 2
        assert (tmp_path / "curve.csv").read_text().startswith("update,mean_return")
        net2, curve2 = train_scheduler(tiny_policy, cfg)
        np.testing.assert_array_equal(net.params, net2.params)
        assert curve == curve2
