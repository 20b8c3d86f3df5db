import dataclasses
import math

import numpy as np
import pytest

from pointlab.user_model import (
    Belief,
    DesignSpaceError,
    EpisodeTerminated,
    PointingEnv,
    PointingObservation,
    Trial,
    belief_update,
    controller_input,
    detection_prob,
    read_traces,
    reset,
    run_episode,
    sample_user_params,
    step,
    study1,
    study2,
    study3,
    write_traces,
)


class TestPriorSampling:
    def test_degenerate_prior_is_constant(self):
        cfg = study1()
        cfg = study1(prior={"rho_ocular": (0.2, 0.2)})
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert cfg.sample_params(rng).rho_ocular == 0.2

    def test_inverted_range_rejected(self):
        with pytest.raises(ValueError, match="inverted"):
            study1(prior={"rho_ocular": (0.4, 0.05)})

    def test_uniform_mean(self):
        cfg = study1()
        rng = np.random.default_rng(1)
        samples = [cfg.sample_params(rng).rho_ocular for _ in range(10_000)]
        assert abs(np.mean(samples) - 0.225) < 0.01

    def test_study1_mask_varies_movement_noise_only(self):
        cfg = study1()
        rng = np.random.default_rng(2)
        draws = [sample_user_params(cfg, rng) for _ in range(50)]
        assert len({p.rho_ocular for p in draws}) == 50
        assert len({p.rho_spatial for p in draws}) == 1
        assert len({p.theta_b for p in draws}) == 1

    def test_normalize_round_trip(self):
        cfg = study3()
        rng = np.random.default_rng(3)
        params = cfg.sample_params(rng)
        theta = cfg.normalize_params(params)
        assert np.all((theta >= 0) & (theta <= 1))
        back = cfg.params_from_normalized(theta)
        assert back.rho_ocular == pytest.approx(params.rho_ocular)
        assert back.theta_pref == pytest.approx(params.theta_pref)


class TestReset:
    def test_distance_zero_puts_target_at_origin(self):
        cfg = study1()
        rng = np.random.default_rng(0)
        state = reset(Trial(0.0, 1.3, 0.1), cfg.sample_params(rng), rng)
        np.testing.assert_allclose(state.target, [0.0, 0.0], atol=1e-15)

    def test_polar_placement(self):
        rng = np.random.default_rng(0)
        state = reset(Trial(0.8, 0.0, 0.1), study1().sample_params(rng), rng)
        np.testing.assert_allclose(state.target, [0.8, 0.0], atol=1e-12)
        np.testing.assert_array_equal(state.fixation, [0.0, 0.0])

    def test_angle_symmetry(self):
        cfg = study1()
        rng = np.random.default_rng(4)
        params = cfg.sample_params(rng)
        targets = []
        for _ in range(10_000):
            trial = cfg.sample_trial(rng)
            targets.append(reset(trial, params, rng).target)
        mean = np.mean(targets, axis=0)
        assert np.all(np.abs(mean) < 0.02)

    def test_out_of_space_rejected(self):
        with pytest.raises(DesignSpaceError):
            Trial(distance=2.0, angle=0.0, width=0.1)
        with pytest.raises(DesignSpaceError):
            Trial(distance=0.5, angle=0.0, width=0.0)


def with_overrides(params, **kw):
    return dataclasses.replace(params, **kw)


class TestStep:
    def test_zero_noise_lands_on_target_and_succeeds(self):
        cfg = study1()
        params = with_overrides(cfg.sample_params(np.random.default_rng(0)), rho_ocular=0.0)
        rng = np.random.default_rng(1)
        state = reset(Trial(0.5, 0.0, 0.1), params, rng)
        state2, obs, reward, done, info = step(state, state.target.copy(), params, cfg, rng)
        np.testing.assert_allclose(state2.fixation, state.target, atol=1e-12)
        assert done and info["success"]
        assert reward < 0  # time cost only

    def test_hand_evaluated_duration_reward(self):
        cfg = study1()
        params = with_overrides(
            cfg.sample_params(np.random.default_rng(0)), rho_ocular=0.0, theta_a=0.05, theta_b=0.1
        )
        rng = np.random.default_rng(2)
        # Far small target so the episode does not terminate on this step.
        state = reset(Trial(1.0, math.pi / 2, 0.02), params, rng)
        _, _, reward, done, _ = step(state, np.array([0.5, 0.0]), params, cfg, rng)
        assert not done
        assert reward == pytest.approx(-0.125, abs=1e-12)

    def test_study3_keypress_reward_on_target(self):
        cfg = study3()
        params = with_overrides(cfg.sample_params(np.random.default_rng(0)), theta_pref=1.0, r_max=10.0)
        rng = np.random.default_rng(3)
        state = reset(Trial(0.0, 0.0, 0.1), params, rng)  # target at origin = fixation
        _, _, reward, done, info = step(state, np.array([0.0, 0.0, 1.0]), params, cfg, rng)
        assert done and info["keypress"] and info["success"]
        assert reward == pytest.approx(10.0)

    def test_study3_keypress_miss_penalised(self):
        cfg = study3()
        params = with_overrides(cfg.sample_params(np.random.default_rng(0)), theta_pref=0.8)
        rng = np.random.default_rng(3)
        state = reset(Trial(0.9, 0.3, 0.05), params, rng)
        _, _, reward, done, info = step(state, np.array([0.0, 0.0, 1.0]), params, cfg, rng)
        assert done and not info["success"]
        assert reward == pytest.approx(-8.0)

    def test_step_after_termination_rejected(self):
        cfg = study1()
        params = cfg.sample_params(np.random.default_rng(0))
        rng = np.random.default_rng(4)
        state = reset(Trial(0.1, 0.0, 0.3), params, rng)
        state.terminated = True
        with pytest.raises(EpisodeTerminated):
            step(state, np.zeros(2), params, cfg, rng)

    def test_max_steps_adds_termination_penalty(self):
        cfg = study1(max_steps=1)
        params = with_overrides(cfg.sample_params(np.random.default_rng(0)), rho_ocular=0.0)
        rng = np.random.default_rng(5)
        state = reset(Trial(1.0, 0.0, 0.02), params, rng)
        _, _, reward, done, info = step(state, np.array([0.0, 0.0]), params, cfg, rng)
        assert done and not info["success"]
        assert reward == pytest.approx(-params.theta_b - cfg.termination_penalty)

    def test_transition_noise_scaling(self):
        cfg = study1()
        params = with_overrides(cfg.sample_params(np.random.default_rng(0)), rho_ocular=0.1)
        rng = np.random.default_rng(6)
        aim = np.array([0.2, 0.0])
        errors = []
        state0 = reset(Trial(1.0, math.pi / 2, 0.02), params, rng)
        for _ in range(50_000):
            s2, _, _, _, _ = step(state0, aim, params, cfg, rng)
            errors.append(s2.fixation - aim)
        sigma = np.asarray(errors).std()
        expected = 0.1 * 0.2
        assert abs(sigma - expected) / expected < 0.02

    def test_nonkeypress_rewards_always_negative(self):
        for cfg in (study1(), study2(), study3()):
            rng = np.random.default_rng(7)
            params = cfg.sample_params(rng)
            state = reset(cfg.sample_trial(rng), params, rng)
            done = False
            while not done:
                intent = rng.uniform(-1, 1, 3 if cfg.keypress else 2)
                if cfg.keypress:
                    intent[2] = -1.0  # never press
                state, _, reward, done, info = step(state, intent, params, cfg, rng)
                assert reward < 0.0


class TestDetection:
    def test_foveated_wide_target_always_seen(self):
        cfg = study2()
        rng = np.random.default_rng(0)
        params = cfg.sample_params(rng)
        state = reset(Trial(0.0, 0.0, 1.0), params, rng)
        state.width = 1.0
        assert detection_prob(state, cfg) >= 0.99

    def test_monotone_decreasing_in_eccentricity(self):
        cfg = study2()
        rng = np.random.default_rng(0)
        params = cfg.sample_params(rng)
        probs = []
        for distance in np.linspace(0.0, 1.0, 11):
            state = reset(Trial(float(distance), 0.0, 0.1), params, rng)
            probs.append(detection_prob(state, cfg))
        assert all(a > b for a, b in zip(probs, probs[1:]))

    def test_monotone_increasing_in_width(self):
        cfg = study2()
        rng = np.random.default_rng(0)
        params = cfg.sample_params(rng)
        probs = []
        for width in np.linspace(0.02, 0.3, 8):
            state = reset(Trial(0.5, 0.0, float(width)), params, rng)
            probs.append(detection_prob(state, cfg))
        assert all(a < b for a, b in zip(probs, probs[1:]))

    def test_eccentricity_gap_at_default_kappa(self):
        cfg = study2()
        rng = np.random.default_rng(0)
        params = cfg.sample_params(rng)
        near = reset(Trial(0.3, 0.0, 0.05), params, rng)
        far = reset(Trial(1.2, 0.0, 0.05), params, rng)
        assert detection_prob(far, cfg) < detection_prob(near, cfg)
        assert detection_prob(near, cfg) - detection_prob(far, cfg) >= 0.2


def detected_obs(x, y, w, loc_var, width_var=0.01):
    return PointingObservation(
        aim=np.zeros(2),
        detected=True,
        perceived_target=np.array([x, y]),
        perceived_width=w,
        loc_var=loc_var,
        width_var=width_var,
    )


class TestBeliefUpdate:
    def test_equal_variances_give_midpoint(self):
        belief = Belief(mean=np.array([0.2, 0.0, 0.1]), var=np.full(3, 0.04), detected=True)
        obs = detected_obs(0.6, 0.2, 0.3, loc_var=0.04, width_var=0.04)
        out = belief_update(belief, obs)
        np.testing.assert_allclose(out.mean, [0.4, 0.1, 0.2], atol=1e-12)

    def test_hand_computed_single_step(self):
        belief = Belief(mean=np.array([0.2, 0.2, 0.2]), var=np.full(3, 0.04), detected=True)
        obs = detected_obs(0.6, 0.6, 0.6, loc_var=0.12, width_var=0.12)
        out = belief_update(belief, obs)
        # Gain = 0.04 / (0.04 + 0.12) = 0.25; mean' = 0.3; var' = 0.03.
        np.testing.assert_allclose(out.mean, [0.3, 0.3, 0.3], atol=1e-12)
        np.testing.assert_allclose(out.var, [0.03, 0.03, 0.03], atol=1e-12)

    def test_first_observation_initialises(self):
        out = belief_update(Belief(), detected_obs(0.5, -0.2, 0.1, loc_var=0.02))
        assert out.detected
        np.testing.assert_allclose(out.mean, [0.5, -0.2, 0.1])
        np.testing.assert_allclose(out.var, [0.02, 0.02, 0.01])

    def test_undetected_leaves_belief_unchanged(self):
        belief = Belief(mean=np.array([0.1, 0.1, 0.1]), var=np.full(3, 0.5), detected=True)
        out = belief_update(belief, PointingObservation(aim=np.zeros(2), detected=False))
        assert out is belief

    def test_equal_variance_sequence_matches_batch_fusion(self):
        rng = np.random.default_rng(8)
        obs_values = rng.normal(0.3, 0.1, 12)
        var = 0.09
        belief = Belief()
        for v in obs_values:
            belief = belief_update(belief, detected_obs(v, v, v, loc_var=var, width_var=var))
        n = len(obs_values)
        np.testing.assert_allclose(belief.mean, np.full(3, obs_values.mean()), atol=1e-10)
        np.testing.assert_allclose(belief.var, np.full(3, var / n), atol=1e-10)

    def test_variance_strictly_decreasing(self):
        rng = np.random.default_rng(9)
        belief = belief_update(Belief(), detected_obs(0.0, 0.0, 0.1, loc_var=0.2))
        for _ in range(20):
            prev = belief.var.copy()
            belief = belief_update(
                belief, detected_obs(rng.normal(), rng.normal(), 0.1, loc_var=0.2)
            )
            assert np.all(belief.var < prev)

    def test_order_robust_fusion(self):
        rng = np.random.default_rng(10)
        values = [rng.normal(size=3) for _ in range(6)]
        var = 0.05

        def fuse(order):
            belief = Belief()
            for v in order:
                belief = belief_update(
                    belief, detected_obs(v[0], v[1], v[2], loc_var=var, width_var=var)
                )
            return belief

        a = fuse(values)
        b = fuse(list(reversed(values)))
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
        np.testing.assert_allclose(a.var, b.var, atol=1e-12)

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError, match="variance"):
            belief_update(Belief(), detected_obs(0.0, 0.0, 0.1, loc_var=0.0))


class TestControllerInput:
    def test_empty_belief_sentinels(self):
        cfg = study1()
        vec = controller_input(Belief(), np.zeros(2), np.array([0.5]), cfg)
        np.testing.assert_array_equal(vec[0:3], 0.0)
        np.testing.assert_array_equal(vec[3:6], 1.0)
        assert vec[8] == 0.0

    def test_preference_changes_only_its_slot(self):
        cfg = study3()
        belief = Belief()
        theta_a = np.array([0.3, 0.3, 0.3, 0.2])
        theta_b = np.array([0.3, 0.3, 0.3, 0.9])
        va = controller_input(belief, np.zeros(2), theta_a, cfg)
        vb = controller_input(belief, np.zeros(2), theta_b, cfg)
        diff = np.nonzero(va != vb)[0]
        assert list(diff) == [12]

    @pytest.mark.parametrize("factory,width", [(study1, 10), (study2, 12), (study3, 13)])
    def test_documented_layout_widths(self, factory, width):
        cfg = factory()
        vec = controller_input(Belief(), np.zeros(2), np.zeros(cfg.n_estimated), cfg)
        assert vec.shape == (width,)
        assert cfg.controller_obs_dim == width


class OracleController:
    """Aims straight at a known target; presses immediately when asked."""

    def __init__(self, target, keypress_after=None):
        self.target = np.asarray(target, dtype=np.float64)
        self.keypress_after = keypress_after
        self.calls = 0

    def act(self, obs, rng=None, deterministic=True):
        self.calls += 1
        action = np.array([self.target[0], self.target[1], -1.0])
        if self.keypress_after is not None and self.calls > self.keypress_after:
            action[2] = 1.0
        return action, 0.0, 0.0


class TestRunEpisode:
    def test_zero_noise_oracle_one_step(self):
        cfg = study1()
        params = with_overrides(cfg.sample_params(np.random.default_rng(0)), rho_ocular=0.0)
        rng = np.random.default_rng(11)
        trial = Trial(0.5, 1.1, 0.1)
        state = reset(trial, params, rng)
        trace = run_episode(OracleController(state.target), trial, params, cfg, rng)
        assert trace.steps == 1
        assert trace.success
        assert trace.total_time == pytest.approx(sum(trace.durations))

    def test_total_time_is_sum_of_durations(self):
        cfg = study2()
        rng = np.random.default_rng(12)
        params = cfg.sample_params(rng)
        trial = cfg.sample_trial(rng)
        state = reset(trial, params, rng)
        trace = run_episode(OracleController(state.target), trial, params, cfg, rng)
        assert trace.total_time == sum(trace.durations)

    def test_study3_keypress_recorded(self):
        cfg = study3()
        params = with_overrides(cfg.sample_params(np.random.default_rng(1)), rho_ocular=0.0)
        rng = np.random.default_rng(13)
        trial = Trial(0.4, 0.2, 0.2)
        state = reset(trial, params, rng)
        trace = run_episode(OracleController(state.target, keypress_after=1), trial, params, cfg, rng)
        assert trace.keypress_step is not None
        assert trace.success

    def test_trace_jsonl_round_trip(self, tmp_path):
        cfg = study2()
        rng = np.random.default_rng(14)
        params = cfg.sample_params(rng)
        trial = cfg.sample_trial(rng)
        state = reset(trial, params, rng)
        traces = [run_episode(OracleController(state.target), trial, params, cfg, rng) for _ in range(3)]
        path = tmp_path / "traces.jsonl"
        write_traces(path, traces)
        loaded = read_traces(path)
        assert [t.to_dict() for t in loaded] == [t.to_dict() for t in traces]


class TestPointingEnv:
    def test_episode_terminates_within_max_steps(self):
        for factory in (study1, study2, study3):
            cfg = factory()
            env = PointingEnv(cfg, seed=0)
            obs = env.reset()
            assert obs.shape == (cfg.controller_obs_dim,)
            rng = np.random.default_rng(0)
            for t in range(cfg.max_steps + 1):
                action = rng.uniform(-1, 1, cfg.action_dim)
                obs, reward, done, _ = env.step(action)
                if done:
                    break
            assert done

    def test_fresh_params_each_episode(self):
        env = PointingEnv(study1(), seed=1)
        env.reset()
        first = env._params.rho_ocular
        # finish the episode
        done = False
        while not done:
            _, _, done, _ = env.step(np.array([0.0, 0.0]))
        env.reset()
        assert env._params.rho_ocular != first
