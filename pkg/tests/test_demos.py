import math

import numpy as np
import pytest

from pointlab.demos import (
    GpDesignEnv,
    GpTask,
    LogisticDesignEnv,
    LogisticTask,
    evaluate_logistic_policy,
    evaluate_myopic_baseline,
    gp_posterior,
    gp_sample,
    imse,
    l2_distance,
    logistic_prob,
    logistic_trial,
    mean_stderr,
    myopic_next_design,
    myopic_probes,
    optimal_probe_pair,
    post_probe_imse,
    snap_to_grid,
)
from pointlab.policies import PooledLayout, PooledPolicy


class TestGpSample:
    def test_zero_signal_variance_gives_zero_function(self):
        task = GpTask(signal_var=0.0)
        f = gp_sample(task, np.random.default_rng(0))
        np.testing.assert_array_equal(f, np.zeros(task.grid_size))

    def test_same_seed_same_draw(self):
        task = GpTask()
        a = gp_sample(task, np.random.default_rng(3))
        b = gp_sample(task, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_empirical_covariance_matches_kernel(self):
        task = GpTask()
        rng = np.random.default_rng(1)
        draws = np.array([gp_sample(task, rng) for _ in range(10_000)])
        i, j = 10, 20
        emp = float(np.cov(draws[:, i], draws[:, j])[0, 1])
        kern = float(task.kernel(task.grid[i : i + 1], task.grid[j : j + 1])[0, 0])
        assert abs(emp - kern) / kern < 0.05


class TestGpPosterior:
    def test_no_observations_returns_prior(self):
        task = GpTask()
        mean, var = gp_posterior(task, np.array([]), np.array([]))
        np.testing.assert_array_equal(mean, np.zeros(task.grid_size))
        np.testing.assert_array_equal(var, np.full(task.grid_size, task.signal_var))

    def test_interpolation_limit_at_low_noise(self):
        task = GpTask(noise_var=1e-12)
        x_star = float(task.grid[17])
        mean, var = gp_posterior(task, np.array([x_star]), np.array([1.3]))
        assert mean[17] == pytest.approx(1.3, abs=1e-5)
        assert var[17] == pytest.approx(0.0, abs=1e-6)

    def test_variance_independent_of_observed_values(self):
        task = GpTask()
        xs = np.array([0.2, 0.7])
        _, var_a = gp_posterior(task, xs, np.array([0.0, 0.0]))
        _, var_b = gp_posterior(task, xs, np.array([5.0, -3.0]))
        np.testing.assert_array_equal(var_a, var_b)

    def test_posterior_variance_never_exceeds_prior(self):
        task = GpTask()
        rng = np.random.default_rng(2)
        for _ in range(10):
            xs = rng.uniform(0, 1, 2)
            _, var = gp_posterior(task, xs, rng.standard_normal(2))
            assert np.all(var <= task.signal_var + 1e-12)


class TestImse:
    def test_constant_variance_on_unit_interval(self):
        grid = np.linspace(0, 1, 64)
        assert imse(np.full(64, 0.37), grid) == pytest.approx(0.37, abs=1e-12)

    def test_zero_variance(self):
        grid = np.linspace(0, 1, 64)
        assert imse(np.zeros(64), grid) == 0.0

    def test_piecewise_linear_profile_hand_integrated(self):
        grid = np.linspace(0, 1, 65)  # 0.5 is a grid point
        profile = 1.0 - 2.0 * np.abs(grid - 0.5)  # triangle, area 1/2
        assert imse(profile, grid) == pytest.approx(0.5, abs=1e-9)


class TestMyopicBaseline:
    def test_first_probe_is_the_midpoint(self):
        task = GpTask()
        x1 = myopic_next_design(task, [])
        spacing = task.grid[1] - task.grid[0]
        assert abs(x1 - 0.5) <= spacing / 2 + 1e-12

    def test_second_probe_moves_away(self):
        task = GpTask()
        x2 = myopic_next_design(task, [0.5])
        assert abs(x2 - 0.5) > 0.2

    def test_myopic_never_beats_brute_force_pair(self):
        task = GpTask()
        probes = myopic_probes(task)
        _, best = optimal_probe_pair(task)
        assert post_probe_imse(task, probes) >= best - 1e-12

    def test_baseline_is_deterministic_with_zero_imse_spread(self):
        task = GpTask()
        rows = evaluate_myopic_baseline(task, 16, seed=4)
        imses = {r["imse"] for r in rows}
        assert len(imses) == 1
        _, stderr = mean_stderr(r["imse"] for r in rows)
        assert stderr == 0.0


class TestGpEnv:
    def test_episode_is_two_probes_with_terminal_reward(self):
        task = GpTask()
        env = GpDesignEnv(task, seed=0)
        obs = env.reset()
        assert obs[-1] == 0
        obs, r1, done1, _ = env.step(np.array([0.0]))
        assert not done1 and r1 == 0.0 and obs[-1] == 1
        obs, r2, done2, info = env.step(np.array([1.0]))
        assert done2 and r2 < 0.0
        assert info["imse"] > 0.0
        assert l2_distance(np.zeros(4), np.zeros(4), np.linspace(0, 1, 4)) == 0.0

    def test_probes_snap_to_grid(self):
        task = GpTask()
        assert snap_to_grid(task, 0.499) in task.grid
        env = GpDesignEnv(task, seed=1)
        env.reset()
        env.step(np.array([0.13]))
        assert env.xs[0] in task.grid


class TestLogistic:
    def test_probability_at_origin(self):
        assert logistic_prob(0.0, 0.0) == pytest.approx(0.5)

    def test_sigmoid_symmetry(self):
        for theta, d in [(1.0, 2.0), (-3.0, 0.5), (4.0, -4.0)]:
            assert logistic_prob(theta, d) == pytest.approx(1.0 - logistic_prob(-theta, -d))

    def test_empirical_frequency(self):
        rng = np.random.default_rng(5)
        n = 100_000
        freq = sum(logistic_trial(1.0, 1.0, rng) for _ in range(n)) / n
        assert abs(freq - 1.0 / (1.0 + math.exp(-2.0))) < 0.005

    def test_env_episode_length_and_masking(self):
        task = LogisticTask()
        env = LogisticDesignEnv(task, seed=0, mask_outcomes=True)
        obs = env.reset()
        dones = []
        for t in range(task.n_trials + 1):
            visible_flags = obs[:-1].reshape(task.n_trials, 3)[:, 2]
            if t < task.n_trials:
                assert visible_flags.sum() == 0.0  # hidden until the last step
            obs, _, done, _ = env.step(np.array([0.0, 0.5]))
            dones.append(done)
        assert dones == [False] * task.n_trials + [True]
        # Final observation (post-episode) unmasks all outcomes.
        visible_flags = obs[:-1].reshape(task.n_trials, 3)[:, 2]
        assert visible_flags.sum() == task.n_trials

    def test_adaptive_env_shows_outcomes_immediately(self):
        task = LogisticTask()
        env = LogisticDesignEnv(task, seed=1)
        env.reset()
        obs, _, _, info = env.step(np.array([0.3, 0.5]))
        row = obs[:-1].reshape(task.n_trials, 3)[0]
        assert row[2] == 1.0
        assert row[1] == info["outcome"]

    def test_degenerate_prior_gives_zero_mse_in_all_conditions(self):
        task = LogisticTask(theta_range=(2.5, 2.5))
        policy = PooledPolicy(PooledLayout(task.n_trials, 3), 2, np.random.default_rng(0))
        for kwargs in ({}, {"mask_outcomes": True}, {"random_designs": True}):
            rows = evaluate_logistic_policy(policy, task, 50, seed=2, **kwargs)
            mse, _ = mean_stderr(r["sq_err"] for r in rows)
            assert mse == pytest.approx(0.0, abs=1e-12)

    def test_reward_is_squared_error_of_normalised_estimate(self):
        task = LogisticTask()
        env = LogisticDesignEnv(task, seed=3)
        env.reset()
        truth_norm = task.normalize_theta(env._theta)
        _, reward, _, _ = env.step(np.array([0.0, 0.25]))
        assert reward == pytest.approx(-((0.25 - truth_norm) ** 2))
