"""Small environments and utilities shared across the test suite."""

from __future__ import annotations

import numpy as np


class BanditEnv:
    """One-step continuous bandit: reward -(a - 0.7)^2, constant observation."""

    obs_dim = 1
    action_dim = 1

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self) -> np.ndarray:
        return np.ones(1)

    def step(self, action):
        a = float(np.asarray(action).ravel()[0])
        return np.ones(1), -((a - 0.7) ** 2), True, {}


class OneStepEnv:
    """Always terminates after a single step with reward 1."""

    obs_dim = 2
    action_dim = 1

    def __init__(self, seed: int = 0):
        pass

    def reset(self) -> np.ndarray:
        return np.zeros(2)

    def step(self, action):
        return np.zeros(2), 1.0, True, {}


class NoisyRewardEnv:
    """Rewards drawn from the env's own seeded stream; episodes of length 3.

    Replaying with the same seed and the same actions reproduces the same
    rewards, which makes it an oracle for rollout bookkeeping.
    """

    obs_dim = 1
    action_dim = 1

    def __init__(self, seed: int):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.t = 0

    def reset(self) -> np.ndarray:
        self.t = 0
        return np.zeros(1)

    def step(self, action):
        self.t += 1
        reward = float(self.rng.normal()) + 0.01 * float(np.asarray(action).ravel()[0])
        done = self.t >= 3
        if done:
            self.t = 0
        return np.full(1, float(self.t)), reward, done, {}


class FaultyEnv:
    """Raises on the second step of every episode."""

    obs_dim = 1
    action_dim = 1

    def __init__(self, seed: int = 0):
        self.t = 0

    def reset(self) -> np.ndarray:
        self.t = 0
        return np.zeros(1)

    def step(self, action):
        self.t += 1
        if self.t >= 2:
            raise RuntimeError("injected fault")
        return np.ones(1), 0.5, False, {}


def finite_difference_grads(params: list[np.ndarray], loss_fn, h: float = 1e-5):
    """Central finite differences of a scalar loss over every parameter."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            hi = loss_fn()
            p[idx] = orig - h
            lo = loss_fn()
            p[idx] = orig
            g[idx] = (hi - lo) / (2.0 * h)
            it.iternext()
        grads.append(g)
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst
