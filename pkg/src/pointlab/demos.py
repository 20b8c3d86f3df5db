"""Two abstract validation tasks for the design-policy machinery.

Non-myopic task: functions are drawn from a 1-D Gaussian process on a
grid; the agent places two probes and is rewarded (at the end) with the
negative L2 distance between the truth and the GP posterior mean given
its own probes. The baseline is an exact one-step-lookahead rule that
greedily minimises the integrated posterior variance (IMSE); since GP
posterior variance does not depend on observed values, the baseline's
probe locations and IMSE are fully deterministic.

Adaptivity task: a latent offset shifts a logistic response curve; each
episode runs Bernoulli trials at chosen design points and the agent
estimates the offset. Masking trial outcomes until the final step forces
a non-adaptive strategy, giving the comparison baseline; a third
condition draws designs uniformly at random.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .policies import PooledLayout, PooledPolicy
from .ppo import PpoConfig, train_policy

GP_JITTER = 1e-10


@dataclass(frozen=True)
class GpTask:
    """Squared-exponential GP on a grid over [0, 1]."""

    lengthscale: float = 0.25
    signal_var: float = 1.0
    noise_var: float = 1e-4
    grid_size: int = 64
    n_probes: int = 2

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid_size)

    def kernel(self, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
        d = np.subtract.outer(np.asarray(xa, dtype=np.float64), np.asarray(xb, dtype=np.float64))
        return self.signal_var * np.exp(-0.5 * (d / self.lengthscale) ** 2)


def gp_sample(task: GpTask, rng: np.random.Generator) -> np.ndarray:
    """One function draw on the grid via a jittered Cholesky factor."""
    if task.signal_var == 0.0:
        return np.zeros(task.grid_size)
    k = task.kernel(task.grid, task.grid)
    jitter = GP_JITTER
    for _ in range(8):
        try:
            chol = np.linalg.cholesky(k + jitter * np.eye(task.grid_size))
            return chol @ rng.standard_normal(task.grid_size)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError("kernel matrix not positive definite even with jitter")


def gp_posterior(
    task: GpTask, xs: np.ndarray, ys: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance on the grid given observed (x, y) pairs.

    Zero observations return the prior. Duplicate x values are fine; the
    observation noise keeps the system well conditioned.
    """
    grid = task.grid
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        return np.zeros(task.grid_size), np.full(task.grid_size, task.signal_var)
    ys = np.asarray(ys, dtype=np.float64)
    k_xx = task.kernel(xs, xs) + task.noise_var * np.eye(xs.size)
    k_gx = task.kernel(grid, xs)
    mean = k_gx @ np.linalg.solve(k_xx, ys)
    w = np.linalg.solve(k_xx, k_gx.T)
    var = task.signal_var - np.einsum("gn,ng->g", k_gx, w)
    return mean, np.maximum(var, 0.0)


def imse(variance: np.ndarray, grid: np.ndarray) -> float:
    """Trapezoidal integral of the posterior variance over the interval."""
    return float(np.trapezoid(variance, grid))


def l2_distance(f_a: np.ndarray, f_b: np.ndarray, grid: np.ndarray) -> float:
    """Function-space L2 norm of the difference (trapezoid quadrature)."""
    return float(np.sqrt(np.trapezoid((f_a - f_b) ** 2, grid)))


def post_probe_imse(task: GpTask, xs: list[float]) -> float:
    _, var = gp_posterior(task, np.asarray(xs), np.zeros(len(xs)))
    return imse(var, task.grid)


def myopic_next_design(task: GpTask, observed_xs: list[float]) -> float:
    """Grid argmin of the IMSE after adding one probe; ties take lowest x.

    Exact because GP posterior variance is independent of observed values.
    """
    best_x, best = None, math.inf
    for x in task.grid:
        value = post_probe_imse(task, list(observed_xs) + [float(x)])
        if value < best - 1e-15:
            best, best_x = value, float(x)
    return best_x


def myopic_probes(task: GpTask) -> list[float]:
    xs: list[float] = []
    for _ in range(task.n_probes):
        xs.append(myopic_next_design(task, xs))
    return xs


def optimal_probe_pair(task: GpTask) -> tuple[list[float], float]:
    """Brute-force best two-probe IMSE over all grid pairs (test oracle)."""
    grid = task.grid
    best, best_pair = math.inf, None
    for i in range(task.grid_size):
        for j in range(i, task.grid_size):
            value = post_probe_imse(task, [float(grid[i]), float(grid[j])])
            if value < best:
                best, best_pair = value, [float(grid[i]), float(grid[j])]
    return best_pair, best


def snap_to_grid(task: GpTask, x: float) -> float:
    return float(task.grid[int(np.argmin(np.abs(task.grid - x)))])


class GpDesignEnv:
    """Probe-placement episodes over freshly sampled GP functions.

    Observations are the (x, y) probe records so far; the terminal reward
    is the negative L2 error of the posterior-mean estimate.
    """

    def __init__(self, task: GpTask, seed: int):
        self.task = task
        self.rng = np.random.default_rng(seed)
        self.layout = PooledLayout(task.n_probes, 2)
        self.obs_dim = self.layout.obs_dim
        self.action_dim = 1
        self._f: np.ndarray | None = None
        self.xs: list[float] = []
        self.ys: list[float] = []

    def _obs(self) -> np.ndarray:
        records = np.column_stack([self.xs, self.ys]) if self.xs else np.zeros((0, 2))
        return self.layout.pack(records)

    def reset(self) -> np.ndarray:
        self._f = gp_sample(self.task, self.rng)
        self.xs, self.ys = [], []
        return self._obs()

    def probe(self, x: float) -> float:
        x = snap_to_grid(self.task, x)
        idx = int(np.argmin(np.abs(self.task.grid - x)))
        y = float(self._f[idx] + self.rng.normal(0.0, math.sqrt(self.task.noise_var)))
        self.xs.append(x)
        self.ys.append(y)
        return y

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, dict]:
        raw = float(np.asarray(action).ravel()[0])
        x = 0.5 * (1.0 + math.tanh(0.5 * raw))  # squash into [0, 1]
        self.probe(x)
        done = len(self.xs) >= self.task.n_probes
        reward = 0.0
        info: dict = {"x": self.xs[-1]}
        if done:
            mean, var = gp_posterior(self.task, np.asarray(self.xs), np.asarray(self.ys))
            reward = -l2_distance(mean, self._f, self.task.grid)
            info["imse"] = imse(var, self.task.grid)
            info["l2"] = -reward
        return self._obs(), reward, done, info


@dataclass(frozen=True)
class LogisticTask:
    """Estimate the x-offset of a Bernoulli response curve."""

    theta_range: tuple[float, float] = (-8.0, 8.0)
    design_range: tuple[float, float] = (-10.0, 10.0)
    n_trials: int = 10

    @property
    def theta_span(self) -> float:
        return self.theta_range[1] - self.theta_range[0]

    def normalize_theta(self, theta: float) -> float:
        if self.theta_span == 0.0:
            return 0.0
        return (theta - self.theta_range[0]) / self.theta_span

    def denormalize_theta(self, t: float) -> float:
        return self.theta_range[0] + float(np.clip(t, 0.0, 1.0)) * self.theta_span


def logistic_prob(theta: float, d: float) -> float:
    """Success probability sigmoid(d + theta), overflow-safe."""
    return 0.5 * (1.0 + math.tanh(0.5 * (d + theta)))


def logistic_trial(theta: float, d: float, rng: np.random.Generator) -> int:
    """One Bernoulli outcome with success probability sigmoid(d + theta)."""
    return int(rng.random() < logistic_prob(theta, d))


class LogisticDesignEnv:
    """Sequential Bernoulli design episodes, optionally outcome-masked.

    An episode is `n_trials` design actions plus one final estimate-only
    action; the per-step reward is the negative squared error of the
    normalised estimate. With `mask_outcomes` the trial outcomes are
    hidden until the final step, which trains the non-adaptive baseline.
    """

    def __init__(
        self,
        task: LogisticTask,
        seed: int,
        mask_outcomes: bool = False,
        random_designs: bool = False,
    ):
        self.task = task
        self.rng = np.random.default_rng(seed)
        self.mask_outcomes = mask_outcomes
        self.random_designs = random_designs
        self.layout = PooledLayout(task.n_trials, 3)  # (design_norm, outcome, visible)
        self.obs_dim = self.layout.obs_dim
        self.action_dim = 2  # (next design, estimate)
        self.theta_slice = slice(1, 2)
        self._theta: float | None = None
        self.designs: list[float] = []
        self.outcomes: list[int] = []
        self._n_actions = 0

    def latent_target(self) -> np.ndarray | None:
        return np.array([self.task.normalize_theta(self._theta)])

    def _obs(self) -> np.ndarray:
        final = self._n_actions >= self.task.n_trials
        show = (not self.mask_outcomes) or final
        lo, hi = self.task.design_range
        rows = []
        for d, y in zip(self.designs, self.outcomes):
            d_norm = (d - lo) / (hi - lo)
            rows.append([d_norm, float(y) if show else 0.0, 1.0 if show else 0.0])
        records = np.asarray(rows) if rows else np.zeros((0, 3))
        return self.layout.pack(records)

    def reset(self) -> np.ndarray:
        self._theta = float(self.rng.uniform(*self.task.theta_range))
        self.designs, self.outcomes = [], []
        self._n_actions = 0
        return self._obs()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, dict]:
        action = np.asarray(action, dtype=np.float64).ravel()
        theta_norm = float(np.clip(action[1], 0.0, 1.0))
        truth_norm = self.task.normalize_theta(self._theta)
        reward = -((theta_norm - truth_norm) ** 2)
        info = {"theta_e": self.task.denormalize_theta(theta_norm), "theta_p": self._theta}
        if self._n_actions < self.task.n_trials:
            lo, hi = self.task.design_range
            if self.random_designs:
                d = float(self.rng.uniform(lo, hi))
            else:
                d = lo + (hi - lo) * 0.5 * (1.0 + math.tanh(0.5 * float(action[0])))
            y = logistic_trial(self._theta, d, self.rng)
            self.designs.append(d)
            self.outcomes.append(y)
            info["design"] = d
            info["outcome"] = y
        self._n_actions += 1
        done = self._n_actions > self.task.n_trials
        return self._obs(), reward, done, info


# ---------------------------------------------------------------------------
# Demo training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class DemoBudget:
    """Training/evaluation sizes for the two demos, per profile."""

    gp_steps: int = 300_000
    gp_eval: int = 100
    logistic_steps: int = 400_000
    logistic_eval: int = 2_000

    @classmethod
    def for_profile(cls, profile: str) -> "DemoBudget":
        if profile == "paper":
            return cls(gp_steps=3_000_000, gp_eval=100, logistic_steps=4_000_000, logistic_eval=10_000)
        return cls()


def gp_ppo_config(total_steps: int) -> PpoConfig:
    return PpoConfig(
        lr=3e-4,
        lr_end=5e-5,
        gamma=0.99,
        gae_lambda=0.95,
        clip_range=0.2,
        ent_coef=0.005,
        epochs=6,
        minibatch_size=256,
        n_steps=128,
        n_envs=32,
        total_steps=total_steps,
        use_ema_rewards=False,
    )


def logistic_ppo_config(total_steps: int) -> PpoConfig:
    return PpoConfig(
        lr=3e-4,
        lr_end=5e-5,
        gamma=0.99,
        gae_lambda=0.95,
        clip_range=0.15,
        ent_coef=0.003,
        epochs=6,
        minibatch_size=256,
        n_steps=132,  # multiple of the 11-step episode keeps windows aligned
        n_envs=32,
        total_steps=total_steps,
        use_ema_rewards=False,
    )


def train_gp_analyst(task: GpTask, steps: int, seed: int, metrics_path=None, progress=None):
    policy = PooledPolicy(PooledLayout(task.n_probes, 2), 1, np.random.default_rng(seed))
    cfg = gp_ppo_config(steps)
    result = train_policy(
        policy,
        lambda i: GpDesignEnv(task, seed * 7_001 + i),
        cfg,
        seed=seed + 3,
        metrics_path=metrics_path,
        progress=progress,
    )
    return policy, result


def train_logistic_analyst(
    task: LogisticTask,
    steps: int,
    seed: int,
    mask_outcomes: bool = False,
    random_designs: bool = False,
    metrics_path=None,
    progress=None,
):
    policy = PooledPolicy(PooledLayout(task.n_trials, 3), 2, np.random.default_rng(seed))
    cfg = logistic_ppo_config(steps)
    result = train_policy(
        policy,
        lambda i: LogisticDesignEnv(
            task, seed * 9_001 + i, mask_outcomes=mask_outcomes, random_designs=random_designs
        ),
        cfg,
        seed=seed + 5,
        theta_slice=slice(1, 2),
        metrics_path=metrics_path,
        progress=progress,
    )
    return policy, result


def evaluate_gp_policy(policy, task: GpTask, n_eval: int, seed: int) -> list[dict]:
    """Deterministic-mode evaluation; one row per sampled function."""
    rows = []
    env = GpDesignEnv(task, seed)
    for _ in range(n_eval):
        obs = env.reset()
        done = False
        while not done:
            action, _, _ = policy.act(obs, deterministic=True)
            obs, reward, done, info = env.step(action)
        rows.append({"l2": info["l2"], "imse": info["imse"], "xs": list(env.xs)})
    return rows


def evaluate_myopic_baseline(task: GpTask, n_eval: int, seed: int) -> list[dict]:
    probes = myopic_probes(task)
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_eval):
        f = gp_sample(task, rng)
        idx = [int(np.argmin(np.abs(task.grid - x))) for x in probes]
        ys = [float(f[i] + rng.normal(0.0, math.sqrt(task.noise_var))) for i in idx]
        mean, var = gp_posterior(task, np.asarray(probes), np.asarray(ys))
        rows.append(
            {
                "l2": l2_distance(mean, f, task.grid),
                "imse": imse(var, task.grid),
                "xs": list(probes),
            }
        )
    return rows


def evaluate_logistic_policy(policy, task: LogisticTask, n_eval: int, seed: int, random_designs=False, mask_outcomes=False) -> list[dict]:
    env = LogisticDesignEnv(task, seed, mask_outcomes=mask_outcomes, random_designs=random_designs)
    rows = []
    for _ in range(n_eval):
        obs = env.reset()
        done = False
        while not done:
            action, _, _ = policy.act(obs, deterministic=True)
            obs, _, done, info = env.step(action)
        err = info["theta_e"] - info["theta_p"]
        rows.append({"sq_err": err * err, "theta_p": info["theta_p"], "theta_e": info["theta_e"]})
    return rows


def mean_stderr(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), stderr


def write_table(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def run_demo(
    which: str,
    budget: DemoBudget,
    seed: int,
    out_dir=None,
    progress=None,
    task=None,
) -> dict:
    """Train and evaluate one demo; returns the metrics table as a dict."""
    if which == "nonmyopic":
        task = task or GpTask()
        policy, result = train_gp_analyst(
            task, budget.gp_steps, seed,
            metrics_path=None if out_dir is None else out_dir / "gp_training.csv",
            progress=progress,
        )
        analyst_rows = evaluate_gp_policy(policy, task, budget.gp_eval, seed + 100)
        baseline_rows = evaluate_myopic_baseline(task, budget.gp_eval, seed + 100)
        a_l2, a_l2_se = mean_stderr(r["l2"] for r in analyst_rows)
        b_l2, b_l2_se = mean_stderr(r["l2"] for r in baseline_rows)
        a_imse, a_imse_se = mean_stderr(r["imse"] for r in analyst_rows)
        b_imse, b_imse_se = mean_stderr(r["imse"] for r in baseline_rows)
        metrics = {
            "analyst_l2": a_l2,
            "analyst_l2_stderr": a_l2_se,
            "baseline_l2": b_l2,
            "baseline_l2_stderr": b_l2_se,
            "analyst_imse": a_imse,
            "analyst_imse_stderr": a_imse_se,
            "baseline_imse": b_imse,
            "baseline_imse_stderr": b_imse_se,
            "diverged": float(result.diverged),
        }
        if out_dir is not None:
            write_table(out_dir / "nonmyopic_episodes_analyst.csv", analyst_rows, ["l2", "imse", "xs"])
            write_table(out_dir / "nonmyopic_episodes_baseline.csv", baseline_rows, ["l2", "imse", "xs"])
            write_table(out_dir / "nonmyopic_metrics.csv", [metrics], list(metrics))
        return metrics

    if which == "adaptivity":
        task = task or LogisticTask()
        conditions = {
            "adaptive": {},
            "nonadaptive": {"mask_outcomes": True},
            "random": {"random_designs": True},
        }
        metrics: dict = {}
        for name, kwargs in conditions.items():
            policy, result = train_logistic_analyst(
                task, budget.logistic_steps, seed, progress=progress,
                metrics_path=None if out_dir is None else out_dir / f"logistic_{name}_training.csv",
                **kwargs,
            )
            rows = evaluate_logistic_policy(
                policy, task, budget.logistic_eval, seed + 200, **kwargs
            )
            mse, se = mean_stderr(r["sq_err"] for r in rows)
            metrics[f"{name}_mse"] = mse
            metrics[f"{name}_mse_stderr"] = se
            metrics[f"{name}_diverged"] = float(result.diverged)
            if out_dir is not None:
                write_table(
                    out_dir / f"adaptivity_episodes_{name}.csv",
                    rows,
                    ["sq_err", "theta_p", "theta_e"],
                )
        if out_dir is not None:
            write_table(out_dir / "adaptivity_metrics.csv", [metrics], list(metrics))
        return metrics

    raise ValueError(f"unknown demo {which!r}")
