"""PPO with GAE, an EMA shadow network, and a hybrid update.

The same engine trains the pointing controller (phase 1) and the
experiment-designing analyst (phase 2). Policies come from
`pointlab.policies`; losses are differentiated by hand: the clipped
surrogate and entropy bonus flow through the Gaussian head's log-density
gradients, the value loss through the value head, and an optional L1
regression on the estimate component of the action mean (the pathwise
term) is added in the same minibatch step when per-step latent targets
are available.

Rewards can optionally be computed from a slowly tracking shadow copy of
the policy (`EmaShadow`); environments that support this expose
`set_reward_policy`.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .nn import AdamState, adam_step

logger = logging.getLogger(__name__)

METRICS_FIELDS = [
    "iteration",
    "steps",
    "mean_ep_reward",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "sup_loss",
    "lr",
]


class Env(Protocol):
    obs_dim: int
    action_dim: int

    def reset(self) -> np.ndarray: ...
    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, dict]: ...


@dataclass
class PpoConfig:
    """Hyperparameters for one PPO training run.

    `lr_end` enables exponential learning-rate decay from `lr` to `lr_end`
    across the run; None keeps the rate constant.
    """

    lr: float = 2e-4
    lr_end: float | None = None
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.18
    ent_coef: float = 0.001
    vf_coef: float = 0.5
    max_grad_norm: float = 0.55
    epochs: int = 6
    minibatch_size: int = 256
    n_steps: int = 128
    n_envs: int = 32
    total_steps: int = 300_000
    lambda_sup: float = 1.0
    ema_alpha: float = 0.99
    use_ema_rewards: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError(f"clip_range must be in (0, 1), got {self.clip_range}")
        if self.minibatch_size <= 0 or self.epochs <= 0:
            raise ValueError("epochs and minibatch_size must be positive")

    def lr_at(self, progress: float) -> float:
        if self.lr_end is None:
            return self.lr
        frac = min(max(progress, 0.0), 1.0)
        return float(self.lr * (self.lr_end / self.lr) ** frac)


class BatchedEnv:
    """Steps a list of single environments in lockstep with auto-reset.

    A faulting `env.step` truncates that episode (done flag set, zero
    reward) and is logged rather than propagated, so one bad rollout does
    not kill a training run.
    """

    def __init__(self, envs: list[Env]):
        if not envs:
            raise ValueError("need at least one environment")
        self.envs = envs
        self.n_envs = len(envs)
        self.obs_dim = envs[0].obs_dim
        self.action_dim = envs[0].action_dim
        self._obs = np.stack([env.reset() for env in envs])
        self._ep_rewards = np.zeros(self.n_envs)
        self._ep_lengths = np.zeros(self.n_envs, dtype=int)
        self.finished_rewards: deque[float] = deque(maxlen=100)
        self.finished_lengths: deque[int] = deque(maxlen=100)

    @property
    def obs(self) -> np.ndarray:
        return self._obs

    def latent_targets(self) -> np.ndarray | None:
        if not hasattr(self.envs[0], "latent_target"):
            return None
        targets = [env.latent_target() for env in self.envs]
        if targets[0] is None:
            return None
        return np.stack(targets)

    def set_reward_policy(self, policy) -> None:
        for env in self.envs:
            if hasattr(env, "set_reward_policy"):
                env.set_reward_policy(policy)

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[dict]]:
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        infos: list[dict] = []
        for i, env in enumerate(self.envs):
            try:
                obs, reward, done, info = env.step(actions[i])
            except Exception:
                logger.exception("environment %d faulted; truncating episode", i)
                obs, reward, done, info = env.reset(), 0.0, True, {"faulted": True}
                self._obs[i] = obs
                dones[i] = True
                infos.append(info)
                self._ep_rewards[i] = 0.0
                self._ep_lengths[i] = 0
                continue
            rewards[i] = reward
            self._ep_rewards[i] += reward
            self._ep_lengths[i] += 1
            if done:
                dones[i] = True
                info = dict(info)
                info["episode_reward"] = self._ep_rewards[i]
                info["episode_length"] = int(self._ep_lengths[i])
                self.finished_rewards.append(self._ep_rewards[i])
                self.finished_lengths.append(int(self._ep_lengths[i]))
                self._ep_rewards[i] = 0.0
                self._ep_lengths[i] = 0
                obs = env.reset()
            self._obs[i] = obs
            infos.append(info)
        return self._obs.copy(), rewards, dones, infos


@dataclass
class RolloutBuffer:
    """Fixed-size on-policy storage, (n_steps, n_envs, ...) major order."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    targets: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def allocate(
        cls, n_steps: int, n_envs: int, obs_dim: int, action_dim: int, target_dim: int | None
    ) -> "RolloutBuffer":
        return cls(
            obs=np.zeros((n_steps, n_envs, obs_dim)),
            actions=np.zeros((n_steps, n_envs, action_dim)),
            log_probs=np.zeros((n_steps, n_envs)),
            rewards=np.zeros((n_steps, n_envs)),
            values=np.zeros((n_steps, n_envs)),
            dones=np.zeros((n_steps, n_envs), dtype=bool),
            targets=None if target_dim is None else np.zeros((n_steps, n_envs, target_dim)),
        )

    @property
    def n_samples(self) -> int:
        return self.obs.shape[0] * self.obs.shape[1]

    def finalize(self, last_values: np.ndarray, gamma: float, gae_lambda: float) -> None:
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, last_values, gamma, gae_lambda
        )

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise ValueError("buffer not finalised")
        t, b = self.rewards.shape
        out = {
            "obs": self.obs.reshape(t * b, -1),
            "actions": self.actions.reshape(t * b, -1),
            "log_probs": self.log_probs.reshape(t * b),
            "advantages": self.advantages.reshape(t * b),
            "returns": self.returns.reshape(t * b),
        }
        if self.targets is not None:
            out["targets"] = self.targets.reshape(t * b, -1)
        return out


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_values: np.ndarray,
    gamma: float,
    gae_lambda: float,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE(lambda) with bootstrap values for episodes crossing the boundary.

    Returns raw (unnormalised) advantages and `returns = advantages +
    values`; `ppo_update` normalises advantages over its update batch.
    """
    t_max = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    not_done = ~np.asarray(dones, dtype=bool)
    gae = np.zeros(rewards.shape[1])
    next_values = last_values
    for t in range(t_max - 1, -1, -1):
        delta = rewards[t] + gamma * next_values * not_done[t] - values[t]
        gae = delta + gamma * gae_lambda * not_done[t] * gae
        advantages[t] = gae
        next_values = values[t]
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    if advantages.size <= 1:
        return advantages - advantages.mean()
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def collect_rollouts(
    policy,
    benv: BatchedEnv,
    n_steps: int,
    rng: np.random.Generator,
    gamma: float = 0.99,
    gae_lambda: float = 0.95,
) -> RolloutBuffer:
    """Fill and finalise a buffer by stepping the envs with a frozen policy.

    The last observation of the window is value-bootstrapped so episodes
    crossing the buffer boundary are handled; per-step latent targets are
    recorded when the envs expose them.
    """
    targets0 = benv.latent_targets()
    buffer = RolloutBuffer.allocate(
        n_steps,
        benv.n_envs,
        benv.obs_dim,
        benv.action_dim,
        None if targets0 is None else targets0.shape[1],
    )
    obs = benv.obs.copy()
    for t in range(n_steps):
        if buffer.targets is not None:
            buffer.targets[t] = benv.latent_targets()
        actions, log_probs, values = policy.act(obs, rng)
        next_obs, rewards, dones, _ = benv.step(actions)
        buffer.obs[t] = obs
        buffer.actions[t] = actions
        buffer.log_probs[t] = log_probs
        buffer.rewards[t] = rewards
        buffer.values[t] = values
        buffer.dones[t] = dones
        obs = next_obs
    buffer.finalize(policy.value(obs), gamma, gae_lambda)
    return buffer


@dataclass
class EmaShadow:
    """Exponential moving average of policy parameters.

    One `update` applies `shadow = alpha * shadow + (1 - alpha) * policy`
    elementwise; called once per PPO update.
    """

    policy: object
    alpha: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")

    @classmethod
    def of(cls, policy, alpha: float) -> "EmaShadow":
        return cls(policy.copy(), alpha)

    def update(self, live_policy) -> None:
        ema_update(self.policy.params(), live_policy.params(), self.alpha)


def ema_update(shadow_params: list[np.ndarray], policy_params: list[np.ndarray], alpha: float) -> None:
    if len(shadow_params) != len(policy_params):
        raise ValueError("parameter lists differ in length")
    for sp, p in zip(shadow_params, policy_params):
        if sp.shape != p.shape:
            raise ValueError(f"shape mismatch {sp.shape} vs {p.shape}")
        sp *= alpha
        sp += (1.0 - alpha) * p


def l1_estimate_loss(
    mean: np.ndarray, theta_slice: slice, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """L1 regression of the estimate slice of the action mean onto targets.

    Returns the loss (mean over samples of the per-sample L1 norm) and its
    gradient with respect to the full action mean.
    """
    diff = mean[:, theta_slice] - targets
    n = mean.shape[0]
    loss = float(np.abs(diff).sum(axis=1).mean())
    d_mean = np.zeros_like(mean)
    d_mean[:, theta_slice] = np.sign(diff) / n
    return loss, d_mean


def ppo_update(
    policy,
    buffer: RolloutBuffer,
    cfg: PpoConfig,
    optim: AdamState,
    rng: np.random.Generator,
    theta_slice: slice | None = None,
) -> dict[str, float]:
    """Clipped-surrogate update over shuffled minibatches.

    Adds the L1 estimate regression (weight `cfg.lambda_sup`) when the
    buffer carries latent targets and `theta_slice` names the estimate
    dims. A non-finite loss aborts the update and restores the weights
    from before this call.
    """
    data = buffer.flat()
    advantages = normalize_advantages(data["advantages"])
    n = data["obs"].shape[0]
    snapshot = [p.copy() for p in policy.params()]
    has_targets = theta_slice is not None and "targets" in data

    pol_losses, val_losses, entropies, clip_fracs, sup_losses, surrogates = [], [], [], [], [], []
    mb = min(cfg.minibatch_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start : start + mb]
            obs_mb = data["obs"][idx]
            act_mb = data["actions"][idx]
            adv_mb = advantages[idx]
            old_logp = data["log_probs"][idx]
            ret_mb = data["returns"][idx]
            k = idx.shape[0]

            ev = policy.evaluate(obs_mb, act_mb)
            ratio = np.exp(ev.log_probs - old_logp)
            surr1 = ratio * adv_mb
            surr2 = np.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range) * adv_mb
            surrogate = np.minimum(surr1, surr2)
            policy_loss = -float(surrogate.mean())
            value_err = ev.values - ret_mb
            value_loss = float(np.mean(value_err**2))
            entropy = ev.entropy
            loss = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy

            # Analytic gradients of the scalar loss w.r.t. head outputs.
            unclipped = surr1 <= surr2
            d_logp = -(adv_mb * ratio * unclipped) / k
            d_mu_unit, d_ls_unit = policy.head.log_prob_grads(ev.mean, act_mb)
            d_mean = d_logp[:, None] * d_mu_unit
            d_log_std = (d_logp[:, None] * d_ls_unit).sum(axis=0)
            d_log_std -= cfg.ent_coef  # entropy bonus, dH/dlog_std = 1
            d_value = cfg.vf_coef * 2.0 * value_err / k

            sup_loss = 0.0
            if has_targets and cfg.lambda_sup > 0.0:
                sup_loss, d_mean_sup = l1_estimate_loss(
                    ev.mean, theta_slice, data["targets"][idx]
                )
                loss += cfg.lambda_sup * sup_loss
                d_mean = d_mean + cfg.lambda_sup * d_mean_sup

            if not np.isfinite(loss):
                policy.set_params(snapshot)
                logger.warning("non-finite loss; update aborted, weights restored")
                return {
                    "policy_loss": float("nan"),
                    "value_loss": float("nan"),
                    "entropy": entropy,
                    "clip_fraction": float("nan"),
                    "sup_loss": float("nan"),
                    "surrogate": float("nan"),
                    "aborted": 1.0,
                }

            grads = policy.backward(ev.cache, d_mean, d_value, d_log_std)
            adam_step(policy.params(), grads, optim)
            policy.head.clamp()

            pol_losses.append(policy_loss)
            val_losses.append(value_loss)
            entropies.append(entropy)
            clip_fracs.append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip_range)))
            surrogates.append(float(surrogate.mean()))
            sup_losses.append(sup_loss)

    return {
        "policy_loss": float(np.mean(pol_losses)),
        "value_loss": float(np.mean(val_losses)),
        "entropy": float(np.mean(entropies)),
        "clip_fraction": float(np.mean(clip_fracs)),
        "sup_loss": float(np.mean(sup_losses)),
        "surrogate": float(np.mean(surrogates)),
        "aborted": 0.0,
    }


@dataclass
class TrainResult:
    policy: object
    ema: EmaShadow | None
    iterations: int
    steps: int
    mean_reward: float
    diverged: bool
    metrics_rows: list[dict] = field(default_factory=list)


def train_policy(
    policy,
    env_factory: Callable[[int], Env],
    cfg: PpoConfig,
    seed: int,
    theta_slice: slice | None = None,
    metrics_path=None,
    use_ema: bool | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run the full collect/update loop.

    `env_factory(i)` builds the i-th environment (it owns its RNG stream,
    derived from `seed`). When EMA rewards are enabled the shadow policy is
    handed to the envs before each collection so rewards come from the
    shadow's estimates. Divergence (non-finite mean reward or an aborted
    update) stops training and returns the last good weights.
    """
    rng = np.random.default_rng(seed)
    benv = BatchedEnv([env_factory(i) for i in range(cfg.n_envs)])
    optim = AdamState.for_params(policy.params(), cfg.lr, cfg.max_grad_norm)
    ema_on = cfg.use_ema_rewards if use_ema is None else use_ema
    ema = EmaShadow.of(policy, cfg.ema_alpha) if ema_on else None

    iterations = max(1, cfg.total_steps // (cfg.n_steps * cfg.n_envs))
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()

    rows: list[dict] = []
    last_good = [p.copy() for p in policy.params()]
    diverged = False
    steps_done = 0
    try:
        for it in range(1, iterations + 1):
            optim.lr = cfg.lr_at((it - 1) / max(iterations - 1, 1))
            if ema is not None:
                benv.set_reward_policy(ema.policy)
            buffer = collect_rollouts(policy, benv, cfg.n_steps, rng, cfg.gamma, cfg.gae_lambda)
            steps_done += buffer.n_samples
            stats = ppo_update(policy, buffer, cfg, optim, rng, theta_slice)
            mean_reward = (
                float(np.mean(benv.finished_rewards)) if benv.finished_rewards else float("nan")
            )
            if stats["aborted"] or not np.isfinite(stats["policy_loss"]):
                policy.set_params(last_good)
                diverged = True
                logger.warning("training diverged at iteration %d; restored last checkpoint", it)
                break
            last_good = [p.copy() for p in policy.params()]
            if ema is not None:
                ema.update(policy)
            row = {
                "iteration": it,
                "steps": steps_done,
                "mean_ep_reward": mean_reward,
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "entropy": stats["entropy"],
                "clip_fraction": stats["clip_fraction"],
                "sup_loss": stats["sup_loss"],
                "lr": optim.lr,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if progress is not None:
                progress(it, row)
    finally:
        if fh is not None:
            fh.close()

    mean_reward = float(np.mean(benv.finished_rewards)) if benv.finished_rewards else float("nan")
    return TrainResult(
        policy=policy,
        ema=ema,
        iterations=len(rows),
        steps=steps_done,
        mean_reward=mean_reward,
        diverged=diverged,
        metrics_rows=rows,
    )


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("iteration", "steps") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
