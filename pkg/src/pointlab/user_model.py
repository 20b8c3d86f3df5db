"""Simulator of gaze/mouse pointing as a POMDP.

A trial places a target at some distance, angle and width on a [-1, 1]^2
display. The simulated user repeatedly picks an aim point; the executed
fixation lands with signal-dependent motor noise, after which the target
is perceived with eccentricity-dependent noise and (optionally) a
probabilistic detection gate. Detected observations are fused into a
per-component Kalman belief over target location and width. Each step
costs time through a linear duration model; study 3 adds a keypress that
terminates the trial and converts success or failure into a terminal
reward scaled by the user's speed-accuracy preference.

Three study configurations share this simulator:

* study 1 — movement noise only is estimated; detection always succeeds;
  the trial ends when a fixation lands inside the target.
* study 2 — adds the detection gate; movement noise, perceptual noise and
  the duration intercept are estimated.
* study 3 — adds the keypress and estimates the preference as well.

An ensemble controller is trained across the whole parameter prior by
feeding the sampled parameters to the policy as extra inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .policies import ActorCriticMLP
from .ppo import PpoConfig, TrainResult, train_policy

PARAM_NAMES = (
    "rho_ocular",
    "rho_spatial",
    "rho_w",
    "rho_b",
    "sigma_w",
    "theta_a",
    "theta_b",
    "theta_pref",
    "r_max",
)

DEFAULT_PRIOR: dict[str, tuple[float, float]] = {
    "rho_ocular": (0.05, 0.4),
    "rho_spatial": (0.05, 0.3),
    "theta_b": (0.02, 0.12),
    "theta_pref": (0.0, 1.0),
}

DEFAULT_FIXED: dict[str, float] = {
    "rho_ocular": 0.2,
    "rho_spatial": 0.05,
    "rho_w": 0.05,
    "rho_b": 0.01,
    "sigma_w": 0.02,
    "theta_a": 0.05,
    "theta_b": 0.1,
    "theta_pref": 0.5,
    "r_max": 10.0,
}

# Perceptual-noise levels for the study-1 conditions (low/medium/high).
STUDY1_PERCEPTUAL_LEVELS = (0.05, 0.15, 0.30)

SIGMA_O_FLOOR = 1e-4
BELIEF_SENTINEL_VAR = 1.0

# Maximum distance of any point in the display from the origin.
MAX_TRIAL_DISTANCE = math.sqrt(2.0)


class DesignSpaceError(ValueError):
    """A trial or design lies outside the valid space."""


class EpisodeTerminated(RuntimeError):
    """step() was called on a finished episode."""


@dataclass(frozen=True)
class UserParams:
    """Latent per-user parameters of the pointing model."""

    rho_ocular: float
    rho_spatial: float
    rho_w: float
    rho_b: float
    sigma_w: float
    theta_a: float
    theta_b: float
    theta_pref: float
    r_max: float

    def __post_init__(self) -> None:
        for name in ("rho_ocular", "rho_spatial", "rho_w", "rho_b", "sigma_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.theta_pref <= 1.0:
            raise ValueError(f"theta_pref must be in [0, 1], got {self.theta_pref}")

    def get(self, name: str) -> float:
        return getattr(self, name)

    def digest(self) -> str:
        payload = ",".join(f"{getattr(self, n):.12g}" for n in PARAM_NAMES)
        return hashlib.sha1(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class Trial:
    """One experiment presented to the user: target distance, angle, width."""

    distance: float
    angle: float
    width: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.distance <= MAX_TRIAL_DISTANCE:
            raise DesignSpaceError(f"distance {self.distance} outside [0, {MAX_TRIAL_DISTANCE:.3f}]")
        if not 0.0 < self.width <= 1.0:
            raise DesignSpaceError(f"width {self.width} outside (0, 1]")


@dataclass(frozen=True)
class StudyConfig:
    """Study-specific constants: estimation mask, priors, POMDP knobs."""

    study: int
    estimated: tuple[str, ...]
    prior: dict[str, tuple[float, float]]
    fixed: dict[str, float]
    detection: bool
    keypress: bool
    max_steps: int = 20
    termination_penalty: float = 5.0
    detect_kappa: tuple[float, float, float] = (2.0, 8.0, 4.0)
    design_distance: tuple[float, float] = (0.1, 1.0)
    design_width: tuple[float, float] = (0.02, 0.3)
    n_experiments: int = 4

    def __post_init__(self) -> None:
        for name in self.estimated:
            if name not in self.prior:
                raise ValueError(f"estimated parameter {name!r} has no prior range")
            lo, hi = self.prior[name]
            if hi < lo:
                raise ValueError(f"prior range for {name!r} is inverted: ({lo}, {hi})")
        for name in PARAM_NAMES:
            if name not in self.estimated and name not in self.fixed:
                raise ValueError(f"parameter {name!r} neither estimated nor fixed")

    @property
    def n_estimated(self) -> int:
        return len(self.estimated)

    @property
    def action_dim(self) -> int:
        return 3 if self.keypress else 2

    @property
    def controller_obs_dim(self) -> int:
        return 9 + self.n_estimated

    def sample_params(self, rng: np.random.Generator) -> UserParams:
        values = dict(self.fixed)
        for name in self.estimated:
            lo, hi = self.prior[name]
            values[name] = float(rng.uniform(lo, hi))
        return UserParams(**{n: float(values[n]) for n in PARAM_NAMES})

    def params_from_normalized(self, theta: np.ndarray) -> UserParams:
        values = dict(self.fixed)
        for name, t in zip(self.estimated, np.asarray(theta, dtype=np.float64)):
            lo, hi = self.prior[name]
            values[name] = float(lo + np.clip(t, 0.0, 1.0) * (hi - lo))
        return UserParams(**{n: float(values[n]) for n in PARAM_NAMES})

    def normalize_params(self, params: UserParams) -> np.ndarray:
        out = np.zeros(self.n_estimated)
        for i, name in enumerate(self.estimated):
            lo, hi = self.prior[name]
            out[i] = (params.get(name) - lo) / (hi - lo) if hi > lo else 0.0
        return out

    def denormalize(self, theta: np.ndarray) -> np.ndarray:
        theta = np.clip(np.asarray(theta, dtype=np.float64), 0.0, 1.0)
        out = np.zeros_like(theta)
        for i, name in enumerate(self.estimated):
            lo, hi = self.prior[name]
            out[i] = lo + theta[i] * (hi - lo)
        return out

    def sample_trial(self, rng: np.random.Generator) -> Trial:
        return Trial(
            distance=float(rng.uniform(*self.design_distance)),
            angle=float(rng.uniform(0.0, 2.0 * math.pi)),
            width=float(rng.uniform(*self.design_width)),
        )

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "estimated": list(self.estimated),
            "prior": {k: list(v) for k, v in self.prior.items()},
            "fixed": dict(self.fixed),
            "detection": self.detection,
            "keypress": self.keypress,
            "max_steps": self.max_steps,
            "termination_penalty": self.termination_penalty,
            "detect_kappa": list(self.detect_kappa),
            "design_distance": list(self.design_distance),
            "design_width": list(self.design_width),
            "n_experiments": self.n_experiments,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        return cls(
            study=int(d["study"]),
            estimated=tuple(d["estimated"]),
            prior={k: (float(v[0]), float(v[1])) for k, v in d["prior"].items()},
            fixed={k: float(v) for k, v in d["fixed"].items()},
            detection=bool(d["detection"]),
            keypress=bool(d["keypress"]),
            max_steps=int(d["max_steps"]),
            termination_penalty=float(d["termination_penalty"]),
            detect_kappa=tuple(d["detect_kappa"]),
            design_distance=tuple(d["design_distance"]),
            design_width=tuple(d["design_width"]),
            n_experiments=int(d["n_experiments"]),
        )


def _study(study, estimated, fixed, detection, keypress, overrides) -> StudyConfig:
    prior = {k: DEFAULT_PRIOR[k] for k in estimated}
    prior.update(overrides.pop("prior", {}))
    fixed = {**fixed, **overrides.pop("fixed", {})}
    return StudyConfig(
        study=study,
        estimated=estimated,
        prior=prior,
        fixed=fixed,
        detection=detection,
        keypress=keypress,
        **overrides,
    )


def study1(perceptual_noise: float = 0.05, **overrides) -> StudyConfig:
    fixed = dict(DEFAULT_FIXED)
    fixed["rho_spatial"] = perceptual_noise
    fixed.pop("rho_ocular")
    return _study(1, ("rho_ocular",), fixed, detection=False, keypress=False, overrides=overrides)


def study2(**overrides) -> StudyConfig:
    fixed = dict(DEFAULT_FIXED)
    for name in ("rho_ocular", "rho_spatial", "theta_b"):
        fixed.pop(name)
    return _study(
        2, ("rho_ocular", "rho_spatial", "theta_b"), fixed,
        detection=True, keypress=False, overrides=overrides,
    )


def study3(**overrides) -> StudyConfig:
    fixed = dict(DEFAULT_FIXED)
    for name in ("rho_ocular", "rho_spatial", "theta_b", "theta_pref"):
        fixed.pop(name)
    return _study(
        3, ("rho_ocular", "rho_spatial", "theta_b", "theta_pref"), fixed,
        detection=True, keypress=True, overrides=overrides,
    )


def for_study(study: int, **overrides) -> StudyConfig:
    if study == 1:
        return study1(**overrides)
    if study == 2:
        return study2(**overrides)
    if study == 3:
        return study3(**overrides)
    raise ValueError(f"unknown study {study}")


def sample_user_params(cfg: StudyConfig, rng: np.random.Generator) -> UserParams:
    """Draw the estimated parameters from the prior, fix the rest."""
    return cfg.sample_params(rng)


# ---------------------------------------------------------------------------
# POMDP state, observation, belief
# ---------------------------------------------------------------------------


@dataclass
class PointingState:
    fixation: np.ndarray  # (2,)
    target: np.ndarray  # (2,)
    width: float
    step: int = 0
    terminated: bool = False


@dataclass
class PointingObservation:
    """Noisy, foveated view after one saccade.

    When the target goes undetected (`detected` False) the perceived
    fields are absent; the executed aim point is always present. Location
    and width variances are the ideal-observer noise levels used by the
    belief update.
    """

    aim: np.ndarray
    detected: bool
    perceived_target: np.ndarray | None = None
    perceived_width: float | None = None
    loc_var: float | None = None
    width_var: float | None = None


@dataclass
class Belief:
    """Per-component Gaussian posterior over (target_x, target_y, width)."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    var: np.ndarray = field(default_factory=lambda: np.full(3, BELIEF_SENTINEL_VAR))
    detected: bool = False


def detection_prob(state: PointingState, cfg: StudyConfig) -> float:
    """Probability the user detects the target from the current fixation.

    Logistic in width (increasing) and eccentricity (decreasing).
    """
    ecc = float(np.linalg.norm(state.target - state.fixation))
    k0, kw, ke = cfg.detect_kappa
    return float(1.0 / (1.0 + math.exp(-(k0 + kw * state.width - ke * ecc))))


def belief_update(belief: Belief, obs: PointingObservation) -> Belief:
    """Kalman fusion of one detected observation into the belief.

    The first detected observation initialises the belief at the
    observation with its own variance. Undetected observations leave the
    belief unchanged.
    """
    if not obs.detected:
        return belief
    if obs.loc_var is None or obs.width_var is None:
        raise ValueError("detected observation is missing its variances")
    if obs.loc_var <= 0.0 or obs.width_var <= 0.0:
        raise ValueError("observation variance must be positive")
    o = np.array([obs.perceived_target[0], obs.perceived_target[1], obs.perceived_width])
    o_var = np.array([obs.loc_var, obs.loc_var, obs.width_var])
    if not belief.detected:
        return Belief(mean=o, var=o_var.copy(), detected=True)
    gain = belief.var / (belief.var + o_var)
    mean = belief.mean + gain * (o - belief.mean)
    var = belief.var - gain * belief.var
    return Belief(mean=mean, var=var, detected=True)


def reset(trial: Trial, params: UserParams, rng: np.random.Generator) -> PointingState:
    """Start a trial: fixation at the origin, target placed from the trial."""
    target = np.clip(
        trial.distance * np.array([math.cos(trial.angle), math.sin(trial.angle)]), -1.0, 1.0
    )
    return PointingState(fixation=np.zeros(2), target=target, width=trial.width)


def _observe(
    state: PointingState, aim: np.ndarray, params: UserParams, cfg: StudyConfig, rng
) -> PointingObservation:
    ecc = float(np.linalg.norm(state.target - state.fixation))
    p = detection_prob(state, cfg) if cfg.detection else 1.0
    detected = bool(rng.random() < p)
    if not detected:
        return PointingObservation(aim=aim.copy(), detected=False)
    sigma_o = max(params.rho_spatial * ecc - params.rho_w * state.width + params.rho_b, SIGMA_O_FLOOR)
    sigma_w = max(params.sigma_w, SIGMA_O_FLOOR)
    perceived = state.target + rng.normal(0.0, sigma_o, 2)
    width = state.width + rng.normal(0.0, sigma_w)
    return PointingObservation(
        aim=aim.copy(),
        detected=True,
        perceived_target=perceived,
        perceived_width=float(width),
        loc_var=sigma_o**2,
        width_var=sigma_w**2,
    )


def step(
    state: PointingState,
    intent: np.ndarray,
    params: UserParams,
    cfg: StudyConfig,
    rng: np.random.Generator,
) -> tuple[PointingState, PointingObservation, float, bool, dict]:
    """Execute one submovement (or keypress) and return the new state.

    Motor noise scales with the intended saccade amplitude; the step
    reward is the negative duration of the executed submovement. A study-3
    keypress terminates immediately, judged at the current fixation.
    """
    if state.terminated:
        raise EpisodeTerminated("step() called after episode termination")
    intent = np.asarray(intent, dtype=np.float64)
    expected = 3 if cfg.keypress else 2
    if intent.shape[0] < expected:
        raise ValueError(f"intent needs {expected} components, got {intent.shape[0]}")

    in_target = float(np.linalg.norm(state.fixation - state.target)) <= state.width / 2.0
    if cfg.keypress and intent[2] > 0.0:
        success = in_target
        bonus = params.r_max * params.theta_pref
        reward = bonus if success else -bonus
        new_state = replace(state, terminated=True)
        obs = PointingObservation(aim=state.fixation.copy(), detected=False)
        return new_state, obs, float(reward), True, {
            "keypress": True,
            "success": success,
            "duration": 0.0,
            "amplitude": 0.0,
        }

    aim = np.clip(intent[:2], -1.0, 1.0)
    planned_amp = float(np.linalg.norm(aim - state.fixation))
    sigma_move = params.rho_ocular * planned_amp
    landed = aim + (rng.normal(0.0, sigma_move, 2) if sigma_move > 0.0 else 0.0)
    new_fixation = np.clip(landed, -1.0, 1.0)
    executed = float(np.linalg.norm(new_fixation - state.fixation))
    duration = params.theta_a * executed + params.theta_b
    reward = -duration

    new_state = PointingState(
        fixation=new_fixation,
        target=state.target,
        width=state.width,
        step=state.step + 1,
    )
    obs = _observe(new_state, aim, params, cfg, rng)

    done = False
    success = False
    dist_to_target = float(np.linalg.norm(new_fixation - state.target))
    if not cfg.keypress and dist_to_target <= state.width / 2.0:
        done = True
        success = True
    elif new_state.step >= cfg.max_steps:
        done = True
        reward -= cfg.termination_penalty
    new_state.terminated = done
    return new_state, obs, float(reward), done, {
        "keypress": False,
        "success": success,
        "duration": duration,
        "amplitude": executed,
    }


def controller_input(
    belief: Belief, fixation: np.ndarray, theta_norm: np.ndarray, cfg: StudyConfig
) -> np.ndarray:
    """Fixed-width policy input for a study.

    Layout: belief mean (3) | belief variance (3) | fixation (2) | detected
    flag (1) | normalised estimated-parameter values (one slot per entry of
    the study's estimation mask). Widths: 10 (study 1), 12 (study 2),
    13 (study 3).
    """
    out = np.zeros(cfg.controller_obs_dim)
    if belief.detected:
        out[0:3] = belief.mean
        out[3:6] = belief.var
        out[8] = 1.0
    else:
        out[3:6] = BELIEF_SENTINEL_VAR
    out[6:8] = fixation
    out[9:] = theta_norm
    return out


# ---------------------------------------------------------------------------
# Episode traces
# ---------------------------------------------------------------------------


@dataclass
class EpisodeTrace:
    """Everything observable about one trial, for export and analysis."""

    study: int
    distance: float
    angle: float
    width: float
    target: tuple[float, float]
    params_id: str
    fixations: list[tuple[float, float]]
    durations: list[float]
    detected: list[bool]
    keypress_step: int | None
    total_time: float
    success: bool
    steps: int

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "design": {"distance": self.distance, "angle": self.angle, "width": self.width},
            "target": list(self.target),
            "params_id": self.params_id,
            "fixations": [list(f) for f in self.fixations],
            "durations": self.durations,
            "detected": self.detected,
            "keypress_step": self.keypress_step,
            "total_time": self.total_time,
            "success": self.success,
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeTrace":
        return cls(
            study=int(d["study"]),
            distance=float(d["design"]["distance"]),
            angle=float(d["design"]["angle"]),
            width=float(d["design"]["width"]),
            target=tuple(d["target"]),
            params_id=str(d["params_id"]),
            fixations=[tuple(f) for f in d["fixations"]],
            durations=[float(x) for x in d["durations"]],
            detected=[bool(z) for z in d["detected"]],
            keypress_step=d["keypress_step"],
            total_time=float(d["total_time"]),
            success=bool(d["success"]),
            steps=int(d["steps"]),
        )


def write_traces(path, traces: list[EpisodeTrace]) -> None:
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_dict()) + "\n")


def read_traces(path) -> list[EpisodeTrace]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(EpisodeTrace.from_dict(json.loads(line)))
    return out


def run_episode(
    controller,
    trial: Trial,
    params: UserParams,
    cfg: StudyConfig,
    rng: np.random.Generator,
    deterministic: bool = True,
) -> EpisodeTrace:
    """Simulate one full trial with the given controller policy."""
    state = reset(trial, params, rng)
    belief = Belief()
    theta_norm = cfg.normalize_params(params)
    fixations: list[tuple[float, float]] = []
    durations: list[float] = []
    detected: list[bool] = []
    keypress_step: int | None = None
    success = False
    done = False
    while not done:
        obs_vec = controller_input(belief, state.fixation, theta_norm, cfg)
        action, _, _ = controller.act(obs_vec, rng, deterministic=deterministic)
        state, obs, _, done, info = step(state, action, params, cfg, rng)
        if info["keypress"]:
            keypress_step = state.step
        else:
            fixations.append((float(state.fixation[0]), float(state.fixation[1])))
            durations.append(info["duration"])
            detected.append(obs.detected)
            belief = belief_update(belief, obs)
        if done:
            success = info["success"]
    return EpisodeTrace(
        study=cfg.study,
        distance=trial.distance,
        angle=trial.angle,
        width=trial.width,
        target=(float(state.target[0]), float(state.target[1])),
        params_id=params.digest(),
        fixations=fixations,
        durations=durations,
        detected=detected,
        keypress_step=keypress_step,
        total_time=float(sum(durations)),
        success=success,
        steps=len(fixations) + (1 if keypress_step is not None else 0),
    )


# ---------------------------------------------------------------------------
# Training environment and the ensemble training entry point
# ---------------------------------------------------------------------------


class PointingEnv:
    """Single training environment: fresh trial and user parameters each
    episode, controller observations as defined by `controller_input`."""

    def __init__(self, cfg: StudyConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.obs_dim = cfg.controller_obs_dim
        self.action_dim = cfg.action_dim
        self._state: PointingState | None = None
        self._belief = Belief()
        self._params: UserParams | None = None
        self._theta_norm = np.zeros(cfg.n_estimated)

    def reset(self) -> np.ndarray:
        self._params = self.cfg.sample_params(self.rng)
        self._theta_norm = self.cfg.normalize_params(self._params)
        trial = self.cfg.sample_trial(self.rng)
        self._state = reset(trial, self._params, self.rng)
        self._belief = Belief()
        return controller_input(self._belief, self._state.fixation, self._theta_norm, self.cfg)

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, dict]:
        if self._state is None:
            raise RuntimeError("reset() must be called first")
        self._state, obs, reward, done, info = step(
            self._state, action, self._params, self.cfg, self.rng
        )
        if not info["keypress"]:
            self._belief = belief_update(self._belief, obs)
        next_obs = controller_input(self._belief, self._state.fixation, self._theta_norm, self.cfg)
        return next_obs, reward, done, info


def build_controller(cfg: StudyConfig, rng: np.random.Generator) -> ActorCriticMLP:
    return ActorCriticMLP(cfg.controller_obs_dim, cfg.action_dim, rng)


def train_ensemble(
    cfg: StudyConfig,
    ppo_cfg: PpoConfig,
    seed: int,
    metrics_path=None,
    progress=None,
) -> tuple[ActorCriticMLP, TrainResult]:
    """Train one controller across the full prior (designs and parameters
    sampled fresh every episode)."""
    policy = build_controller(cfg, np.random.default_rng(seed))
    result = train_policy(
        policy,
        env_factory=lambda i: PointingEnv(cfg, seed * 1_000_003 + i),
        cfg=ppo_cfg,
        seed=seed + 1,
        metrics_path=metrics_path,
        use_ema=False,
        progress=progress,
    )
    return policy, result
