"""The experiment-designing agent's environment and observation encodings.

One analyst episode fixes a latent user (parameters drawn from the
prior), then alternates: the analyst proposes a design (target distance
and width) plus its current parameter estimate, the frozen user model
runs one trial at that design, and the resulting record is appended to
the analyst's memory. The per-step reward is the negative L1 distance
between estimate and truth in prior-normalised units. After `M`
experiments one final estimate-only step closes the episode, so the
estimate conditioned on all records is trained as well.

Records are encoded into fixed layouts: study 1 packs one flat vector per
experiment (summary statistics); studies 2 and 3 pack a context row plus
one row per consecutive fixation pair, padded and masked to the maximum
step count. Coordinates stay in display units so encoding is invertible;
durations and movement times carry fixed documented scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .policies import PooledLayout, PooledPolicy, RelationalPolicy, SeqLayout
from .ppo import PpoConfig, TrainResult, train_policy
from .user_model import EpisodeTrace, StudyConfig, Trial, UserParams, run_episode

# Fixed input scales (documented part of the layouts below).
MT_SCALE = 0.5  # movement time slot holds mt * MT_SCALE
DUR_SCALE = 5.0  # duration slots hold duration * DUR_SCALE

STUDY1_RECORD_FIELDS = (
    "design_distance",
    "design_width",
    "movement_time",
    "final_x",
    "final_y",
    "target_x",
    "target_y",
)
STUDY1_SCALES = np.array([1.0, 1.0, MT_SCALE, 1.0, 1.0, 1.0, 1.0])
STUDY1_OUTCOME_SLOTS = slice(2, 7)

CONTEXT_FIELDS = (
    "design_distance",
    "design_width",
    "target_x",
    "target_y",
    "width",
    "final_x",
    "final_y",
    "movement_time",
    "n_fixations",
    "keypress",
    "success",
)
CONTEXT_OUTCOME_SLOTS = slice(2, 11)

PAIR_FIELDS = (
    "target_x",
    "target_y",
    "width",
    "x_t",
    "y_t",
    "dur_t",
    "x_next",
    "y_next",
    "dur_next",
)
PAIR_SCALES = np.array([1.0, 1.0, 1.0, 1.0, 1.0, DUR_SCALE, 1.0, 1.0, DUR_SCALE])


class DesignError(ValueError):
    """A design lies outside the design space."""


@dataclass(frozen=True)
class Design:
    """Controllable experiment specification: distance and width."""

    distance: float
    width: float

    def validate(self, cfg: StudyConfig) -> "Design":
        lo_d, hi_d = cfg.design_distance
        lo_w, hi_w = cfg.design_width
        if not (lo_d <= self.distance <= hi_d and lo_w <= self.width <= hi_w):
            raise DesignError(
                f"design ({self.distance}, {self.width}) outside "
                f"[{lo_d}, {hi_d}] x [{lo_w}, {hi_w}]"
            )
        return self


def clip_design(design: Design, cfg: StudyConfig) -> tuple[Design, bool]:
    """Clip a design into the space; the flag reports whether clipping bit."""
    d = float(np.clip(design.distance, *cfg.design_distance))
    w = float(np.clip(design.width, *cfg.design_width))
    clipped = (d != design.distance) or (w != design.width)
    return Design(d, w), clipped


@dataclass
class Study1Outcome:
    movement_time: float
    final_x: float
    final_y: float
    target_x: float
    target_y: float
    width: float


@dataclass
class SequenceOutcome:
    fixations: list[tuple[float, float]]
    durations: list[float]
    target_x: float
    target_y: float
    width: float
    keypress: bool
    success: bool

    @property
    def movement_time(self) -> float:
        return float(sum(self.durations))


@dataclass
class ExperimentRecord:
    """One (design, outcome) pair in the analyst's memory."""

    design: Design
    outcome: Study1Outcome | SequenceOutcome

    def to_payload(self, study: int) -> dict:
        if study == 1:
            o = self.outcome
            return {
                "design": {"distance": self.design.distance, "width": self.design.width},
                "movement_time": o.movement_time,
                "click": [o.final_x, o.final_y],
                "target": [o.target_x, o.target_y],
                "width": o.width,
            }
        o = self.outcome
        return {
            "design": {"distance": self.design.distance, "width": self.design.width},
            "fixations": [list(f) for f in o.fixations],
            "durations": list(o.durations),
            "target": [o.target_x, o.target_y],
            "width": o.width,
            "keypress": bool(o.keypress),
            "success": bool(o.success),
        }

    @classmethod
    def from_payload(cls, study: int, payload: dict) -> "ExperimentRecord":
        design = Design(
            float(payload["design"]["distance"]), float(payload["design"]["width"])
        )
        if study == 1:
            return cls(
                design,
                Study1Outcome(
                    movement_time=float(payload["movement_time"]),
                    final_x=float(payload["click"][0]),
                    final_y=float(payload["click"][1]),
                    target_x=float(payload["target"][0]),
                    target_y=float(payload["target"][1]),
                    width=float(payload["width"]),
                ),
            )
        return cls(
            design,
            SequenceOutcome(
                fixations=[tuple(map(float, f)) for f in payload["fixations"]],
                durations=[float(x) for x in payload["durations"]],
                target_x=float(payload["target"][0]),
                target_y=float(payload["target"][1]),
                width=float(payload["width"]),
                keypress=bool(payload.get("keypress", False)),
                success=bool(payload.get("success", False)),
            ),
        )


def record_from_trace(trace: EpisodeTrace, design: Design, study: int) -> ExperimentRecord:
    if study == 1:
        final = trace.fixations[-1] if trace.fixations else (0.0, 0.0)
        return ExperimentRecord(
            design,
            Study1Outcome(
                movement_time=trace.total_time,
                final_x=final[0],
                final_y=final[1],
                target_x=trace.target[0],
                target_y=trace.target[1],
                width=trace.width,
            ),
        )
    return ExperimentRecord(
        design,
        SequenceOutcome(
            fixations=list(trace.fixations),
            durations=list(trace.durations),
            target_x=trace.target[0],
            target_y=trace.target[1],
            width=trace.width,
            keypress=trace.keypress_step is not None,
            success=trace.success,
        ),
    )


def discrepancy(theta_p_norm: np.ndarray, theta_e_norm: np.ndarray) -> float:
    """Negative L1 distance between truth and estimate, prior-normalised."""
    theta_p_norm = np.asarray(theta_p_norm, dtype=np.float64)
    theta_e_norm = np.asarray(theta_e_norm, dtype=np.float64)
    if theta_p_norm.shape != theta_e_norm.shape:
        raise ValueError(f"shape mismatch {theta_p_norm.shape} vs {theta_e_norm.shape}")
    return -float(np.abs(theta_p_norm - theta_e_norm).sum())


class ActionMapper:
    """Maps raw policy actions to (designs, estimates).

    Design components pass through an affine sigmoid into their bounds
    (never clipped at training time); estimate components are clamped to
    the normalised prior box [0, 1].
    """

    def __init__(self, design_bounds: list[tuple[float, float]], n_estimates: int):
        self.design_bounds = [(float(lo), float(hi)) for lo, hi in design_bounds]
        self.n_estimates = n_estimates
        self.n_designs = len(design_bounds)
        self.action_dim = self.n_designs + n_estimates
        self.theta_slice = slice(self.n_designs, self.n_designs + n_estimates)

    def designs(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        out = np.zeros(self.n_designs)
        for i, (lo, hi) in enumerate(self.design_bounds):
            squashed = 0.5 * (1.0 + math.tanh(0.5 * float(raw[i])))  # overflow-safe sigmoid
            out[i] = lo + (hi - lo) * squashed
        return out

    def theta(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        return np.clip(raw[self.theta_slice], 0.0, 1.0)

    def split(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.designs(raw), self.theta(raw)


def pointing_mapper(cfg: StudyConfig) -> ActionMapper:
    return ActionMapper([cfg.design_distance, cfg.design_width], cfg.n_estimated)


@dataclass
class AnalystAction:
    """What the analyst emits each step: next design and current estimate."""

    design: Design
    theta: np.ndarray  # raw parameter units
    theta_norm: np.ndarray  # prior-normalised, clamped to [0, 1]


class OutcomeEncoder:
    """Packs experiment records into the study's policy observation layout."""

    def __init__(self, cfg: StudyConfig):
        self.cfg = cfg
        self.m = cfg.n_experiments
        if cfg.study == 1:
            self.pooled = PooledLayout(self.m, len(STUDY1_RECORD_FIELDS))
            self.seq = None
            self.obs_dim = self.pooled.obs_dim
        else:
            self.pooled = None
            self.seq = SeqLayout(
                max_records=self.m,
                context_dim=len(CONTEXT_FIELDS),
                max_pairs=cfg.max_steps - 1,
                pair_dim=len(PAIR_FIELDS),
            )
            self.obs_dim = self.seq.obs_dim

    def encode_record(self, record: ExperimentRecord, mask_outcome: bool = False) -> np.ndarray:
        """One record to its flat vector (study 1) or packed block (2-3)."""
        if self.cfg.study == 1:
            o = record.outcome
            vec = np.array(
                [
                    record.design.distance,
                    record.design.width,
                    o.movement_time,
                    o.final_x,
                    o.final_y,
                    o.target_x,
                    o.target_y,
                ]
            )
            if mask_outcome:
                vec[STUDY1_OUTCOME_SLOTS] = 0.0
            return vec * STUDY1_SCALES
        o = record.outcome
        n_fix = len(o.fixations)
        context = np.array(
            [
                record.design.distance,
                record.design.width,
                o.target_x,
                o.target_y,
                o.width,
                o.fixations[-1][0] if n_fix else 0.0,
                o.fixations[-1][1] if n_fix else 0.0,
                o.movement_time * MT_SCALE,
                n_fix / self.cfg.max_steps,
                1.0 if o.keypress else 0.0,
                1.0 if o.success else 0.0,
            ]
        )
        pairs = np.zeros((max(n_fix - 1, 0), len(PAIR_FIELDS)))
        for t in range(n_fix - 1):
            pairs[t] = [
                o.target_x,
                o.target_y,
                o.width,
                o.fixations[t][0],
                o.fixations[t][1],
                o.durations[t] * DUR_SCALE,
                o.fixations[t + 1][0],
                o.fixations[t + 1][1],
                o.durations[t + 1] * DUR_SCALE,
            ]
        if mask_outcome:
            context[CONTEXT_OUTCOME_SLOTS] = 0.0
            pairs = np.zeros((0, len(PAIR_FIELDS)))
        return self.seq.pack_record(context, pairs)

    def decode_study1(self, vec: np.ndarray) -> dict[str, float]:
        values = np.asarray(vec, dtype=np.float64) / STUDY1_SCALES
        return dict(zip(STUDY1_RECORD_FIELDS, values))

    def decode_pairs(self, block: np.ndarray) -> np.ndarray:
        """Recover unscaled pair rows (k, pair_dim) from one packed block."""
        lay = self.seq
        body = block[lay.context_dim : lay.context_dim + lay.max_pairs * lay.pair_dim]
        mask = block[lay.context_dim + lay.max_pairs * lay.pair_dim :]
        rows = body.reshape(lay.max_pairs, lay.pair_dim)[mask > 0.5]
        return rows / PAIR_SCALES

    def encode_observation(
        self,
        records: list[ExperimentRecord],
        mask_outcomes: bool = False,
        unmask: bool = False,
        noise_std: float = 0.0,
        noise_rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Full memory to one flat policy observation.

        `mask_outcomes` hides outcome payloads (designs stay visible) until
        `unmask` is set — the non-adaptive training condition. `noise_std`
        adds Gaussian corruption to the encoded outcome slots.
        """
        hide = mask_outcomes and not unmask
        encoded = [self.encode_record(r, mask_outcome=hide) for r in records]
        if noise_std > 0.0 and not hide and encoded:
            if noise_rng is None:
                raise ValueError("noise_std > 0 requires noise_rng")
            for vec in encoded:
                if self.cfg.study == 1:
                    vec[STUDY1_OUTCOME_SLOTS] += noise_rng.normal(
                        0.0, noise_std, vec[STUDY1_OUTCOME_SLOTS].shape
                    )
                else:
                    vec[CONTEXT_OUTCOME_SLOTS] += noise_rng.normal(
                        0.0, noise_std, vec[CONTEXT_OUTCOME_SLOTS].shape
                    )
        if self.cfg.study == 1:
            if not encoded:
                return self.pooled.pack(np.zeros((0, len(STUDY1_RECORD_FIELDS))))
            return self.pooled.pack(np.stack(encoded))
        return self.seq.pack(encoded)


def build_analyst_policy(cfg: StudyConfig, rng: np.random.Generator):
    encoder = OutcomeEncoder(cfg)
    mapper = pointing_mapper(cfg)
    if cfg.study == 1:
        return PooledPolicy(encoder.pooled, mapper.action_dim, rng)
    return RelationalPolicy(encoder.seq, mapper.action_dim, rng)


def analyst_act(
    policy,
    cfg: StudyConfig,
    records: list[ExperimentRecord],
    rng: np.random.Generator | None = None,
    deterministic: bool = True,
    encoder: OutcomeEncoder | None = None,
) -> tuple[AnalystAction, float, float]:
    """Evaluate the analyst on a memory of records.

    Returns the action (design squashed into the design space, estimate
    clamped to the prior box), its log-density, and the value estimate.
    """
    encoder = encoder or OutcomeEncoder(cfg)
    mapper = pointing_mapper(cfg)
    obs = encoder.encode_observation(records)
    raw, log_prob, value = policy.act(obs, rng, deterministic=deterministic)
    designs, theta_norm = mapper.split(raw)
    return (
        AnalystAction(
            design=Design(float(designs[0]), float(designs[1])),
            theta=cfg.denormalize(theta_norm),
            theta_norm=theta_norm,
        ),
        float(log_prob),
        float(value),
    )


class AnalystEnv:
    """Training environment around one frozen user model.

    An episode is `M + 1` analyst actions: the first `M` each trigger one
    user trial at the proposed design, the last is estimate-only. In
    training mode the latent user parameters are available as per-step
    targets and (optionally, via `set_reward_policy`) rewards are scored
    against a shadow network's estimates rather than the acting policy's.
    Evaluation mode exposes nothing derived from the latent parameters.
    """

    def __init__(
        self,
        user_policy,
        cfg: StudyConfig,
        seed: int,
        mode: str = "train",
        random_designs: bool = False,
        mask_outcomes: bool = False,
        obs_noise: float = 0.0,
    ):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.user_policy = user_policy
        self.cfg = cfg
        self.mode = mode
        self.random_designs = random_designs
        self.mask_outcomes = mask_outcomes
        self.obs_noise = obs_noise
        self.rng = np.random.default_rng(seed)
        self.encoder = OutcomeEncoder(cfg)
        self.mapper = pointing_mapper(cfg)
        self.obs_dim = self.encoder.obs_dim
        self.action_dim = self.mapper.action_dim
        self.m = cfg.n_experiments
        self._reward_policy = None
        self._theta_p: UserParams | None = None
        self._theta_p_norm: np.ndarray | None = None
        self.records: list[ExperimentRecord] = []
        self._n_actions = 0
        self._last_obs: np.ndarray | None = None

    def set_reward_policy(self, policy) -> None:
        self._reward_policy = policy

    def latent_target(self) -> np.ndarray | None:
        if self.mode != "train":
            return None
        return self._theta_p_norm.copy()

    def true_theta_norm(self) -> np.ndarray:
        """Ground truth for evaluation harnesses (never enters observations)."""
        if self._theta_p_norm is None:
            raise RuntimeError("reset() must be called first")
        return self._theta_p_norm.copy()

    def _encode(self) -> np.ndarray:
        obs = self.encoder.encode_observation(
            self.records,
            mask_outcomes=self.mask_outcomes,
            unmask=len(self.records) >= self.m,
            noise_std=self.obs_noise,
            noise_rng=self.rng if self.obs_noise > 0 else None,
        )
        self._last_obs = obs
        return obs

    def reset(self) -> np.ndarray:
        self._theta_p = self.cfg.sample_params(self.rng)
        self._theta_p_norm = self.cfg.normalize_params(self._theta_p)
        self.records = []
        self._n_actions = 0
        return self._encode()

    def run_experiment(self, design: Design) -> ExperimentRecord:
        design, _ = clip_design(design, self.cfg)
        trial = Trial(
            distance=design.distance,
            angle=float(self.rng.uniform(0.0, 2.0 * math.pi)),
            width=design.width,
        )
        trace = run_episode(
            self.user_policy, trial, self._theta_p, self.cfg, self.rng, deterministic=True
        )
        return record_from_trace(trace, design, self.cfg.study)

    def step(self, raw_action: np.ndarray) -> tuple[np.ndarray, float, bool, dict]:
        if self._theta_p is None:
            raise RuntimeError("reset() must be called first")
        if self._n_actions > self.m:
            raise RuntimeError("episode is done")
        designs, theta_e = self.mapper.split(raw_action)
        if self._reward_policy is not None:
            shadow_raw, _, _ = self._reward_policy.act(self._last_obs, deterministic=True)
            theta_r = self.mapper.theta(shadow_raw)
        else:
            theta_r = theta_e
        reward = discrepancy(self._theta_p_norm, theta_r)

        info: dict = {"theta_e": theta_e}
        if self._n_actions < self.m:
            if self.random_designs:
                design = Design(
                    float(self.rng.uniform(*self.cfg.design_distance)),
                    float(self.rng.uniform(*self.cfg.design_width)),
                )
            else:
                design = Design(float(designs[0]), float(designs[1]))
            self.records.append(self.run_experiment(design))
            info["design"] = design
        self._n_actions += 1
        done = self._n_actions > self.m
        return self._encode(), reward, done, info


def train_analyst(
    user_policy,
    cfg: StudyConfig,
    ppo_cfg: PpoConfig,
    seed: int,
    random_designs: bool = False,
    mask_outcomes: bool = False,
    metrics_path=None,
    progress=None,
) -> tuple[object, TrainResult]:
    """Train the experiment-design policy against the frozen user model."""
    policy = build_analyst_policy(cfg, np.random.default_rng(seed))
    mapper = pointing_mapper(cfg)
    result = train_policy(
        policy,
        env_factory=lambda i: AnalystEnv(
            user_policy,
            cfg,
            seed=seed * 2_000_003 + i,
            mode="train",
            random_designs=random_designs,
            mask_outcomes=mask_outcomes,
        ),
        cfg=ppo_cfg,
        seed=seed + 7,
        theta_slice=mapper.theta_slice,
        metrics_path=metrics_path,
        progress=progress,
    )
    return policy, result
