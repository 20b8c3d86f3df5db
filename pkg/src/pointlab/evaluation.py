"""Analysis of trained models: fits, error curves, histograms, behaviour.

Everything here is a pure function of checkpoints, configs and seeds, so
results are replayable. Reported means carry standard errors computed as
sample standard deviation over sqrt(n). Tables are written as CSV; plots
are described by a compact JSON file (series, axes, error bands) for
external rendering.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analyst import AnalystEnv, pointing_mapper
from .user_model import StudyConfig, run_episode


@dataclass(frozen=True)
class RegressionFit:
    """Ordinary least squares of estimates against ground truths."""

    slope: float
    intercept: float
    r_squared: float
    n: int


def linear_fit(x, y) -> RegressionFit:
    """Closed-form OLS fit; R^2 = 1 - SS_res / SS_tot.

    Rejects fewer than two points and constant x (no identifiable slope).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if x.size < 2:
        raise ValueError("need at least two points")
    if np.all(x == x[0]):
        raise ValueError("x is constant; slope is unidentifiable")
    x_mean, y_mean = x.mean(), y.mean()
    sxx = float(np.sum((x - x_mean) ** 2))
    sxy = float(np.sum((x - x_mean) * (y - y_mean)))
    slope = sxy / sxx
    intercept = y_mean - slope * x_mean
    residuals = y - (slope * x + intercept)
    ss_res = float(np.sum(residuals**2))
    ss_tot = float(np.sum((y - y_mean) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RegressionFit(slope=slope, intercept=intercept, r_squared=r2, n=int(x.size))


def mean_stderr(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), stderr


@dataclass
class ErrorCurve:
    """Mean normalised-L1 estimation error per experiment count (0..M)."""

    condition: str
    counts: list[int]
    means: list[float]
    stderrs: list[float]


@dataclass
class EvalEpisode:
    """Per-episode evaluation record: truth, per-count estimates, designs."""

    theta_p: np.ndarray  # prior-normalised truth
    estimates: list[np.ndarray]  # normalised estimate at count 0..M
    designs: list[tuple[float, float]]  # (distance, width) per experiment


def run_eval_episodes(
    user_policy,
    cfg: StudyConfig,
    analyst_policy,
    n_eval: int,
    seed: int,
    random_designs: bool = False,
    env: AnalystEnv | None = None,
) -> list[EvalEpisode]:
    """Deterministic-mode analyst episodes against fresh simulated users."""
    if env is None:
        env = AnalystEnv(
            user_policy, cfg, seed=seed, mode="eval", random_designs=random_designs
        )
    mapper = pointing_mapper(cfg)
    episodes: list[EvalEpisode] = []
    for _ in range(n_eval):
        obs = env.reset()
        estimates: list[np.ndarray] = []
        designs: list[tuple[float, float]] = []
        done = False
        while not done:
            action, _, _ = analyst_policy.act(obs, deterministic=True)
            estimates.append(mapper.theta(action))
            obs, _, done, info = env.step(action)
            if "design" in info:
                designs.append((info["design"].distance, info["design"].width))
        episodes.append(
            EvalEpisode(theta_p=env.true_theta_norm(), estimates=estimates, designs=designs)
        )
    return episodes


def error_curve_from_episodes(episodes: list[EvalEpisode], condition: str) -> ErrorCurve:
    n_counts = len(episodes[0].estimates)
    means, stderrs = [], []
    for k in range(n_counts):
        errs = [float(np.abs(ep.estimates[k] - ep.theta_p).sum()) for ep in episodes]
        m, se = mean_stderr(errs)
        means.append(m)
        stderrs.append(se)
    return ErrorCurve(condition=condition, counts=list(range(n_counts)), means=means, stderrs=stderrs)


def error_curve(
    user_policy,
    cfg: StudyConfig,
    analyst_policy,
    n_eval: int,
    seed: int,
    condition: str = "optimised",
) -> ErrorCurve:
    """Estimation error versus experiment count.

    The "random" condition replaces the analyst's designs with uniform
    draws from the design space while keeping its estimation head.
    """
    episodes = run_eval_episodes(
        user_policy, cfg, analyst_policy, n_eval, seed, random_designs=condition == "random"
    )
    return error_curve_from_episodes(episodes, condition)


def regression_table(episodes: list[EvalEpisode], cfg: StudyConfig) -> dict[str, RegressionFit]:
    """One truth-vs-final-estimate OLS fit per estimated parameter (raw units)."""
    fits: dict[str, RegressionFit] = {}
    for i, name in enumerate(cfg.estimated):
        lo, hi = cfg.prior[name]
        truths = [lo + ep.theta_p[i] * (hi - lo) for ep in episodes]
        estimates = [lo + ep.estimates[-1][i] * (hi - lo) for ep in episodes]
        fits[name] = linear_fit(truths, estimates)
    return fits


def design_histogram(
    designs: list[tuple[float, float]], cfg: StudyConfig, bins: int = 10
) -> dict[str, dict]:
    """Per-dimension histograms of chosen designs (distance and width)."""
    if not designs:
        raise ValueError("no designs logged")
    arr = np.asarray(designs, dtype=np.float64)
    out = {}
    for dim, (name, bounds) in enumerate(
        [("distance", cfg.design_distance), ("width", cfg.design_width)]
    ):
        counts, edges = np.histogram(arr[:, dim], bins=bins, range=bounds)
        out[name] = {"counts": counts.tolist(), "edges": edges.tolist()}
    return out


# ---------------------------------------------------------------------------
# User-model behaviour versus parameter value
# ---------------------------------------------------------------------------


def _behaviour_chunk(args) -> list[dict]:
    user_policy, cfg, name, values, n_episodes, seed = args
    rng = np.random.default_rng(seed)
    rows = []
    for value in values:
        theta = {}
        for pname in cfg.estimated:
            lo, hi = cfg.prior[pname]
            theta[pname] = 0.5 * (lo + hi)
        theta[name] = value
        params = cfg.params_from_normalized(
            np.array(
                [
                    (theta[p] - cfg.prior[p][0]) / (cfg.prior[p][1] - cfg.prior[p][0])
                    if cfg.prior[p][1] > cfg.prior[p][0]
                    else 0.0
                    for p in cfg.estimated
                ]
            )
        )
        steps, errors = [], []
        for _ in range(n_episodes):
            trial = cfg.sample_trial(rng)
            trace = run_episode(user_policy, trial, params, cfg, rng, deterministic=True)
            steps.append(trace.steps)
            errors.append(0.0 if trace.success else 1.0)
        m_steps, se_steps = mean_stderr(steps)
        m_err, se_err = mean_stderr(errors)
        rows.append(
            {
                "parameter": name,
                "value": value,
                "mean_steps": m_steps,
                "stderr_steps": se_steps,
                "error_rate": m_err,
                "stderr_error_rate": se_err,
                "n": n_episodes,
            }
        )
    return rows


def behaviour_curves(
    user_policy,
    cfg: StudyConfig,
    parameter: str,
    grid: list[float],
    n_episodes: int,
    seed: int,
    workers: int = 1,
) -> list[dict]:
    """Steps-to-target and error rate across one parameter's grid.

    Other estimated parameters sit at their prior midpoints. Episodes use
    deterministic controller actions; randomness comes from the simulator.
    """
    if parameter not in cfg.estimated:
        raise ValueError(f"{parameter!r} is not estimated in study {cfg.study}")
    if workers <= 1 or len(grid) == 1:
        return _behaviour_chunk((user_policy, cfg, parameter, list(grid), n_episodes, seed))
    chunks = [
        (user_policy, cfg, parameter, [v], n_episodes, seed + 31 * i)
        for i, v in enumerate(grid)
    ]
    rows: list[dict] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_behaviour_chunk, chunks):
            rows.extend(part)
    return rows


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------


def write_table(path, rows: list[dict], fields: list[str] | None = None) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fields = fields or list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def curve_rows(curve: ErrorCurve) -> list[dict]:
    return [
        {"condition": curve.condition, "count": c, "mean_error": m, "stderr": s}
        for c, m, s in zip(curve.counts, curve.means, curve.stderrs)
    ]


def fit_rows(fits: dict[str, RegressionFit]) -> list[dict]:
    return [
        {
            "parameter": name,
            "slope": fit.slope,
            "intercept": fit.intercept,
            "r_squared": fit.r_squared,
            "n": fit.n,
        }
        for name, fit in fits.items()
    ]


def write_plot_description(path, title: str, x_label: str, y_label: str, series: list[dict]) -> None:
    """Compact plot spec: each series has points and an optional stderr band."""
    payload = {"title": title, "axes": {"x": x_label, "y": y_label}, "series": series}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def curve_series(curve: ErrorCurve) -> dict:
    return {
        "name": curve.condition,
        "x": curve.counts,
        "y": curve.means,
        "band": curve.stderrs,
    }
