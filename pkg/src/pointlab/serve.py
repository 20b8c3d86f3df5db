"""Deployment service: a frozen analyst behind a small HTTP API.

A session walks one participant through `M` experiments: the service
issues the next design (deterministic policy mean by default), ingests
each trial outcome, and returns the running parameter estimates. Designs
and estimates are computed exactly like the offline evaluation path, so
service-mediated episodes replay bit-identically.

Endpoints (JSON bodies; coordinates in display units [-1, 1], times in
seconds; full field reference in `schemas/service_schema.json`):

    POST /sessions                     {checkpoint, study?} -> {session_id, design, ...}
    POST /sessions/{id}/outcomes       outcome payload -> {design | done, estimate}
    GET  /sessions/{id}/estimate       -> {estimate}
    GET  /healthz                      -> {status}
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, field_validator

from .analyst import ExperimentRecord, OutcomeEncoder, analyst_act, pointing_mapper
from .policies import load_policy
from .user_model import StudyConfig

SESSION_TTL_SECONDS = 30 * 60


class DesignModel(BaseModel):
    distance: float
    width: float


class EstimateModel(BaseModel):
    names: list[str]
    values: list[float]
    normalized: list[float]


def _check_display_unit(name: str):
    def validate(cls, v):
        for coord in v:
            if not -1.0 <= coord <= 1.0:
                raise ValueError(f"{name} coordinate {coord} outside display units [-1, 1]")
        return v

    return validate


class Study1Outcome(BaseModel):
    """Summary outcome: movement time plus the final click position."""

    design: DesignModel
    movement_time: float = Field(ge=0.0)
    click: list[float] = Field(min_length=2, max_length=2)
    target: list[float] = Field(min_length=2, max_length=2)
    width: float = Field(gt=0.0, le=1.0)
    trial: int | None = Field(default=None, ge=1)

    _click_units = field_validator("click")(_check_display_unit("click"))
    _target_units = field_validator("target")(_check_display_unit("target"))


class SequenceOutcome(BaseModel):
    """Gaze outcome: fixation sequence with per-gaze durations."""

    design: DesignModel
    fixations: list[list[float]]
    durations: list[float]
    target: list[float] = Field(min_length=2, max_length=2)
    width: float = Field(gt=0.0, le=1.0)
    keypress: bool = False
    success: bool = False
    trial: int | None = Field(default=None, ge=1)

    _target_units = field_validator("target")(_check_display_unit("target"))

    @field_validator("fixations")
    @classmethod
    def _fixation_units(cls, v):
        for fx in v:
            if len(fx) != 2:
                raise ValueError("each fixation must be an [x, y] pair")
            for coord in fx:
                if not -1.0 <= coord <= 1.0:
                    raise ValueError(f"fixation coordinate {coord} outside display units [-1, 1]")
        return v

    @field_validator("durations")
    @classmethod
    def _durations_nonnegative(cls, v):
        if any(d < 0 for d in v):
            raise ValueError("durations must be non-negative seconds")
        return v


class CreateSessionRequest(BaseModel):
    checkpoint: str
    study: int | None = None


@dataclass
class Session:
    session_id: str
    checkpoint_id: str
    cfg: StudyConfig
    policy: object
    encoder: OutcomeEncoder
    records: list[ExperimentRecord] = field(default_factory=list)
    latest_estimate: dict | None = None
    created: float = field(default_factory=time.monotonic)
    last_access: float = field(default_factory=time.monotonic)
    done: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)


class AnalystService:
    """Checkpoint registry plus an in-memory session store with idle expiry."""

    def __init__(
        self,
        checkpoint_dir: Path,
        deterministic: bool = True,
        session_ttl: float = SESSION_TTL_SECONDS,
        persist_dir: Path | None = None,
        sample_seed: int = 0,
    ):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.deterministic = deterministic
        self.session_ttl = session_ttl
        self.persist_dir = Path(persist_dir) if persist_dir else None
        self.rng = np.random.default_rng(sample_seed)
        self.sessions: dict[str, Session] = {}
        self._store_lock = threading.Lock()
        self._registry: dict[str, tuple[object, StudyConfig]] = {}

    def load_checkpoint(self, checkpoint_id: str) -> tuple[object, StudyConfig]:
        if checkpoint_id in self._registry:
            return self._registry[checkpoint_id]
        path = self.checkpoint_dir / f"{checkpoint_id}.ckpt"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"unknown checkpoint {checkpoint_id!r}")
        policy, extra = load_policy(path)
        if extra.get("kind") != "analyst":
            raise HTTPException(status_code=400, detail=f"{checkpoint_id!r} is not an analyst checkpoint")
        cfg = StudyConfig.from_dict(extra["study_config"])
        self._registry[checkpoint_id] = (policy, cfg)
        return policy, cfg

    def _sweep(self) -> None:
        now = time.monotonic()
        stale = [sid for sid, s in self.sessions.items() if now - s.last_access > self.session_ttl]
        for sid in stale:
            self.sessions.pop(sid, None)

    def create_session(self, checkpoint_id: str, study: int | None) -> Session:
        policy, cfg = self.load_checkpoint(checkpoint_id)
        if study is not None and study != cfg.study:
            raise HTTPException(
                status_code=400,
                detail=f"checkpoint {checkpoint_id!r} is for study {cfg.study}, not {study}",
            )
        session = Session(
            session_id=uuid.uuid4().hex,
            checkpoint_id=checkpoint_id,
            cfg=cfg,
            policy=policy,
            encoder=OutcomeEncoder(cfg),
        )
        with self._store_lock:
            self._sweep()
            self.sessions[session.session_id] = session
        return session

    def get_session(self, session_id: str) -> Session:
        with self._store_lock:
            self._sweep()
            session = self.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        session.last_access = time.monotonic()
        return session

    def act(self, session: Session):
        rng = None if self.deterministic else self.rng
        action, _, _ = analyst_act(
            session.policy,
            session.cfg,
            session.records,
            rng=rng,
            deterministic=self.deterministic,
            encoder=session.encoder,
        )
        return action

    def prior_midpoint_estimate(self, cfg: StudyConfig) -> dict:
        normalized = [0.5] * cfg.n_estimated
        values = cfg.denormalize(np.array(normalized))
        return {
            "names": list(cfg.estimated),
            "values": [float(v) for v in values],
            "normalized": normalized,
        }

    def estimate_dict(self, cfg: StudyConfig, action) -> dict:
        return {
            "names": list(cfg.estimated),
            "values": [float(v) for v in action.theta],
            "normalized": [float(v) for v in action.theta_norm],
        }

    def persist(self, session: Session) -> None:
        if self.persist_dir is None:
            return
        self.persist_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "session_id": session.session_id,
            "checkpoint": session.checkpoint_id,
            "study": session.cfg.study,
            "records": [r.to_payload(session.cfg.study) for r in session.records],
            "estimate": session.latest_estimate,
        }
        with open(self.persist_dir / "completed_sessions.jsonl", "a") as fh:
            fh.write(json.dumps(payload) + "\n")


def payload_to_record(cfg: StudyConfig, payload: dict) -> ExperimentRecord:
    if cfg.study == 1:
        return ExperimentRecord.from_payload(1, payload)
    return ExperimentRecord.from_payload(cfg.study, payload)


def create_app(
    checkpoint_dir,
    deterministic: bool = True,
    session_ttl: float = SESSION_TTL_SECONDS,
    persist_dir=None,
) -> FastAPI:
    service = AnalystService(
        Path(checkpoint_dir),
        deterministic=deterministic,
        session_ttl=session_ttl,
        persist_dir=persist_dir,
    )
    app = FastAPI(title="pointing analyst service")
    app.state.service = service

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(service.sessions)}

    @app.post("/sessions")
    def create_session(request: CreateSessionRequest):
        session = service.create_session(request.checkpoint, request.study)
        action = service.act(session)
        session.latest_estimate = service.prior_midpoint_estimate(session.cfg)
        return {
            "session_id": session.session_id,
            "study": session.cfg.study,
            "design": {"distance": action.design.distance, "width": action.design.width},
            "trial": 1,
            "experiments_total": session.cfg.n_experiments,
            "estimate": session.latest_estimate,
        }

    @app.post("/sessions/{session_id}/outcomes")
    def submit_outcome(session_id: str, payload: dict):
        session = service.get_session(session_id)
        with session.lock:
            if session.done:
                raise HTTPException(status_code=409, detail="session already completed")
            model = Study1Outcome if session.cfg.study == 1 else SequenceOutcome
            try:
                outcome = model.model_validate(payload)
            except Exception as exc:  # pydantic ValidationError
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            expected_trial = len(session.records) + 1
            if outcome.trial is not None and outcome.trial != expected_trial:
                raise HTTPException(
                    status_code=409,
                    detail=f"out-of-order submission: expected trial {expected_trial}, got {outcome.trial}",
                )
            session.records.append(
                payload_to_record(session.cfg, outcome.model_dump(exclude={"trial"}))
            )
            action = service.act(session)
            session.latest_estimate = service.estimate_dict(session.cfg, action)
            done = len(session.records) >= session.cfg.n_experiments
            response = {
                "done": done,
                "trial": len(session.records) + 1 if not done else None,
                "estimate": session.latest_estimate,
                "design": None
                if done
                else {"distance": action.design.distance, "width": action.design.width},
            }
            if done:
                session.done = True
                service.persist(session)
            return response

    @app.get("/sessions/{session_id}/estimate")
    def get_estimate(session_id: str):
        session = service.get_session(session_id)
        estimate = session.latest_estimate or service.prior_midpoint_estimate(session.cfg)
        return {"estimate": estimate, "n_outcomes": len(session.records), "done": session.done}

    return app
