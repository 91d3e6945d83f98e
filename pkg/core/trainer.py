# core/trainer.py
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from core.data import Dataset
from core.diagnostics import PLReport, init_condition, trajectory_lambda_min
from core.embedding import EmbeddingPair, build_embedding
from core.errors import ConfigError, DegenerateDataError, FlowDivergenceError, TrainingDivergedError
from core.flow import (ControlPath, GradientResult, control_distance, control_norm, gradient,
                       l2_gradient, zero_control)
from core.kernels import KernelSpec
from core.rff import FeatureBank, empirical_kappa_hat, sample_features
from core.utils import fmt17, make_rng, parse_nu

LOG_HEADER = ["step", "loss", "grad_sq_norm", "v_norm", "v_dist_init", "eta"]
LAMBDA_HEADER = ["step", "lambda_min_traj"]
INIT_STREAM = 1
CERT_TOL = 1e-9


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta: float = 1.0
    max_steps: int = 500
    target_loss: float = 1e-10
    eta_min: float = 1e-12
    seed: int = 0
    init_scale: float = 0.0
    L: int = 32
    q: int = 30
    q_int: int = 64
    nu: float = 2.5
    embedding: Literal["canonical", "block"] = "block"
    R: float = 1.0
    kappa_bound: Literal["quartic", "tensor", "coarse"] = "quartic"
    track_lambda: bool = True
    log_every: int = 50

    @field_validator("nu", mode="before")
    @classmethod
    def _nu(cls, v):
        return parse_nu(v)

    @field_validator("eta", "R")
    @classmethod
    def _positive(cls, v):
        if not v > 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("max_steps", "L", "q", "q_int", "log_every")
    @classmethod
    def _at_least_one(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("target_loss", "init_scale", "eta_min")
    @classmethod
    def _nonnegative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("seed")
    @classmethod
    def _seed(cls, v):
        if not 0 <= v < 2**64:
            raise ValueError("must be an unsigned 64-bit integer")
        return v

    @property
    def spec(self) -> KernelSpec:
        return KernelSpec(self.nu)


def make_train_config(**kwargs) -> TrainConfig:
    """TrainConfig with library errors instead of pydantic ones."""
    try:
        cfg = TrainConfig(**kwargs)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    KernelSpec(cfg.nu)
    return cfg


class TrainStatus(str, Enum):
    CONVERGED = "converged"
    MAX_STEPS = "max-steps"
    DIVERGED = "diverged"
    STALLED = "stalled"


@dataclass
class TrainStep:
    step: int
    loss: float
    grad_sq_norm: float
    v_norm: float
    v_dist_init: float
    eta: float
    wallclock: float
    lambda_min_traj: Optional[float] = None


@dataclass
class TrainLog:
    records: List[TrainStep] = field(default_factory=list)
    status: TrainStatus = TrainStatus.MAX_STEPS
    pl_report: Optional[PLReport] = None
    control: Optional[ControlPath] = None
    initial_control: Optional[ControlPath] = None
    bank: Optional[FeatureBank] = None
    pair: Optional[EmbeddingPair] = None
    kappa_hat: float = math.nan
    rate_certified: Optional[bool] = None
    bounded_certified: Optional[bool] = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else math.nan

    def contraction_factors(self) -> np.ndarray:
        loss = self.losses
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(loss[:-1] > 0, loss[1:] / loss[:-1], 0.0)


# -------------------------
# Initialization
# -------------------------
def init_control(config: TrainConfig, bank: FeatureBank) -> ControlPath:
    """W_l entries ~ N(0, init_scale^2 q^{-3/2}); all zero when init_scale = 0."""
    if config.init_scale == 0:
        return zero_control(config.L, bank.q, bank.width)
    rng = make_rng(config.seed, INIT_STREAM)
    std = config.init_scale * bank.q ** -0.75
    return ControlPath(std * rng.standard_normal((config.L, bank.q, bank.width)))


# -------------------------
# Gradient descent
# -------------------------
def _sq_l2_norm(res: GradientResult, L: int) -> float:
    # sum_l dt ||grad_l / dt||^2
    return float(np.sum(res.grad * res.grad)) * L


def _record(k: int, res: GradientResult, control: ControlPath, v0: ControlPath, eta: float,
            t0: float, bank: FeatureBank, track_lambda: bool) -> TrainStep:
    lam = None
    if track_lambda:
        lam = trajectory_lambda_min(res.bundle, bank, steps=range(control.L))
    return TrainStep(
        step=k, loss=res.loss, grad_sq_norm=_sq_l2_norm(res, control.L),
        v_norm=control_norm(control), v_dist_init=control_distance(control, v0),
        eta=eta, wallclock=time.perf_counter() - t0, lambda_min_traj=lam,
    )


def gd_train(config: TrainConfig, data: Dataset) -> TrainLog:
    """Full-batch gradient descent v <- v - eta grad L(v) in L^2([0,1], V_hat).

    A step that would increase the loss (or overflow the flow) is rejected and
    eta is halved; eta never grows back.
    """
    spec = config.spec
    bank = sample_features(config.q, config.q_int, spec, config.seed)
    pair = build_embedding(config.q, data.d, data.d_out, config.embedding)
    control = init_control(config, bank)
    v0 = control
    kappa_hat = empirical_kappa_hat(bank, config.kappa_bound)
    log = TrainLog(control=control, initial_control=v0, bank=bank, pair=pair, kappa_hat=kappa_hat)
    t0 = time.perf_counter()

    try:
        res = gradient(control, bank, pair, data)
    except FlowDivergenceError as e:
        log.status = TrainStatus.DIVERGED
        raise TrainingDivergedError(0, log, e) from e

    lam0 = trajectory_lambda_min(res.bundle, bank, steps=range(control.L))
    try:
        log.pl_report = init_condition(data, pair, spec, kappa_hat, config.R, control_norm(v0),
                                       res.loss, data.N, empirical_lambda=lam0)
    except DegenerateDataError as e:
        logger.warning(f"no PL report: {e}")
    logger.info(f"GD start: q={config.q}, q_int={config.q_int}, L={config.L}, nu={spec.nu}, "
                f"eta={config.eta}, loss0={res.loss:.6g}, kappa_hat={kappa_hat:.4f}")

    eta = config.eta
    for k in range(config.max_steps + 1):
        rec = _record(k, res, control, v0, eta, t0, bank, config.track_lambda)
        if res.loss <= config.target_loss:
            log.records.append(rec)
            log.status = TrainStatus.CONVERGED
            break
        if k == config.max_steps:
            log.records.append(rec)
            log.status = TrainStatus.MAX_STEPS
            break

        direction = l2_gradient(res.grad, control.L)
        accepted = None
        while eta >= config.eta_min:
            trial = ControlPath(control.weights - eta * direction)
            try:
                new = gradient(trial, bank, pair, data)
            except FlowDivergenceError:
                new = None
            if new is not None and new.loss <= res.loss:
                accepted = (trial, new)
                break
            eta *= 0.5
            logger.debug(f"step {k}: backtracking, eta -> {eta:.3e}")

        rec.eta = eta
        log.records.append(rec)
        if accepted is None:
            log.status = TrainStatus.STALLED
            logger.warning(f"step {k}: eta fell below {config.eta_min:g}, stopping")
            break
        control, res = accepted
        if (k + 1) % config.log_every == 0:
            logger.info(f"step {k + 1}: loss={res.loss:.6g}, eta={eta:.3g}, |v|={control_norm(control):.4g}")

    log.control = control
    _certify(log)
    logger.info(f"GD finished: status={log.status.value}, steps={len(log.records) - 1}, "
                f"loss={log.final_loss:.6g}")
    return log


# -------------------------
# Certificates
# -------------------------
def _report_value(log: TrainLog, name: str) -> float:
    if log.pl_report is None:
        raise DegenerateDataError(f"run has no PL report; pass {name} explicitly")
    return getattr(log.pl_report, name)


def rate_certificate(log: TrainLog, mu: Optional[float] = None) -> List[bool]:
    """L(v^k) <= prod_{j<k} (1 - eta_j mu) L(v^0) (1 + 1e-9), with the accepted eta_j."""
    if not log.records:
        return []
    if mu is None:
        mu = _report_value(log, "mu")
    loss0 = log.records[0].loss
    factor, out = 1.0, []
    for j, rec in enumerate(log.records):
        if j > 0:
            factor *= 1.0 - log.records[j - 1].eta * mu
        out.append(rec.loss <= factor * loss0 * (1 + CERT_TOL))
    return out


def boundedness_certificate(log: TrainLog, R: Optional[float] = None) -> List[bool]:
    if R is None:
        R = _report_value(log, "R")
    return [rec.v_dist_init <= R for rec in log.records]


def _certify(log: TrainLog) -> None:
    report = log.pl_report
    if report is None or not report.init_satisfied:
        return
    log.rate_certified = all(rate_certificate(log))
    log.bounded_certified = all(boundedness_certificate(log))
    for name, ok in (("rate", log.rate_certified), ("boundedness", log.bounded_certified)):
        report.notes.append(f"{name} certificate {'holds' if ok else 'violated'}")
        if not ok:
            logger.warning(f"{name} certificate violated although the initialization condition holds")


def descent_holds(log: TrainLog) -> bool:
    loss = log.losses
    return bool(np.all(loss[1:] <= loss[:-1]))


# -------------------------
# Persistence
# -------------------------
def write_log_csv(log: TrainLog, path: str | Path) -> Path:
    p = Path(path)
    with open(p, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in log.records:
            w.writerow([r.step, fmt17(r.loss), fmt17(r.grad_sq_norm), fmt17(r.v_norm),
                        fmt17(r.v_dist_init), fmt17(r.eta)])
    return p


def write_lambda_csv(log: TrainLog, path: str | Path) -> Optional[Path]:
    """Sidecar with the trajectory lambda_min of every step that tracked it."""
    rows = [r for r in log.records if r.lambda_min_traj is not None]
    if not rows:
        return None
    p = Path(path)
    with open(p, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LAMBDA_HEADER)
        for r in rows:
            w.writerow([r.step, fmt17(r.lambda_min_traj)])
    return p


def read_log_csv(path: str | Path, lambda_path: str | Path | None = None) -> TrainLog:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    lambdas = {}
    if lambda_path is not None and Path(lambda_path).exists():
        with open(lambda_path, "r", encoding="utf-8", newline="") as f:
            lambdas = {int(r["step"]): float(r["lambda_min_traj"]) for r in csv.DictReader(f)}
    log = TrainLog()
    for r in rows:
        step = int(r["step"])
        log.records.append(TrainStep(
            step=step, loss=float(r["loss"]), grad_sq_norm=float(r["grad_sq_norm"]),
            v_norm=float(r["v_norm"]), v_dist_init=float(r["v_dist_init"]), eta=float(r["eta"]),
            wallclock=math.nan, lambda_min_traj=lambdas.get(step),
        ))
    return log
