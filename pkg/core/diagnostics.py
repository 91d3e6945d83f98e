# core/diagnostics.py
"""Kernel-matrix spectra, PL constants and the initialization condition.

The kernel of a RKHS of vector fields here is K(z, z') = k(z, z') Id_q, so the
Nq x Nq block kernel matrix has the spectrum of the N x N scalar Gram matrix
(each eigenvalue with multiplicity q); only the scalar matrix is built.

Two surrogates replace the quantities that are not computable:
  * Lambda (sup of lambda_max) <- N, since |k| <= 1;
  * lambda(.) (inf of lambda_min) <- 1/2 when the embedded, flow-contracted
    separation is at least beta(spec, N) (diagonal dominance, certified), and
    otherwise the smallest observed lambda_min along trajectories
    (not certified).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from loguru import logger
from scipy import linalg

from core.data import Dataset
from core.embedding import EmbeddingPair, build_embedding
from core.errors import DegenerateDataError, FormatError, InvalidInputError
from core.flow import ControlPath, TrajectoryBundle, control_norm
from core.kernels import KernelSpec, beta, kernel_values
from core.rff import FeatureBank, gram_features
from core.utils import as_matrix, fmt17, pairwise_distances

SYMMETRY_TOL = 1e-8
CERTIFIED_LAMBDA = 0.5


# -------------------------
# Gram matrices and spectra
# -------------------------
def gram_matrix(points, kernel: Union[KernelSpec, FeatureBank]) -> np.ndarray:
    pts = as_matrix(points, name="points")
    if isinstance(kernel, FeatureBank):
        return gram_features(kernel, pts)
    gram = kernel_values(kernel, pairwise_distances(pts))
    np.fill_diagonal(gram, 1.0)
    return gram


def lambda_bounds(gram) -> tuple[float, float]:
    g = np.asarray(gram, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise InvalidInputError(f"Gram matrix must be square, got shape {g.shape}")
    if np.max(np.abs(g - g.T), initial=0.0) > SYMMETRY_TOL:
        raise InvalidInputError("Gram matrix is not symmetric")
    ev = linalg.eigvalsh(0.5 * (g + g.T))
    return float(ev[0]), float(ev[-1])


def trajectory_lambda_min(bundle: TrajectoryBundle, bank: FeatureBank, steps: Optional[Iterable[int]] = None) -> float:
    """Smallest empirical Gram lambda_min over the time grid."""
    n_steps = bundle.states.shape[1]
    idx = range(n_steps) if steps is None else steps
    return min(lambda_bounds(gram_features(bank, bundle.states[:, l, :]))[0] for l in idx)


# -------------------------
# PL constants
# -------------------------
@dataclass(frozen=True)
class PLConstants:
    m_R: float
    M_R: float
    lambda_used: float
    Lambda_used: float
    certified: bool


def _lambda_surrogate(data: Dataset, pair: EmbeddingPair, spec: KernelSpec, kappa_used: float,
                      R_total: float, N: int, empirical_lambda: Optional[float]) -> tuple[float, bool]:
    if N < 2:
        return 1.0, True
    delta = data.separation
    if delta <= 0:
        raise DegenerateDataError("dataset has duplicate inputs (zero separation)")
    contracted = pair.sigma_min_A * delta * math.exp(-kappa_used * R_total)
    if contracted >= beta(spec, N):
        return CERTIFIED_LAMBDA, True
    if empirical_lambda is None:
        logger.debug(f"separation {contracted:.4g} below beta; no trajectory spectrum supplied")
        return 0.0, False
    return max(float(empirical_lambda), 0.0), False


def pl_constants(data: Dataset, pair: EmbeddingPair, spec: KernelSpec, kappa_used: float,
                 R_total: float, N: int, empirical_lambda: Optional[float] = None) -> PLConstants:
    """m(R) and M(R) with the Lambda = N and lambda surrogates."""
    if R_total < 0:
        raise InvalidInputError(f"R + R0 must be nonnegative, got {R_total}")
    if N >= 2 and data.separation <= 0:
        raise DegenerateDataError("dataset has duplicate inputs (zero separation)")
    lam, certified = _lambda_surrogate(data, pair, spec, kappa_used, R_total, N, empirical_lambda)
    Lam = float(N)
    big_m = pair.sigma_max_B ** 2 * Lam * math.exp(2 * kappa_used * R_total) / N
    small_m = pair.sigma_min_B ** 2 * lam * math.exp(-2 * kappa_used * R_total) / N
    return PLConstants(m_R=small_m, M_R=big_m, lambda_used=lam, Lambda_used=Lam, certified=certified)


@dataclass
class PLReport:
    R: float
    R0: float
    kappa_used: float
    lambda_lower: float
    Lambda_upper: float
    m_R: float
    M_R: float
    mu: float
    init_lhs: float
    init_satisfied: bool
    certified: bool
    N: int
    sigma_min_A: float
    sigma_min_B: float
    sigma_max_B: float
    separation: float
    loss0: float
    notes: List[str] = field(default_factory=list)


def init_condition(data: Dataset, pair: EmbeddingPair, spec: KernelSpec, kappa_used: float,
                   R: float, R0: float, loss0: float, N: int,
                   empirical_lambda: Optional[float] = None) -> PLReport:
    if R <= 0:
        raise InvalidInputError(f"ball radius R must be positive, got {R}")
    if loss0 < 0:
        raise InvalidInputError(f"initial loss must be nonnegative, got {loss0}")
    R_total = R + R0
    pl = pl_constants(data, pair, spec, kappa_used, R_total, N, empirical_lambda)
    notes = []
    if not pl.certified:
        notes.append("lambda surrogate is the observed trajectory minimum (not certified)")
    if loss0 == 0:
        lhs = 0.0
    elif pl.lambda_used <= 0:
        lhs = math.inf
        notes.append("lambda surrogate is zero; initialization condition cannot hold")
    else:
        lhs = (math.sqrt(8.0) * pair.sigma_max_B * math.sqrt(N * pl.Lambda_used * loss0)
               * math.exp(3 * kappa_used * R_total) / (pair.sigma_min_B ** 2 * pl.lambda_used))
    report = PLReport(
        R=R, R0=R0, kappa_used=kappa_used,
        lambda_lower=pl.lambda_used, Lambda_upper=pl.Lambda_used,
        m_R=pl.m_R, M_R=pl.M_R, mu=pl.m_R,
        init_lhs=lhs, init_satisfied=lhs <= R, certified=pl.certified,
        N=N, sigma_min_A=pair.sigma_min_A, sigma_min_B=pair.sigma_min_B, sigma_max_B=pair.sigma_max_B,
        separation=data.separation, loss0=loss0, notes=notes,
    )
    logger.info(f"init condition: lhs={lhs:.4g} vs R={R} -> {'satisfied' if report.init_satisfied else 'not satisfied'}"
                f" (mu={report.mu:.4g}, certified={pl.certified})")
    return report


def sweep_init_condition(data: Dataset, spec: KernelSpec, kappa_for_q, loss0_for_q, R: float,
                         q_values: Sequence[int], variant: str = "canonical") -> tuple[Optional[int], List[PLReport]]:
    """Smallest q in ``q_values`` whose report is satisfied, with every report computed.

    ``kappa_for_q(q)`` and ``loss0_for_q(q, pair)`` supply the admissibility
    constant and initial loss of each width, so the sweep works both for the
    infinite-width kernel and for sampled banks.
    """
    reports, found = [], None
    for q in sorted(q_values):
        pair = build_embedding(q, data.d, data.d_out, variant)
        rep = init_condition(data, pair, spec, kappa_for_q(q), R, 0.0, loss0_for_q(q, pair), data.N)
        reports.append(rep)
        if rep.init_satisfied and found is None:
            found = q
    return found, reports


# -------------------------
# Run verification
# -------------------------
@dataclass(frozen=True)
class PLStepCheck:
    step: int
    upper_ok: bool
    lower_ok: Optional[bool]
    lower_bound: float
    upper_bound: float
    grad_sq_norm: float
    required_lambda: float


def verify_pl_along_run(log, report: PLReport, slack_L: Optional[int] = None) -> List[PLStepCheck]:
    """Check 2 m L <= ||grad L||^2 <= 2 M L at every logged step.

    M uses Lambda = N; m uses the empirical trajectory lambda_min logged at
    that step, both evaluated at the logged ||v^k||. ``slack_L`` enables the
    (1 - 5/L)^2 discretization slack on the lower bound. A step logged without
    lambda_min has ``lower_ok = None``.
    """
    out = []
    s2_min, s2_max = report.sigma_min_B ** 2, report.sigma_max_B ** 2
    lower_slack = (max(0.0, 1.0 - 5.0 / slack_L) ** 2) if slack_L else 1.0
    for rec in log.records:
        k = report.kappa_used
        upper = 2.0 * s2_max * report.Lambda_upper / report.N * math.exp(2 * k * rec.v_norm) * rec.loss
        base = 2.0 * s2_min / report.N * math.exp(-2 * k * rec.v_norm) * rec.loss * lower_slack
        g = rec.grad_sq_norm
        required = g / base if base > 0 else math.inf
        if rec.lambda_min_traj is None:
            lower, lower_ok = math.nan, None
        else:
            lower = base * max(rec.lambda_min_traj, 0.0)
            lower_ok = lower <= g * (1 + 1e-12) + 1e-300
        out.append(PLStepCheck(
            step=rec.step,
            upper_ok=g <= upper * (1 + 1e-12) + 1e-300,
            lower_ok=lower_ok,
            lower_bound=lower, upper_bound=upper, grad_sq_norm=g, required_lambda=required,
        ))
    failed = [c.step for c in out if c.lower_ok is False]
    if failed:
        logger.warning(f"PL lower bound fails at {len(failed)} step(s); first at step {failed[0]}")
    unchecked = sum(c.lower_ok is None for c in out)
    if unchecked:
        logger.info(f"PL lower bound not checked at {unchecked} step(s) without a logged lambda_min")
    return out


@dataclass(frozen=True)
class TrajectoryBoundsReport:
    separation_ok: bool
    adjoint_lower_ok: bool
    adjoint_upper_ok: bool
    worst_separation_ratio: float
    worst_adjoint_lower_ratio: float
    worst_adjoint_upper_ratio: float

    @property
    def ok(self) -> bool:
        return self.separation_ok and self.adjoint_lower_ok and self.adjoint_upper_ok


def trajectory_bounds(bundle: TrajectoryBundle, data: Dataset, pair: EmbeddingPair,
                      control: ControlPath, kappa_used: float) -> TrajectoryBoundsReport:
    """Trajectory separation and adjoint sandwich with slack 5/L.

    Ratios are observed / bound (separation, adjoint lower) and bound / observed
    (adjoint upper); a ratio >= 1 means the inequality holds.
    """
    eps = 5.0 / control.L
    grow = math.exp(kappa_used * control_norm(control))
    states, adj = bundle.states, bundle.adjoints
    n = states.shape[0]

    sep_ratio = math.inf
    x = data.inputs
    for i in range(n):
        for j in range(i + 1, n):
            bound = pair.sigma_min_A / grow * float(np.linalg.norm(x[i] - x[j])) * (1 - eps)
            if bound <= 0:
                continue
            obs = float(np.min(np.linalg.norm(states[i] - states[j], axis=1)))
            sep_ratio = min(sep_ratio, obs / bound)

    resid = np.linalg.norm(bundle.final_states @ pair.B.T - data.targets, axis=1)
    lo_ratio, hi_ratio = math.inf, math.inf
    for i in range(n):
        if resid[i] == 0:
            continue
        norms = np.linalg.norm(adj[i], axis=1)
        lo = pair.sigma_min_B / n / grow * resid[i] * (1 - eps)
        hi = pair.sigma_max_B / n * grow * resid[i] * (1 + eps)
        if lo > 0:
            lo_ratio = min(lo_ratio, float(norms.min()) / lo)
        hi_ratio = min(hi_ratio, hi / float(norms.max()) if norms.max() > 0 else math.inf)
    return TrajectoryBoundsReport(
        separation_ok=sep_ratio >= 1.0, adjoint_lower_ok=lo_ratio >= 1.0, adjoint_upper_ok=hi_ratio >= 1.0,
        worst_separation_ratio=sep_ratio, worst_adjoint_lower_ratio=lo_ratio, worst_adjoint_upper_ratio=hi_ratio,
    )


# -------------------------
# Sidecar: key = value lines
# -------------------------
def write_report(report: PLReport, path: str | Path) -> Path:
    p = Path(path)
    lines = []
    for key, val in asdict(report).items():
        if key == "notes":
            val = " | ".join(val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = fmt17(val)
        lines.append(f"{key} = {val}")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def read_report(path: str | Path) -> PLReport:
    fields = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if " = " not in line:
            raise FormatError(f"{path}: malformed line {line!r}")
        k, v = line.split(" = ", 1)
        fields[k.strip()] = v.strip()
    try:
        kw = {}
        for name, f in PLReport.__dataclass_fields__.items():
            raw = fields.get(name, "")
            if name == "notes":
                kw[name] = [s for s in raw.split(" | ") if s]
            elif f.type in ("bool", bool):
                kw[name] = raw == "true"
            elif f.type in ("int", int):
                kw[name] = int(raw)
            else:
                kw[name] = float(raw)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    return PLReport(**kw)
