# core/rff.py
"""Random Fourier features for the Matérn / Gaussian kernels of ``core.kernels``.

Complex features e^{i<z, w>} are stored as cos/sin pairs, so the feature map
lands in R^{2 q_int} and a residual field is z -> W phi(z) with W of shape
(q, 2 q_int).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from loguru import logger

from core.errors import FormatError, InvalidDimensionError, InvalidInputError, ShapeError
from core.kernels import KernelSpec
from core.utils import as_matrix, as_vector, make_rng, nu_label, parse_nu

BANK_FORMAT = "rkhs-featurebank/1"
MAX_SUM_OF_SQUARES_DOF = 64

FourthMomentBound = Literal["quartic", "tensor", "coarse"]
FOURTH_MOMENT_BOUNDS = ("quartic", "tensor", "coarse")

QUARTIC_STREAM = 3
QUARTIC_EIGEN_STARTS = 4
QUARTIC_FREQ_STARTS = 8
QUARTIC_RANDOM_STARTS = 8
QUARTIC_MAX_ITER = 500
QUARTIC_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureBank:
    omegas: np.ndarray = field(repr=False)
    nu: float
    seed: int
    q: int
    q_int: int

    def __post_init__(self):
        om = np.array(self.omegas, dtype=np.float64, copy=True)
        if om.shape != (self.q_int, self.q):
            raise ShapeError(f"omegas must have shape ({self.q_int}, {self.q}), got {om.shape}")
        if not np.all(np.isfinite(om)):
            raise InvalidInputError("frequency samples must be finite")
        om.setflags(write=False)
        object.__setattr__(self, "omegas", om)

    @property
    def spec(self) -> KernelSpec:
        return KernelSpec(self.nu)

    @property
    def width(self) -> int:
        return 2 * self.q_int


def _chi_square(rng: np.random.Generator, dof: float, size: int) -> np.ndarray:
    k = int(round(dof))
    if abs(dof - k) < 1e-12 and k % 2 == 0 and k <= MAX_SUM_OF_SQUARES_DOF:
        return np.square(rng.standard_normal((size, k))).sum(axis=1)
    # numpy: 2 * standard_gamma(dof / 2), Marsaglia-Tsang gamma sampler
    return rng.chisquare(dof, size=size)


def sample_features(q: int, q_int: int, spec: KernelSpec, seed: int) -> FeatureBank:
    if q < 1 or q_int < 1:
        raise InvalidDimensionError(f"need q >= 1 and q_int >= 1, got q={q}, q_int={q_int}")
    rng = make_rng(seed)
    y = rng.standard_normal((q_int, q))
    if spec.is_gaussian:
        omegas = y
    else:
        u = _chi_square(rng, spec.dof, q_int)
        omegas = y / np.sqrt(u / spec.dof)[:, None]
    logger.debug(f"sampled {q_int} frequencies in R^{q} (nu={nu_label(spec.nu)}, seed={seed})")
    return FeatureBank(omegas=omegas, nu=spec.nu, seed=int(seed), q=q, q_int=q_int)


# -------------------------
# Feature map and kernel estimate
# -------------------------
def features(bank: FeatureBank, points) -> np.ndarray:
    """Row-wise feature map: (N, q) -> (N, 2 q_int)."""
    z = as_matrix(points, cols=bank.q, name="points")
    proj = z @ bank.omegas.T
    scale = 1.0 / math.sqrt(bank.q_int)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=1) * scale


def feature_map(bank: FeatureBank, z) -> np.ndarray:
    z = as_vector(z, dim=bank.q, name="z")
    return features(bank, z[None, :])[0]


def feature_jacobian_t(bank: FeatureBank, points, g: np.ndarray) -> np.ndarray:
    """Rows of D phi(z_i)^T g_i for a batch: (N, q), (N, 2 q_int) -> (N, q)."""
    z = as_matrix(points, cols=bank.q, name="points")
    proj = z @ bank.omegas.T
    m = bank.q_int
    mixed = np.cos(proj) * g[:, m:] - np.sin(proj) * g[:, :m]
    return (mixed @ bank.omegas) / math.sqrt(m)


def rff_kernel(bank: FeatureBank, z, z_prime) -> float:
    z = as_vector(z, dim=bank.q, name="z")
    zp = as_vector(z_prime, dim=bank.q, name="z_prime")
    return float(np.mean(np.cos(bank.omegas @ (z - zp))))


def gram_features(bank: FeatureBank, points) -> np.ndarray:
    """Empirical Gram matrix (k_hat(z_i, z_j))_ij = Phi Phi^T."""
    phi = features(bank, points)
    gram = phi @ phi.T
    return 0.5 * (gram + gram.T)


# -------------------------
# Admissibility of the finite space
# -------------------------
def frequency_second_moment(bank: FeatureBank) -> np.ndarray:
    """(1/q_int) sum_j w_j w_j^T, which equals D phi(z)^T D phi(z) for every z."""
    return bank.omegas.T @ bank.omegas / bank.q_int


def _quartic_form(om: np.ndarray, theta: np.ndarray) -> float:
    p = om @ theta
    return float(np.mean(p ** 4))


def _quartic_starts(om: np.ndarray, seed: int) -> np.ndarray:
    m, q = om.shape
    _, vecs = np.linalg.eigh(om.T @ om / m)
    top = vecs[:, ::-1][:, :QUARTIC_EIGEN_STARTS].T
    norms = np.linalg.norm(om, axis=1)
    idx = np.argsort(norms)[::-1][:QUARTIC_FREQ_STARTS]
    longest = om[idx][norms[idx] > 0] / norms[idx][norms[idx] > 0, None]
    rand = make_rng(seed, QUARTIC_STREAM).standard_normal((QUARTIC_RANDOM_STARTS, q))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.concatenate([top, longest, rand], axis=0)


def quartic_max(bank: FeatureBank) -> float:
    """max over unit theta of mean_j <w_j, theta>^4, by symmetric power iteration.

    The form is convex in theta, so each iteration theta <- grad / ||grad||
    never decreases it. Starts: leading eigenvectors of the second-moment
    matrix (which already give at least lambda_max^2), the longest
    frequencies and seeded random directions.
    """
    om = bank.omegas
    if not np.any(om):
        return 0.0
    best = 0.0
    for theta in _quartic_starts(om, bank.seed):
        f = _quartic_form(om, theta)
        for _ in range(QUARTIC_MAX_ITER):
            p = om @ theta
            g = (p ** 3) @ om
            n = float(np.linalg.norm(g))
            if n == 0.0:
                break
            nxt = g / n
            f_next = _quartic_form(om, nxt)
            if f_next <= f * (1.0 + QUARTIC_RTOL):
                f = max(f, f_next)
                break
            theta, f = nxt, f_next
        best = max(best, f)
    return best


def _fourth_moment_tensor_norm(om: np.ndarray) -> float:
    # lambda_max of M4 = mean vec(w w^T) vec(w w^T)^T; shares its nonzero spectrum with (G o G)/m
    m, q = om.shape
    if m <= q * q:
        g = om @ om.T
        small = (g * g) / m
    else:
        v = np.einsum("ji,jk->jik", om, om).reshape(m, q * q)
        small = v.T @ v / m
    return float(max(np.linalg.eigvalsh(small)[-1], 0.0))


def _fourth_moment_norm(bank: FeatureBank, bound: FourthMomentBound) -> float:
    om = bank.omegas
    if bound == "coarse":
        return float(np.mean(np.sum(om * om, axis=1) ** 2))
    if bound == "tensor":
        return _fourth_moment_tensor_norm(om)
    return quartic_max(bank)


def empirical_kappa_hat(bank: FeatureBank, bound: FourthMomentBound = "quartic") -> float:
    """Admissibility constant 1 + sqrt(lambda_max(M2)) + sqrt(max_theta mean <w_j, theta>^4).

    sup ||phi|| is 1 for every bank and the first-derivative term is exact.
    ``quartic`` evaluates the second-derivative term by power iteration and
    tends to kappa(spec) as q_int grows. ``tensor`` (lambda_max of the q^2 x q^2
    fourth-moment matrix) and ``coarse`` (mean ||w_j||^4) are relaxations that
    are never below it, at the cost of a dimension-dependent overshoot.
    """
    if bound not in FOURTH_MOMENT_BOUNDS:
        raise InvalidInputError(f"unknown fourth-moment bound {bound!r}; expected one of {FOURTH_MOMENT_BOUNDS}")
    lam2 = float(max(np.linalg.eigvalsh(frequency_second_moment(bank))[-1], 0.0))
    return 1.0 + math.sqrt(lam2) + math.sqrt(_fourth_moment_norm(bank, bound))


# -------------------------
# Serialization
# -------------------------
def save_bank(bank: FeatureBank, path: str | Path) -> Path:
    p = Path(path)
    payload = {
        "format": BANK_FORMAT,
        "nu": nu_label(bank.nu),
        "q": bank.q,
        "q_int": bank.q_int,
        "seed": bank.seed,
        "omegas": [float(x) for x in bank.omegas.ravel()],
    }
    p.write_text(json.dumps(payload), encoding="utf-8")
    return p


def load_bank(path: str | Path, q: int | None = None, q_int: int | None = None) -> FeatureBank:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format") != BANK_FORMAT:
        raise FormatError(f"{path}: expected format {BANK_FORMAT!r}, got {raw.get('format')!r}")
    bq, bm = int(raw["q"]), int(raw["q_int"])
    if (q is not None and bq != q) or (q_int is not None and bm != q_int):
        raise FormatError(f"{path}: bank is {bm}x{bq}, expected {q_int}x{q}")
    om = np.asarray(raw["omegas"], dtype=np.float64)
    if om.size != bq * bm:
        raise FormatError(f"{path}: {om.size} frequency entries for a {bm}x{bq} bank")
    return FeatureBank(omegas=om.reshape(bm, bq), nu=parse_nu(raw["nu"]),
                       seed=int(raw["seed"]), q=bq, q_int=bm)
