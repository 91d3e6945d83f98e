# core/kernels.py
"""Matérn / Gaussian radial kernels defined through their frequency distribution.

The kernel with smoothness ``nu`` is the characteristic function of the
unit-scale Student-t law with ``2 nu`` degrees of freedom (the projection of
the multivariate-t frequency distribution onto a unit direction):

    k(r) = E[cos(r s)],  s ~ t_{2 nu}

and ``nu = inf`` is the Gaussian kernel ``exp(-r^2 / 2)``. This is the kernel
the random Fourier features of ``core.rff`` converge to. Finite ``nu`` is
evaluated as a chi-square scale mixture of Gaussians, which keeps the value
positive and monotone far into the tail.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from loguru import logger
from scipy import integrate, optimize, stats

from core.errors import InvalidInputError, InvalidKernelError
from core.utils import nu_label, parse_nu

QUAD_EPSREL = 1e-12
QUAD_LIMIT = 200
MIXTURE_SPAN = 40.0        # half-width of the integration window, in mixture standard deviations
BETA_BRACKET = 100.0
BETA_XTOL = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    nu: float

    def __post_init__(self):
        nu = parse_nu(self.nu)
        if math.isnan(nu) or nu <= 2:
            raise InvalidKernelError(f"Matérn smoothness must satisfy nu > 2 (or inf), got {self.nu}")
        object.__setattr__(self, "nu", nu)

    @property
    def is_gaussian(self) -> bool:
        return math.isinf(self.nu)

    @property
    def dof(self) -> float:
        return 2.0 * self.nu

    def __str__(self) -> str:
        return f"KernelSpec(nu={nu_label(self.nu)})"


def gaussian() -> KernelSpec:
    return KernelSpec(math.inf)


def sobolev_nu(q: int, s: float) -> float:
    """Smoothness of the Matérn kernel whose RKHS on R^q is the Sobolev space H^s."""
    return s - q / 2.0


# -------------------------
# Evaluation
# -------------------------
@lru_cache(maxsize=65536)
def _chi2_mixture(nu: float, r: float) -> float:
    # s = Y / sqrt(U / 2nu) with U ~ chi2_{2nu}, so k(r) = E_U[exp(-nu r^2 / U)]
    a = nu * r * r
    mode = (nu - 1.0) + math.sqrt((nu - 1.0) ** 2 + 2.0 * a)

    def log_integrand(u: float) -> float:
        return (nu - 1.0) * math.log(u) - 0.5 * u - a / u

    curvature = (nu - 1.0) / mode ** 2 + 2.0 * a / mode ** 3
    sd = 1.0 / math.sqrt(curvature)
    lo = max(0.0, mode - MIXTURE_SPAN * sd)
    hi = mode + MIXTURE_SPAN * sd
    peak = log_integrand(mode)

    def scaled(u: float) -> float:
        return math.exp(log_integrand(u) - peak) if u > 0.0 else 0.0

    val, err = integrate.quad(scaled, lo, hi, points=[mode], epsabs=0.0, epsrel=QUAD_EPSREL, limit=QUAD_LIMIT)
    if err > 1e-8 * val:
        logger.warning(f"kernel quadrature relative error {err / val:.2e} at nu={nu}, r={r}")
    log_scale = float(stats.chi2(2.0 * nu).logpdf(mode)) - a / mode
    return math.exp(log_scale) * val


def eval_kernel(spec: KernelSpec, r: float) -> float:
    r = float(r)
    if not r >= 0.0:
        raise InvalidInputError(f"kernel radius must be nonnegative, got {r}")
    if r == 0.0:
        return 1.0
    if spec.is_gaussian:
        return math.exp(-0.5 * r * r)
    return _chi2_mixture(spec.nu, r)


def kernel_values(spec: KernelSpec, r) -> np.ndarray:
    """Vectorized eval_kernel; every distinct radius is evaluated once."""
    r = np.asarray(r, dtype=np.float64)
    if spec.is_gaussian:
        if np.any(r < 0):
            raise InvalidInputError("kernel radius must be nonnegative")
        return np.exp(-0.5 * r * r)
    uniq, inverse = np.unique(r, return_inverse=True)
    vals = np.array([eval_kernel(spec, x) for x in uniq])
    return vals[inverse].reshape(r.shape)


# -------------------------
# Moments and admissibility
# -------------------------
def kernel_moment(spec: KernelSpec, order: int) -> float:
    """E[s^order] of the projected frequency law; inf when the moment diverges."""
    if order < 0 or order % 2:
        raise InvalidInputError(f"only even nonnegative moment orders are supported, got {order}")
    k = order // 2
    if spec.is_gaussian:
        return float(math.prod(range(1, order, 2)))  # (order - 1)!!
    n = spec.dof
    if n <= order:
        return math.inf
    out = 1.0
    for i in range(1, k + 1):
        out *= n * (2 * i - 1) / (n - 2 * i)
    return out


def derivatives_at_zero(spec: KernelSpec) -> Tuple[float, float]:
    """Return (-k''(0), k''''(0))."""
    if spec.is_gaussian:
        return 1.0, 3.0
    nu = spec.nu
    return nu / (nu - 1.0), 3.0 * nu * nu / ((nu - 1.0) * (nu - 2.0))


def kappa(spec: KernelSpec) -> float:
    neg_k2, k4 = derivatives_at_zero(spec)
    return 1.0 + math.sqrt(neg_k2) + math.sqrt(k4)


# -------------------------
# Decay radius
# -------------------------
@lru_cache(maxsize=1024)
def _beta(nu: float, n: int) -> float:
    spec = KernelSpec(nu)
    level = 1.0 / (2.0 * n)
    hi = BETA_BRACKET
    while eval_kernel(spec, hi) > level:
        hi *= 2.0
        logger.debug(f"beta bracket expanded to {hi} for nu={nu_label(nu)}, N={n}")
    return float(optimize.bisect(lambda x: eval_kernel(spec, x) - level, 0.0, hi,
                                 xtol=BETA_XTOL, maxiter=200))


def beta(spec: KernelSpec, N: int) -> float:
    """Radius beyond which the kernel stays below 1/(2N)."""
    if int(N) != N or N < 2:
        raise InvalidInputError(f"beta needs an integer N >= 2, got {N}")
    return _beta(spec.nu, int(N))
