# core/embedding.py
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from core.errors import InvalidDimensionError, InvalidInputError
from core.utils import as_matrix, pairwise_distances

Variant = Literal["canonical", "block"]
VARIANTS = ("canonical", "block")


@dataclass(frozen=True, eq=False)
class EmbeddingPair:
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    q: int
    d: int
    d_out: int
    variant: str
    sigma_min_A: float
    sigma_min_B: float
    sigma_max_B: float

    @property
    def BA(self) -> np.ndarray:
        return self.B @ self.A


def _stacked_identity(q: int, d: int) -> np.ndarray:
    """(Id_d, ..., Id_d, 0)^T with floor(q/d) identity blocks."""
    out = np.zeros((q, d))
    for b in range(q // d):
        out[b * d:(b + 1) * d, :] = np.eye(d)
    return out


def build_embedding(q: int, d: int, d_out: int, variant: Variant = "canonical") -> EmbeddingPair:
    """Fixed input/output maps A (q x d) and B (d_out x q).

    canonical: A = q^{-1/4} (Id_d, ..., Id_d, 0)^T, B = q^{1/4} (Id_{d'}, 0, ..., 0).
    block:     A = (Id_d, 0, ..., 0)^T,             B = (Id_{d'}, ..., Id_{d'}, 0).
    """
    if min(d, d_out) < 1 or q < max(d, d_out):
        raise InvalidDimensionError(f"need q >= max(d, d') >= 1, got q={q}, d={d}, d'={d_out}")
    if variant == "canonical":
        A = q ** -0.25 * _stacked_identity(q, d)
        B = q ** 0.25 * np.eye(d_out, q)
        s_a = q ** -0.25 * math.sqrt(q // d)
        s_b_min = s_b_max = q ** 0.25
    elif variant == "block":
        A = np.eye(q, d)
        B = _stacked_identity(q, d_out).T
        s_a = 1.0
        s_b_min = s_b_max = math.sqrt(q // d_out)
    else:
        raise InvalidInputError(f"unknown embedding variant {variant!r}; expected one of {VARIANTS}")
    A.setflags(write=False)
    B.setflags(write=False)
    return EmbeddingPair(A=A, B=B, q=q, d=d, d_out=d_out, variant=variant,
                         sigma_min_A=s_a, sigma_min_B=s_b_min, sigma_max_B=s_b_max)


def separation(points: Sequence) -> float:
    """Minimum pairwise Euclidean distance."""
    pts = as_matrix(points, name="points")
    if pts.shape[0] < 2:
        raise InvalidInputError("separation needs at least two points")
    dist = pairwise_distances(pts)
    iu = np.triu_indices(pts.shape[0], k=1)
    return float(dist[iu].min())


def min_q_for_separation(delta: float, d: int, beta_value: float, kappa_value: float,
                         R: float, q_max: int = 1 << 24) -> Optional[int]:
    """Smallest canonical q with sigma_min(A_q) delta e^{-kappa R} >= beta.

    For q = k d, sigma_min(A_q) = k^{1/4} d^{-1/4}, so the threshold is
    k >= d (beta e^{kappa R} / delta)^4. Returns None past ``q_max``.
    """
    if delta <= 0:
        return None
    ratio = beta_value * math.exp(kappa_value * R) / delta
    k = max(1, math.ceil(d * ratio ** 4))
    q = k * d
    return q if q <= q_max else None
