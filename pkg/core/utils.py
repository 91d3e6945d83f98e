from __future__ import annotations
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from core.errors import InvalidInputError, ShapeError

FLOAT_FMT = ".17g"


def fmt17(x: float) -> str:
    # 17 significant digits round-trips every float64
    return format(float(x), FLOAT_FMT)


def parse_nu(v) -> float:
    if isinstance(v, str) and v.strip().lower() in {"inf", "infinity", "gaussian", "+inf"}:
        return math.inf
    return float(v)


def nu_label(nu: float) -> str:
    return "inf" if math.isinf(nu) else fmt17(nu)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by (seed, *stream) through SeedSequence."""
    if int(seed) != seed or seed < 0 or seed >= 2**64:
        raise InvalidInputError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = [int(seed), *(int(s) for s in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def as_matrix(x, cols: Optional[int] = None, name: str = "array") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-d array, got shape {a.shape}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeError(f"{name}: expected {cols} columns, got {a.shape[1]}")
    return a


def as_vector(x, dim: Optional[int] = None, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-d array, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"{name}: expected dimension {dim}, got {v.shape[0]}")
    return v


def ensure_dir(p: str | Path) -> Path:
    d = Path(p)
    d.mkdir(parents=True, exist_ok=True)
    return d


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def mean_std(rows: Sequence[Iterable[float]]) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray([list(r) for r in rows], dtype=np.float64)
    if a.shape[0] == 1:
        return a[0], np.zeros_like(a[0])
    return a.mean(axis=0), a.std(axis=0, ddof=1)
