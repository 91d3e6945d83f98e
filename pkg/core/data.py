from __future__ import annotations
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from loguru import logger

from core.embedding import separation
from core.errors import FormatError, InvalidDimensionError, ShapeError
from core.utils import as_matrix, fmt17, make_rng

MAX_RESAMPLES = 16


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray = field(repr=False)
    targets: np.ndarray = field(repr=False)
    r0: float = field(init=False)

    def __post_init__(self):
        x = as_matrix(self.inputs, name="inputs").copy()
        y = as_matrix(self.targets, name="targets").copy()
        if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"need N >= 1 matching inputs/targets, got {x.shape[0]} and {y.shape[0]}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "r0", float(np.linalg.norm(x, axis=1).max()))

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_out(self) -> int:
        return self.targets.shape[1]

    @property
    def separation(self) -> float:
        return separation(self.inputs) if self.N >= 2 else float("inf")


def synth_dataset(N: int, d: int, d_out: int, noise: float, seed: int) -> Dataset:
    """x ~ N(0, Id_d), y = -x + noise * eps (y = noise * eps when d != d')."""
    if N < 1 or d < 1 or d_out < 1:
        raise InvalidDimensionError(f"need N, d, d' >= 1, got N={N}, d={d}, d'={d_out}")
    if d != d_out:
        logger.warning(f"synthetic targets: d={d} != d'={d_out}, using pure noise targets")
    for attempt in range(MAX_RESAMPLES):
        rng = make_rng(seed, attempt)
        x = rng.standard_normal((N, d))
        eps = rng.standard_normal((N, d_out))
        y = noise * eps - x if d == d_out else noise * eps
        data = Dataset(inputs=x, targets=y)
        if data.separation > 0:
            return data
        logger.info(f"synthetic dataset (seed={seed}) has duplicate inputs, resampling")
    return data


# -------------------------
# CSV format: header x1..xd,y1..yd'
# -------------------------
def save_dataset(data: Dataset, path: str | Path) -> Path:
    p = Path(path)
    header = [f"x{i + 1}" for i in range(data.d)] + [f"y{i + 1}" for i in range(data.d_out)]
    with open(p, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for x, y in zip(data.inputs, data.targets):
            w.writerow([fmt17(v) for v in x] + [fmt17(v) for v in y])
    return p


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: empty dataset file")
    header = [h.strip() for h in rows[0]]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y")]
    if not xcols or not ycols or len(xcols) + len(ycols) != len(header):
        raise FormatError(f"{path}: header must be x1..xd,y1..yd', got {header}")
    body = [r for r in rows[1:] if r]
    if not body or any(len(r) != len(header) for r in body):
        raise FormatError(f"{path}: rows do not match the {len(header)}-column header")
    try:
        body = np.asarray([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    return Dataset(inputs=body[:, xcols], targets=body[:, ycols])
