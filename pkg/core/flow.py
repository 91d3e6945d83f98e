# core/flow.py
"""Continuous-depth residual flow with RFF vector fields.

The control v in L^2([0, 1], V_hat) is piecewise constant on L uniform steps,
v_t = W_l phi(.) on [l dt, (l + 1) dt). The forward ODE z' = v_t(z) is
integrated with explicit Euler and gradients are the exact derivatives of the
discretized loss (reverse accumulation through the Euler steps), with the
adjoint convention a_l = dLoss/dz_l.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from loguru import logger

from core.data import Dataset
from core.embedding import EmbeddingPair
from core.errors import FlowDivergenceError, FormatError, InvalidDimensionError, ShapeError
from core.rff import FeatureBank, feature_jacobian_t, features
from core.utils import as_matrix, as_vector

CONTROL_FORMAT = "rkhs-control/1"
DIVERGENCE_NORM = 1e8
DEFAULT_STEPS = 32


@dataclass(frozen=True, eq=False)
class ControlPath:
    weights: np.ndarray = field(repr=False)  # (L, q, 2 q_int)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 3 or w.shape[0] < 1:
            raise ShapeError(f"weights must have shape (L, q, 2 q_int) with L >= 1, got {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def L(self) -> int:
        return self.weights.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.L

    @property
    def q(self) -> int:
        return self.weights.shape[1]

    @property
    def width(self) -> int:
        return self.weights.shape[2]

    def check_bank(self, bank: FeatureBank) -> None:
        if (self.q, self.width) != (bank.q, bank.width):
            raise ShapeError(f"control layers are {self.q}x{self.width}, bank needs {bank.q}x{bank.width}")


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    states: np.ndarray = field(repr=False)    # (N, L+1, q)
    adjoints: np.ndarray = field(repr=False)  # (N, L+1, q)
    residual_outputs: Optional[np.ndarray] = field(default=None, repr=False)  # (N, L, 2 q_int)

    @property
    def final_states(self) -> np.ndarray:
        return self.states[:, -1, :]


class GradientResult(NamedTuple):
    grad: np.ndarray  # (L, q, 2 q_int), Euclidean gradient in the weights
    bundle: TrajectoryBundle
    loss: float


def zero_control(L: int, q: int, width: int) -> ControlPath:
    if L < 1:
        raise InvalidDimensionError(f"need L >= 1 time steps, got {L}")
    return ControlPath(np.zeros((L, q, width)))


# -------------------------
# Forward pass
# -------------------------
def _integrate(control: ControlPath, bank: FeatureBank, z0: np.ndarray):
    """Euler trajectories for a batch; returns states (L+1, N, q) and features (L, N, 2 q_int)."""
    control.check_bank(bank)
    L, dt = control.L, control.dt
    n = z0.shape[0]
    states = np.empty((L + 1, n, bank.q))
    phis = np.empty((L, n, bank.width))
    states[0] = z0
    for l in range(L):
        phis[l] = features(bank, states[l])
        states[l + 1] = states[l] + dt * phis[l] @ control.weights[l].T
        norm = float(np.max(np.linalg.norm(states[l + 1], axis=1)))
        if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
            logger.warning(f"forward pass diverged at step {l + 1}: max state norm {norm:.3e}")
            raise FlowDivergenceError(l + 1, norm)
    return states, phis


def forward(control: ControlPath, bank: FeatureBank, A: np.ndarray, x) -> np.ndarray:
    """States z_0..z_L of one input, shape (L+1, q)."""
    A = as_matrix(A, name="A")
    x = as_vector(x, dim=A.shape[1], name="x")
    states, _ = _integrate(control, bank, (A @ x)[None, :])
    return states[:, 0, :]


def _final_outputs(control: ControlPath, bank: FeatureBank, pair: EmbeddingPair, inputs: np.ndarray):
    x = as_matrix(inputs, cols=pair.d, name="inputs")
    states, phis = _integrate(control, bank, x @ pair.A.T)
    return states, phis, states[-1] @ pair.B.T


def model_output(control: ControlPath, bank: FeatureBank, pair: EmbeddingPair, x) -> np.ndarray:
    x = as_vector(x, dim=pair.d, name="x")
    return _final_outputs(control, bank, pair, x[None, :])[2][0]


def empirical_risk(control: ControlPath, bank: FeatureBank, pair: EmbeddingPair, data: Dataset) -> float:
    _, _, out = _final_outputs(control, bank, pair, data.inputs)
    resid = out - data.targets
    return float(np.sum(resid * resid) / (2.0 * data.N))


# -------------------------
# Discrete adjoint
# -------------------------
def gradient(control: ControlPath, bank: FeatureBank, pair: EmbeddingPair, data: Dataset) -> GradientResult:
    """Exact gradient of empirical_risk with respect to every W_l.

    a_L = (1/N) B^T (B z_L - y)
    a_l = a_{l+1} + dt (W_l D phi(z_l))^T a_{l+1}
    grad_l = dt sum_i a^i_{l+1} phi(z^i_l)^T
    """
    states, phis, out = _final_outputs(control, bank, pair, data.inputs)
    n = data.N
    L, dt = control.L, control.dt
    resid = out - data.targets
    loss = float(np.sum(resid * resid) / (2.0 * n))

    adj = np.empty_like(states)
    adj[L] = resid @ pair.B / n
    grad = np.empty_like(control.weights)
    for l in range(L - 1, -1, -1):
        a_next = adj[l + 1]
        grad[l] = dt * (a_next.T @ phis[l])
        g = a_next @ control.weights[l]  # rows W_l^T a^i_{l+1}
        adj[l] = a_next + dt * feature_jacobian_t(bank, states[l], g)

    bundle = TrajectoryBundle(
        states=np.swapaxes(states, 0, 1),
        adjoints=np.swapaxes(adj, 0, 1),
        residual_outputs=np.swapaxes(phis, 0, 1),
    )
    return GradientResult(grad=grad, bundle=bundle, loss=loss)


def l2_gradient(grad: np.ndarray, L: int) -> np.ndarray:
    """Riesz representative in L^2([0,1], V_hat): the weight gradient divided by dt."""
    return grad * L


# -------------------------
# Norms
# -------------------------
def control_norm(control: ControlPath) -> float:
    """sqrt(sum_l dt ||W_l||_F^2)."""
    return math.sqrt(control.dt * float(np.sum(control.weights * control.weights)))


def control_distance(a: ControlPath, b: ControlPath) -> float:
    if a.weights.shape != b.weights.shape:
        raise ShapeError(f"controls have shapes {a.weights.shape} and {b.weights.shape}")
    diff = a.weights - b.weights
    return math.sqrt(a.dt * float(np.sum(diff * diff)))


# -------------------------
# Serialization
# -------------------------
def save_control(control: ControlPath, path: str | Path) -> Path:
    p = Path(path)
    payload = {
        "format": CONTROL_FORMAT,
        "L": control.L,
        "q": control.q,
        "width": control.width,
        "weights": [float(x) for x in control.weights.ravel()],
    }
    p.write_text(json.dumps(payload), encoding="utf-8")
    return p


def load_control(path: str | Path, bank: Optional[FeatureBank] = None) -> ControlPath:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format") != CONTROL_FORMAT:
        raise FormatError(f"{path}: expected format {CONTROL_FORMAT!r}, got {raw.get('format')!r}")
    L, q, width = int(raw["L"]), int(raw["q"]), int(raw["width"])
    w = np.asarray(raw["weights"], dtype=np.float64)
    if w.size != L * q * width:
        raise FormatError(f"{path}: {w.size} weight entries for shape ({L}, {q}, {width})")
    if bank is not None and (q, width) != (bank.q, bank.width):
        raise FormatError(f"{path}: control layers are {q}x{width}, bank needs {bank.q}x{bank.width}")
    return ControlPath(w.reshape(L, q, width))
