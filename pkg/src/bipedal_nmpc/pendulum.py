"""Nonlinear inverted pendulum plus flywheel model.

The pendulum is a point mass on a massless telescopic leg with a flywheel
that models roll/pitch angular momentum of the upper body. Every motion
channel (CoM x/y/z, flywheel roll/pitch) is driven by a piecewise-constant
jerk, so the predictive model is a triple integrator per channel:

    x_{k+1} = A x_k + B u_k,   x = [pos, vel, acc],  u = jerk
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CHANNELS = ("c_x", "c_y", "c_z", "theta_r", "theta_p")
N_CHANNELS = len(CHANNELS)
CX, CY, CZ, TR, TP = range(N_CHANNELS)


class DegenerateDynamics(ValueError):
    """Raised when the vertical contact force vanishes (g + c_z'' <= 0)."""


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the pendulum.

    Attributes:
        m: Total mass [kg].
        g: Gravitational acceleration [m/s^2].
        I_x: Flywheel roll inertia [kg m^2].
        I_y: Flywheel pitch inertia [kg m^2].
        h_z_ref: Default pendulum height above the support foot [m].
    """

    m: float = 31.0
    g: float = 9.81
    I_x: float = 1.0
    I_y: float = 1.0
    h_z_ref: float = 0.467

    def __post_init__(self):
        for name in ("m", "g", "I_x", "I_y", "h_z_ref"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class PendulumState:
    """Full pendulum state.

    ``x[i]`` is ``[position, velocity, acceleration]`` of channel ``CHANNELS[i]``.
    """

    x: np.ndarray = field(default_factory=lambda: np.zeros((N_CHANNELS, 3)))

    def __post_init__(self):
        arr = np.array(self.x, dtype=float).reshape(N_CHANNELS, 3)
        if not np.all(np.isfinite(arr)):
            raise ValueError("pendulum state must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "x", arr)

    @classmethod
    def at_rest(cls, com: Sequence[float], theta: Sequence[float] = (0.0, 0.0)) -> "PendulumState":
        x = np.zeros((N_CHANNELS, 3))
        x[:3, 0] = com
        x[3:, 0] = theta
        return cls(x)

    def channel(self, i: int) -> np.ndarray:
        return self.x[i]

    @property
    def com(self) -> np.ndarray:
        return self.x[:3, 0]

    @property
    def com_vel(self) -> np.ndarray:
        return self.x[:3, 1]

    @property
    def com_acc(self) -> np.ndarray:
        return self.x[:3, 2]

    @property
    def theta(self) -> np.ndarray:
        return self.x[3:, 0]

    @property
    def theta_acc(self) -> np.ndarray:
        return self.x[3:, 2]

    def __eq__(self, other):
        return isinstance(other, PendulumState) and np.array_equal(self.x, other.x)

    __hash__ = None


def zmp(state: PendulumState, support_z: float, params: ModelParams) -> np.ndarray:
    """ZMP of the pendulum plus flywheel.

    Pitch angular momentum rate subtracts in x, roll momentum rate adds in y.

    Raises:
        DegenerateDynamics: if ``g + c_z'' <= 0``.
    """
    c = state.com
    acc = state.com_acc
    th_acc = state.theta_acc
    gz = params.g + acc[2]
    if gz <= 0:
        raise DegenerateDynamics(f"g + c_z'' = {gz} <= 0")
    arm = c[2] - support_z
    p_x = c[0] - arm * acc[0] / gz - params.I_y * th_acc[1] / (params.m * gz)
    p_y = c[1] - arm * acc[1] / gz + params.I_x * th_acc[0] / (params.m * gz)
    return np.array([p_x, p_y, support_z])


def transition(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-jerk transition ``(A, B)`` for one channel."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A = np.array([[1.0, dt, 0.5 * dt**2], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    B = np.array([dt**3 / 6.0, 0.5 * dt**2, dt])
    return A, B


def step_state(x: np.ndarray, jerk, dt: float) -> np.ndarray:
    """Advance ``[pos, vel, acc]`` by one constant-jerk interval.

    ``x`` may also be a stack of channels with shape ``(n, 3)`` and ``jerk``
    a length-``n`` vector.
    """
    A, B = transition(dt)
    x = np.asarray(x, dtype=float)
    return x @ A.T + np.multiply.outer(np.asarray(jerk, dtype=float), B)


@dataclass(frozen=True)
class PredictionMatrices:
    """Horizon prediction for one channel (identical for all channels).

    ``X = P_ps x + P_pu U`` where ``X`` stacks samples 1..N_h; velocity and
    acceleration rows are analogous.
    """

    P_ps: np.ndarray
    P_vs: np.ndarray
    P_as: np.ndarray
    P_pu: np.ndarray
    P_vu: np.ndarray
    P_au: np.ndarray
    dt: float
    n_h: int

    def __post_init__(self):
        for name in ("P_ps", "P_vs", "P_as", "P_pu", "P_vu", "P_au"):
            getattr(self, name).setflags(write=False)

    def predict(self, x: np.ndarray, jerks: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Predicted (position, velocity, acceleration) sequences."""
        return (
            self.P_ps @ x + self.P_pu @ jerks,
            self.P_vs @ x + self.P_vu @ jerks,
            self.P_as @ x + self.P_au @ jerks,
        )


def build_prediction(dt: float, n_h: int) -> PredictionMatrices:
    """Stack the constant-jerk recursion over ``n_h`` samples."""
    if n_h < 1:
        raise ValueError("horizon must have at least one sample")
    A, B = transition(dt)
    Ps = np.zeros((n_h, 3, 3))
    Pu = np.zeros((n_h, 3, n_h))
    Ak = np.eye(3)
    for i in range(n_h):
        Ak = A @ Ak
        Ps[i] = Ak
        # column j: effect of jerk j on sample i is A^(i-j) B
        if i > 0:
            Pu[i, :, :i] = A @ Pu[i - 1, :, :i]
        Pu[i, :, i] = B
    return PredictionMatrices(
        P_ps=Ps[:, 0, :].copy(),
        P_vs=Ps[:, 1, :].copy(),
        P_as=Ps[:, 2, :].copy(),
        P_pu=Pu[:, 0, :].copy(),
        P_vu=Pu[:, 1, :].copy(),
        P_au=Pu[:, 2, :].copy(),
        dt=float(dt),
        n_h=int(n_h),
    )
