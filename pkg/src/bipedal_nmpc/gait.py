"""Footstep schedule, horizon-to-footstep mapping and reference generation.

Only single support is modelled: cycle ``i`` of the plan is spent entirely on
step ``i`` and the support switches instantaneously at cycle boundaries.
Step ``0`` is the initial support foot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .pendulum import ModelParams

_TOL = 1e-9


class HorizonOverrun(ValueError):
    """The plan (or ``n_f``) does not cover the prediction horizon."""


@dataclass(frozen=True)
class StepSpec:
    """One step relative to the previous support foot.

    ``width`` is the unsigned lateral distance; its sign follows the side.
    """

    length: float = 0.0
    width: float = 0.145
    height: float = 0.0
    duration: float = 0.8

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("step duration must be positive")


def side_sign(side: str) -> float:
    """+1 for a left foot, -1 for a right foot (y axis points left)."""
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return 1.0 if side == "left" else -1.0


def other_side(side: str) -> str:
    return "left" if side == "right" else "right"


@dataclass(frozen=True)
class Profile:
    """Piecewise-linear function of absolute time, held constant outside its knots."""

    times: tuple = (0.0,)
    values: tuple = (0.0,)

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise ValueError("profile needs matching, non-empty times/values")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("profile times must be non-decreasing")

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    @classmethod
    def zero(cls) -> "Profile":
        return cls()


@dataclass(frozen=True)
class ReferenceOverrides:
    """Time-varying offsets: pendulum height (added to ``h_z_ref``), roll, pitch."""

    height: Profile = field(default_factory=Profile.zero)
    roll: Profile = field(default_factory=Profile.zero)
    pitch: Profile = field(default_factory=Profile.zero)


@dataclass(frozen=True)
class FootstepPlan:
    """Reference footsteps plus the receding-horizon support bookkeeping.

    Attributes:
        ref_steps: ``(n, 3)`` absolute reference locations; row ``i`` supports cycle ``i``.
        durations: ``(n,)`` cycle durations [s].
        first_side: side of ``ref_steps[0]``.
        cycle: index of the current cycle.
        elapsed: time spent in the current cycle [s].
        support: realized location of the current support foot (``d_hat``).
        previous_support: realized location of the previous support foot.
        prev_next_step: ``(x, y)`` of the next step solved at the previous tick
            for the same cycle (step-rate memory), or ``None``.
    """

    ref_steps: np.ndarray
    durations: np.ndarray
    first_side: str = "right"
    cycle: int = 0
    elapsed: float = 0.0
    support: np.ndarray | None = None
    previous_support: np.ndarray | None = None
    prev_next_step: tuple | None = None

    def __post_init__(self):
        steps = np.array(self.ref_steps, dtype=float).reshape(-1, 3)
        durs = np.array(self.durations, dtype=float).ravel()
        if len(durs) != len(steps):
            raise ValueError("need one duration per reference step")
        if np.any(durs <= 0):
            raise ValueError("cycle durations must be positive")
        side_sign(self.first_side)
        steps.setflags(write=False)
        durs.setflags(write=False)
        object.__setattr__(self, "ref_steps", steps)
        object.__setattr__(self, "durations", durs)
        sup = steps[self.cycle] if self.support is None else np.array(self.support, dtype=float)
        object.__setattr__(self, "support", sup)
        if self.previous_support is not None:
            object.__setattr__(self, "previous_support", np.array(self.previous_support, dtype=float))

    @classmethod
    def from_specs(
        cls,
        specs: Sequence[StepSpec],
        n_cycles: int,
        first_side: str = "right",
        initial_support: Sequence[float] | None = None,
    ) -> "FootstepPlan":
        """Chain ``specs`` from the initial support; the last spec repeats.

        ``specs[i]`` places step ``i + 1``. The initial support defaults to
        ``(0, -+width/2, 0)`` so the reference midline is ``y = 0``.
        """
        if not specs:
            raise ValueError("need at least one step spec")
        s0 = side_sign(first_side)
        if initial_support is None:
            initial_support = (0.0, s0 * specs[0].width / 2.0, 0.0)
        steps = [np.array(initial_support, dtype=float)]
        durations = [specs[0].duration]
        side = first_side
        for i in range(n_cycles):
            spec = specs[min(i, len(specs) - 1)]
            side = other_side(side)
            delta = np.array([spec.length, side_sign(side) * spec.width, spec.height])
            steps.append(steps[-1] + delta)
            durations.append(spec.duration)
        return cls(np.array(steps), np.array(durations), first_side=first_side)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def n_steps(self) -> int:
        return len(self.ref_steps)

    @property
    def duration(self) -> float:
        """Duration of the current cycle."""
        return float(self.durations[self.cycle])

    @property
    def remaining(self) -> float:
        return self.duration - self.elapsed

    @property
    def time(self) -> float:
        """Absolute time since the start of the plan."""
        return float(np.sum(self.durations[: self.cycle]) + self.elapsed)

    def side(self, cycle: int | None = None) -> str:
        c = self.cycle if cycle is None else cycle
        return self.first_side if c % 2 == 0 else other_side(self.first_side)

    @property
    def support_side(self) -> str:
        return self.side()

    def reference_next(self, k: int = 1) -> np.ndarray:
        return self.ref_steps[self.cycle + k]

    def advance(self, dt_tick: float, realized_next_step: Sequence[float] | None = None,
                next_step_memory: tuple | None = None) -> "FootstepPlan":
        """Move time forward by one control tick.

        On rollover the realized next step (``z`` forced to the reference
        height) becomes the support foot and the support side alternates.
        ``next_step_memory`` is ``((x, y) for this cycle's next step,
        (x, y) for the one after)`` as solved at this tick.
        """
        elapsed = self.elapsed + dt_tick
        if elapsed < self.duration - _TOL:
            memory = next_step_memory[0] if next_step_memory else self.prev_next_step
            return replace(self, elapsed=elapsed, prev_next_step=memory)
        if self.cycle + 1 >= self.n_steps:
            raise HorizonOverrun("plan exhausted")
        nxt = np.array(self.ref_steps[self.cycle + 1], dtype=float)
        if realized_next_step is not None:
            nxt[:2] = np.asarray(realized_next_step, dtype=float)[:2]
        elapsed -= self.duration
        if abs(elapsed) < _TOL:
            elapsed = 0.0
        memory = next_step_memory[1] if next_step_memory and len(next_step_memory) > 1 else None
        return replace(
            self,
            cycle=self.cycle + 1,
            elapsed=elapsed,
            support=nxt,
            previous_support=self.support,
            prev_next_step=memory,
        )


def advance(plan: FootstepPlan, dt_tick: float, realized_next_step=None) -> FootstepPlan:
    return plan.advance(dt_tick, realized_next_step)


@dataclass(frozen=True)
class HorizonMapping:
    """Which foot supports each horizon sample.

    ``e_c[i] = 1`` if sample ``i + 1`` is on the current support, otherwise
    ``E_c[i, j] = 1`` for future step ``j + 1``.
    """

    e_c: np.ndarray
    E_c: np.ndarray
    cycle_index: np.ndarray  # absolute plan cycle of each sample
    sample_times: np.ndarray  # offsets from now [s]

    @property
    def n_f(self) -> int:
        return self.E_c.shape[1]

    @property
    def n_h(self) -> int:
        return self.e_c.shape[0]

    def support_sequence(self, current: float, future: np.ndarray) -> np.ndarray:
        """Per-sample support coordinate ``e_c d_hat + E_c D``."""
        return self.e_c * current + self.E_c @ np.asarray(future, dtype=float)


def build_mapping(plan: FootstepPlan, dt: float, n_h: int, n_f: int) -> HorizonMapping:
    """Assign horizon samples ``1..n_h`` to the current or a future step.

    A sample lying exactly on a cycle boundary still belongs to the earlier cycle.

    Raises:
        HorizonOverrun: more than ``n_f`` future steps (or more steps than the
            plan holds) would be needed.
    """
    times = dt * np.arange(1, n_h + 1)
    ends = plan.remaining + np.cumsum(np.concatenate([[0.0], plan.durations[plan.cycle + 1:]]))
    offset = np.searchsorted(ends + _TOL, times, side="left")
    if np.any(offset >= len(ends)):
        raise HorizonOverrun("plan does not cover the horizon")
    if offset.max() > n_f:
        raise HorizonOverrun(f"horizon needs {offset.max()} future steps, n_f={n_f}")
    e_c = (offset == 0).astype(float)
    E_c = np.zeros((n_h, n_f))
    rows = np.nonzero(offset > 0)[0]
    E_c[rows, offset[rows] - 1] = 1.0
    return HorizonMapping(e_c, E_c, plan.cycle + offset, times)


@dataclass(frozen=True)
class ReferenceBundle:
    """Per-sample motion references and per-future-step location references."""

    c_x: np.ndarray
    c_y: np.ndarray
    c_z: np.ndarray
    theta_r: np.ndarray
    theta_p: np.ndarray
    d_x: np.ndarray
    d_y: np.ndarray
    d_z: np.ndarray
    support_z: np.ndarray  # reference support height of every sample

    def motion(self) -> tuple[np.ndarray, ...]:
        """References in channel order."""
        return self.c_x, self.c_y, self.c_z, self.theta_r, self.theta_p

    def steps(self) -> tuple[np.ndarray, ...]:
        return self.d_x, self.d_y, self.d_z


def build_references(
    plan: FootstepPlan,
    mapping: HorizonMapping,
    params: ModelParams,
    overrides: ReferenceOverrides | None = None,
) -> ReferenceBundle:
    """Reference CoM/flywheel trajectories over the horizon.

    The horizontal CoM reference of a sample is the midpoint between the
    reference location of its support step and the step that follows.
    """
    q = mapping.cycle_index
    if q.max() + 1 >= plan.n_steps:
        raise HorizonOverrun("plan does not extend one step past the horizon")
    steps = plan.ref_steps
    mid = 0.5 * (steps[q] + steps[q + 1])
    t_abs = plan.time + mapping.sample_times
    ov = overrides or ReferenceOverrides()
    # support heights always follow the reference surface
    support_z = mapping.support_sequence(plan.support[2], steps[plan.cycle + 1: plan.cycle + 1 + mapping.n_f, 2])
    future = steps[plan.cycle + 1: plan.cycle + 1 + mapping.n_f]
    if len(future) < mapping.n_f:
        raise HorizonOverrun("plan has fewer steps than n_f")
    return ReferenceBundle(
        c_x=mid[:, 0],
        c_y=mid[:, 1],
        c_z=params.h_z_ref + support_z + ov.height(t_abs),
        theta_r=np.asarray(ov.roll(t_abs), dtype=float),
        theta_p=np.asarray(ov.pitch(t_abs), dtype=float),
        d_x=future[:, 0].copy(),
        d_y=future[:, 1].copy(),
        d_z=future[:, 2].copy(),
        support_z=support_z,
    )


def _quintic(t: float, duration: float) -> float:
    s = min(max(t / duration, 0.0), 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


def swing_foot_trajectory(start, end, duration: float, apex: float, t: float) -> np.ndarray:
    """Swing foot position at ``t`` for a step from ``start`` to ``end``.

    Horizontal axes use one rest-to-rest quintic; the vertical axis chains two,
    peaking at ``max(start_z, end_z) + apex`` at mid-time.
    """
    if not 0.0 <= t <= duration + _TOL:
        raise ValueError("t outside [0, duration]")
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    out = start + (end - start) * _quintic(t, duration)
    top = max(start[2], end[2]) + apex
    half = 0.5 * duration
    if t <= half:
        out[2] = start[2] + (top - start[2]) * _quintic(t, half)
    else:
        out[2] = top + (end[2] - top) * _quintic(t - half, half)
    return out


def required_future_steps(horizon_s: float, cycle_s: float) -> int:
    return int(math.ceil(horizon_s / cycle_s - _TOL))
