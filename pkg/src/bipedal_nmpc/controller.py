"""Receding-horizon controller: one NMPC solve per control tick."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import Bounds, Layout, StrategyToggles, Weights, build_problem
from .gait import FootstepPlan, HorizonMapping, ReferenceBundle, ReferenceOverrides, build_mapping, build_references
from .pendulum import ModelParams, PendulumState, build_prediction
from .qcqp import QcqpProblem, SqpReport, SqpSettings, solve_sqp


@dataclass(frozen=True)
class HorizonConfig:
    """Sampling of the prediction horizon and of the control loop.

    Attributes:
        guard_next_tick: Constrain the ZMP of the state one control tick ahead
            whenever that tick lies outside the transfer window.
        transfer_window: Time on either side of a support switch during which
            the ZMP travels between the feet [s].
    """

    dt_mpc: float = 0.05
    n_h: int = 31
    n_f: int = 2
    dt_ctrl: float = 0.005
    guard_next_tick: bool = True
    transfer_window: float = 0.1

    def __post_init__(self):
        if not 0 < self.dt_ctrl <= self.dt_mpc + 1e-12:
            raise ValueError("need 0 < dt_ctrl <= dt_mpc")
        if self.n_h < 1 or self.n_f < 1:
            raise ValueError("n_h and n_f must be positive")


@dataclass
class NmpcSolution:
    x: np.ndarray
    report: SqpReport
    problem: QcqpProblem
    mapping: HorizonMapping
    refs: ReferenceBundle
    layout: Layout

    @property
    def first_jerks(self) -> np.ndarray:
        return self.layout.first_jerks(self.x)

    def next_step(self, k: int = 0) -> np.ndarray:
        return self.layout.next_step(self.x, k)

    def equality_residual(self) -> float:
        p = self.problem
        return float(np.abs(p.A_eq @ self.x - p.b_eq).max(initial=0.0))


@dataclass
class NmpcController:
    params: ModelParams = field(default_factory=ModelParams)
    weights: Weights = field(default_factory=Weights)
    bounds: Bounds = field(default_factory=Bounds)
    toggles: StrategyToggles = field(default_factory=StrategyToggles)
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    sqp: SqpSettings = field(default_factory=SqpSettings)
    overrides: ReferenceOverrides = field(default_factory=ReferenceOverrides)

    def __post_init__(self):
        self.pred = build_prediction(self.horizon.dt_mpc, self.horizon.n_h)
        self.layout = Layout(self.horizon.n_h, self.horizon.n_f)
        self._last_x: np.ndarray | None = None
        self._last_cycle: int | None = None
        pinned = self.toggles.pinned_channels()
        self.free_channels = [s for i, s in enumerate(self.layout.channels()) if i not in pinned]

    def reset(self):
        self._last_x = None
        self._last_cycle = None

    def warm_start(self, plan: FootstepPlan, refs: ReferenceBundle) -> np.ndarray:
        """Previous solution shifted to the current tick.

        Jerk blocks shift by the number of whole horizon samples elapsed in
        one control tick (the last sample is repeated); step blocks shift
        by one on a cycle rollover, the freed slot taking its reference.
        """
        lay = self.layout
        x = np.zeros(lay.n_t)
        for axis, ref in enumerate(refs.steps()):
            x[lay.step(axis)] = ref
        if self._last_x is None:
            return x
        prev = self._last_x
        shift = int(round(self.horizon.dt_ctrl / self.horizon.dt_mpc))
        for c in range(5):
            blk = prev[lay.jerk(c)]
            if shift:
                blk = np.concatenate([blk[shift:], np.repeat(blk[-1:], min(shift, len(blk)))])[: lay.n_h]
            x[lay.jerk(c)] = blk
        rolled = plan.cycle - (self._last_cycle if self._last_cycle is not None else plan.cycle)
        for axis in range(3):
            blk = prev[lay.step(axis)]
            if rolled > 0:
                blk = np.concatenate([blk[rolled:], x[lay.step(axis)][len(blk) - rolled:]])[: lay.n_f]
            x[lay.step(axis)] = blk
        x[lay.step(2)] = refs.d_z
        return x

    def build(self, state: PendulumState, plan: FootstepPlan):
        mapping = build_mapping(plan, self.horizon.dt_mpc, self.horizon.n_h, self.horizon.n_f)
        refs = build_references(plan, mapping, self.params, self.overrides)
        hz = self.horizon
        guard = (hz.guard_next_tick and plan.elapsed + hz.dt_ctrl >= hz.transfer_window
                 and plan.remaining - hz.dt_ctrl >= hz.transfer_window)
        problem = build_problem(state, plan, refs, mapping, self.weights, self.bounds, self.toggles,
                                self.pred, self.params, hz.dt_ctrl, plan.prev_next_step, guard)
        return problem, mapping, refs

    def solve(self, state: PendulumState, plan: FootstepPlan, sqp: SqpSettings | None = None) -> NmpcSolution:
        """Solve the tick's QCQP; raises ``Infeasible`` if even the relaxed QP fails."""
        problem, mapping, refs = self.build(state, plan)
        x0 = self.warm_start(plan, refs)
        x, report = solve_sqp(problem, x0, sqp or self.sqp, channels=self.free_channels)
        self._last_x = x
        self._last_cycle = plan.cycle
        return NmpcSolution(x, report, problem, mapping, refs, self.layout)
