"""Closed-loop pendulum simulation, push protocols and solver timing."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from shapely.geometry import MultiPoint, Point

from .assembly import Bounds, StrategyToggles, Weights
from .controller import HorizonConfig, NmpcController
from .gait import FootstepPlan, ReferenceOverrides, side_sign, swing_foot_trajectory
from .pendulum import DegenerateDynamics, ModelParams, PendulumState, step_state, zmp
from .qcqp import Infeasible, IterationLimit, SqpSettings

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ScenarioInvalid(ValueError):
    """A scenario is inconsistent or cannot be simulated."""


@dataclass(frozen=True)
class Disturbance:
    """Constant horizontal force on the CoM over ``[start, start + duration)``."""

    start: float
    duration: float
    force: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.duration > 0:
            raise ScenarioInvalid("disturbance duration must be positive")
        if self.start < 0:
            raise ScenarioInvalid("disturbance start must be non-negative")
        object.__setattr__(self, "force", tuple(float(f) for f in self.force))
        if len(self.force) != 2:
            raise ScenarioInvalid("disturbance force needs (F_x, F_y)")

    def overlap(self, t0: float, t1: float) -> tuple[float, float]:
        """Length and midpoint of the part of ``[t0, t1)`` the push is active."""
        lo, hi = max(t0, self.start), min(t1, self.start + self.duration)
        if hi <= lo:
            return 0.0, t0
        return hi - lo, 0.5 * (lo + hi)


@dataclass(frozen=True)
class SimConfig:
    """Loop timing and failure thresholds.

    Attributes:
        duration: Simulated time [s].
        zmp_margin: Tolerated ZMP excursion outside the allowed region [m].
        fall_ticks: Consecutive ticks beyond ``zmp_margin`` that count as a fall.
        divergence: Horizontal CoM-to-support distance that counts as a fall [m].
        swing_apex: Swing-foot clearance, output only [m].
        transfer_samples: Horizon samples around a support switch during which
            the ZMP may lie anywhere between the two feet' boxes.
        guard_next_tick: Also constrain the ZMP one control tick ahead.
    """

    dt_ctrl: float = 0.005
    dt_mpc: float = 0.05
    n_h: int = 31
    n_f: int = 2
    duration: float = 5.6
    zmp_margin: float = 0.005
    fall_ticks: int = 3
    divergence: float = 0.5
    swing_apex: float = 0.05
    transfer_samples: int = 2
    guard_next_tick: bool = True

    def __post_init__(self):
        if not 0 < self.dt_ctrl <= self.dt_mpc + 1e-12:
            raise ScenarioInvalid("need 0 < dt_ctrl <= dt_mpc")
        if self.duration <= 0 or self.n_h < 1 or self.n_f < 1 or self.fall_ticks < 1:
            raise ScenarioInvalid("duration, n_h, n_f and fall_ticks must be positive")

    @property
    def horizon(self) -> HorizonConfig:
        return HorizonConfig(self.dt_mpc, self.n_h, self.n_f, self.dt_ctrl, self.guard_next_tick,
                             self.transfer_samples * self.dt_mpc - 1e-12)

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt_ctrl))


@dataclass(frozen=True)
class Scenario:
    name: str
    steps: tuple
    first_side: str = "right"
    params: ModelParams = field(default_factory=ModelParams)
    weights: Weights = field(default_factory=Weights)
    bounds: Bounds = field(default_factory=Bounds)
    toggles: StrategyToggles = field(default_factory=StrategyToggles)
    disturbances: tuple = ()
    overrides: ReferenceOverrides = field(default_factory=ReferenceOverrides)
    sim: SimConfig = field(default_factory=SimConfig)
    sqp: SqpSettings = field(default_factory=SqpSettings)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "disturbances", tuple(self.disturbances))
        if not self.steps:
            raise ScenarioInvalid("scenario needs at least one step")
        if self.first_side not in ("left", "right"):
            raise ScenarioInvalid("first_side must be 'left' or 'right'")

    def with_strategy(self, n: int) -> "Scenario":
        return replace(self, toggles=StrategyToggles.strategy(n, self.toggles.pin_next_only))

    def with_push(self, force, start: float = 2.0, duration: float = 0.1) -> "Scenario":
        return replace(self, disturbances=(Disturbance(start, duration, tuple(force)),))

    def n_cycles(self) -> int:
        """Cycles to plan so the horizon never runs past the plan."""
        needed = self.sim.duration + self.sim.n_h * self.sim.dt_mpc
        total, n = 0.0, 0
        while total <= needed:
            spec = self.steps[min(n, len(self.steps) - 1)]
            total += spec.duration
            n += 1
        return n + self.sim.n_f + 1

    def plan(self) -> FootstepPlan:
        return FootstepPlan.from_specs(self.steps, self.n_cycles(), self.first_side)


@dataclass(frozen=True)
class Outcome:
    kind: str  # "completed" | "fallen" | "solver_failed"
    t: float | None = None
    reason: str = ""

    @property
    def completed(self) -> bool:
        return self.kind == "completed"

    @property
    def exit_code(self) -> int:
        return {"completed": 0, "fallen": 2, "solver_failed": 3}[self.kind]


COLUMNS = (
    ["t", "cycle", "support_side"]
    + [f"{c}_{d}" for c in ("c_x", "c_y", "c_z", "theta_r", "theta_p") for d in ("pos", "vel", "acc")]
    + [f"jerk_{c}" for c in ("c_x", "c_y", "c_z", "theta_r", "theta_p")]
    + ["zmp_x", "zmp_y", "zmp_z", "support_x", "support_y", "support_z",
       "next_step_x", "next_step_y", "next_step_z", "swing_x", "swing_y", "swing_z",
       "ref_c_z", "ref_theta_p", "push_x", "push_y",
       "sqp_iterations", "sqp_min_increment", "sqp_relaxed", "constraint_violation",
       "zmp_violation", "equality_residual", "step_rate_x", "step_rate_y", "solve_time_s"]
)


@dataclass
class TrajectoryLog:
    """One record per control tick plus step events."""

    rows: list = field(default_factory=list)
    step_events: list = field(default_factory=list)

    def append(self, row: dict):
        if self.rows and row["t"] <= self.rows[-1][0]:
            raise ValueError("log timestamps must increase")
        self.rows.append([row[c] for c in COLUMNS])

    def __len__(self):
        return len(self.rows)

    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, len(COLUMNS))

    def column(self, name: str) -> np.ndarray:
        return self.array()[:, COLUMNS.index(name)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema_version={SCHEMA_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a trajectory CSV written by ``TrajectoryLog.write_csv``."""
    with open(path) as fh:
        head = fh.readline().strip()
        if head != f"# schema_version={SCHEMA_VERSION}":
            raise ValueError(f"unsupported trajectory schema: {head!r}")
        cols = next(csv.reader([fh.readline()]))
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return cols, data


def _region_distance(point, centers, bounds: Bounds) -> float:
    """Distance from ``point`` to the hull of foot-relative ZMP boxes at ``centers``."""
    corners = [
        (cx + dx, cy + dy)
        for cx, cy in centers
        for dx in bounds.p_x
        for dy in bounds.p_y
    ]
    return float(MultiPoint(corners).convex_hull.distance(Point(point)))


class Episode:
    """Stateful closed loop; ``copy.deepcopy`` snapshots it for branching runs."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.cfg = scenario.sim
        self.plan = scenario.plan()
        sup = self.plan.support
        self.state = PendulumState.at_rest((sup[0], sup[1], sup[2] + scenario.params.h_z_ref))
        self.controller = NmpcController(
            params=scenario.params, weights=scenario.weights, bounds=scenario.bounds,
            toggles=scenario.toggles, horizon=self.cfg.horizon, sqp=scenario.sqp,
            overrides=scenario.overrides,
        )
        self.tick = 0
        self.log = TrajectoryLog()
        self.outcome: Outcome | None = None
        self._bad_ticks = 0

    @property
    def t(self) -> float:
        return self.tick * self.cfg.dt_ctrl

    def _push(self, t0: float, t1: float) -> np.ndarray:
        """Velocity and position increments ``(2, 2)`` from active disturbances."""
        out = np.zeros((2, 2))
        for d in self.scenario.disturbances:
            tau, mid = d.overlap(t0, t1)
            if tau > 0:
                a = np.asarray(d.force) / self.scenario.params.m
                out[0] += a * tau * (t1 - mid)
                out[1] += a * tau
        return out

    def _allowed_centers(self, plan: FootstepPlan, next_step) -> list:
        """Foot centers whose ZMP-box hull is allowed at this tick."""
        window = self.cfg.transfer_samples * self.cfg.dt_mpc - 1e-12
        centers = [tuple(plan.support[:2])]
        if plan.elapsed < window and plan.previous_support is not None:
            centers.append(tuple(plan.previous_support[:2]))
        elif plan.remaining < window:
            centers.append(tuple(next_step[:2]))
        return centers

    def step(self) -> Outcome | None:
        if self.outcome is not None:
            return self.outcome
        cfg, params = self.cfg, self.scenario.params
        t0, t1 = self.t, self.t + cfg.dt_ctrl
        plan = self.plan
        try:
            sol = self.controller.solve(self.state, plan)
        except (Infeasible, IterationLimit) as exc:
            self.outcome = Outcome("solver_failed", t0, str(exc))
            return self.outcome
        jerks = sol.first_jerks
        x = step_state(self.state.x, jerks, cfg.dt_ctrl)
        push = self._push(t0, t1)
        x[:2, 0] += push[0]
        x[:2, 1] += push[1]
        state = PendulumState(x)

        nxt, after = sol.next_step(0), sol.next_step(min(1, cfg.n_f - 1))
        prev_mem = plan.prev_next_step
        rate = np.zeros(2)
        if prev_mem is not None and self.scenario.toggles.allow_step_adjust:
            rate = (nxt[:2] - np.asarray(prev_mem)) / cfg.dt_ctrl
        new_plan = plan.advance(cfg.dt_ctrl, nxt, (tuple(nxt[:2]), tuple(after[:2])))
        if new_plan.cycle != plan.cycle:
            self.log.step_events.append({
                "t": t1, "cycle": new_plan.cycle, "side": new_plan.support_side,
                "location": [float(v) for v in new_plan.support],
            })

        try:
            p = zmp(state, new_plan.support[2], params)
        except DegenerateDynamics as exc:
            self.outcome = Outcome("fallen", t1, f"free fall: {exc}")
            self.state, self.plan, self.tick = state, new_plan, self.tick + 1
            return self.outcome
        centers = self._allowed_centers(new_plan, nxt)
        viol = _region_distance(p[:2], centers, self.scenario.bounds)

        swing_start = plan.previous_support if plan.previous_support is not None else nxt
        swing = swing_foot_trajectory(swing_start, nxt, plan.duration, cfg.swing_apex,
                                      min(plan.elapsed + cfg.dt_ctrl, plan.duration))
        rep = sol.report
        ov = self.scenario.overrides
        row = {
            "t": t1, "cycle": new_plan.cycle, "support_side": side_sign(new_plan.support_side),
            "zmp_x": p[0], "zmp_y": p[1], "zmp_z": p[2],
            "support_x": new_plan.support[0], "support_y": new_plan.support[1],
            "support_z": new_plan.support[2],
            "next_step_x": nxt[0], "next_step_y": nxt[1], "next_step_z": nxt[2],
            "swing_x": swing[0], "swing_y": swing[1], "swing_z": swing[2],
            "ref_c_z": params.h_z_ref + new_plan.support[2] + float(ov.height(t1)),
            "ref_theta_p": float(ov.pitch(t1)),
            "push_x": push[1][0] * params.m / cfg.dt_ctrl, "push_y": push[1][1] * params.m / cfg.dt_ctrl,
            "sqp_iterations": rep.iterations, "sqp_min_increment": rep.final_increment,
            "sqp_relaxed": float(rep.relaxed), "constraint_violation": rep.violations[-1],
            "zmp_violation": viol, "equality_residual": sol.equality_residual(),
            "step_rate_x": rate[0], "step_rate_y": rate[1], "solve_time_s": rep.solve_time,
        }
        for i, ch in enumerate(("c_x", "c_y", "c_z", "theta_r", "theta_p")):
            row[f"jerk_{ch}"] = jerks[i]
            for j, d in enumerate(("pos", "vel", "acc")):
                row[f"{ch}_{d}"] = state.x[i, j]
        self.log.append(row)

        self.state, self.plan, self.tick = state, new_plan, self.tick + 1
        self._bad_ticks = self._bad_ticks + 1 if viol > cfg.zmp_margin else 0
        if self._bad_ticks >= cfg.fall_ticks:
            self.outcome = Outcome("fallen", t1, f"ZMP {viol:.4f} m outside support for {cfg.fall_ticks} ticks")
        elif np.hypot(*(state.com[:2] - new_plan.support[:2])) > cfg.divergence:
            self.outcome = Outcome("fallen", t1, "CoM diverged from support")
        elif self.tick >= cfg.n_ticks:
            self.outcome = Outcome("completed", t1)
        return self.outcome

    def run(self, until: float | None = None) -> Outcome | None:
        """Run to the end (or until time ``until``); returns the outcome if decided."""
        stop = self.cfg.n_ticks if until is None else min(self.cfg.n_ticks, int(round(until / self.cfg.dt_ctrl)))
        while self.outcome is None and self.tick < stop:
            self.step()
        return self.outcome

    def summary(self) -> dict:
        arr = self.log.array()
        col = lambda n: arr[:, COLUMNS.index(n)] if len(arr) else np.zeros(0)
        stat = lambda v, f: float(f(v)) if len(v) else 0.0
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario.name,
            "strategy": self.scenario.toggles.number,
            "outcome": self.outcome.kind if self.outcome else "incomplete",
            "outcome_time_s": self.outcome.t if self.outcome else None,
            "outcome_reason": self.outcome.reason if self.outcome else "",
            "ticks": len(self.log),
            "failure_criterion": {
                "zmp_margin_m": self.cfg.zmp_margin,
                "fall_ticks": self.cfg.fall_ticks,
                "divergence_m": self.cfg.divergence,
                "transfer_window_s": self.cfg.transfer_samples * self.cfg.dt_mpc,
                "zmp_guard_next_tick": self.cfg.guard_next_tick,
            },
            "max_zmp_violation_m": stat(col("zmp_violation"), np.max),
            "max_constraint_violation": stat(col("constraint_violation"), np.max),
            "max_equality_residual": stat(col("equality_residual"), np.max),
            "relaxed_ticks": int(col("sqp_relaxed").sum()),
            "mean_sqp_iterations": stat(col("sqp_iterations"), np.mean),
            "mean_solve_time_s": stat(col("solve_time_s"), np.mean),
            "max_solve_time_s": stat(col("solve_time_s"), np.max),
            "step_events": self.log.step_events,
        }


@dataclass
class EpisodeResult:
    outcome: Outcome
    log: TrajectoryLog
    summary: dict

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "trajectory.csv", out / "summary.json"
        self.log.write_csv(csv_path)
        json_path.write_text(json.dumps(self.summary, indent=2))
        return csv_path, json_path


def run_episode(scenario: Scenario, weights: Weights | None = None, bounds: Bounds | None = None,
                toggles: StrategyToggles | None = None) -> EpisodeResult:
    """Simulate ``scenario`` to completion or failure."""
    changes = {k: v for k, v in (("weights", weights), ("bounds", bounds), ("toggles", toggles)) if v is not None}
    if changes:
        scenario = replace(scenario, **changes)
    ep = Episode(scenario)
    outcome = ep.run()
    return EpisodeResult(outcome, ep.log, ep.summary())


# -- maximal push search ------------------------------------------------------

def _push_vector(axis: str, force: float) -> tuple[float, float]:
    if axis == "x":
        return (force, 0.0)
    if axis == "y":
        return (0.0, force)
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


@dataclass
class PushSearchResult:
    force: float
    axis: str
    strategy: int | None
    evaluations: list  # (force, outcome kind)


def max_push_search(scenario: Scenario, axis: str = "x", toggles: StrategyToggles | None = None,
                    start: float = 2.0, duration: float = 0.1, resolution: float = 1.0,
                    initial: float = 100.0, f_max: float = 2000.0) -> PushSearchResult:
    """Largest push along ``axis`` the closed loop rejects, to ``resolution`` N.

    The episode is simulated once up to the push onset; every trial force
    resumes from that snapshot. The force is bracketed by growing it by
    half until failure, then bisected.
    """
    if toggles is not None:
        scenario = replace(scenario, toggles=toggles)
    base = Episode(replace(scenario, disturbances=()))
    base.run(until=start)
    if base.outcome is not None:
        raise ScenarioInvalid(f"scenario fails before the push: {base.outcome}")
    evals = []

    def survives(force: float) -> bool:
        ep = copy.deepcopy(base)
        ep.scenario = replace(ep.scenario, disturbances=(Disturbance(start, duration, _push_vector(axis, force)),))
        outcome = ep.run()
        evals.append((force, outcome.kind))
        log.info("push %s=%.1f N -> %s", axis, force, outcome.kind)
        return outcome.completed

    if not survives(0.0):
        raise ScenarioInvalid("scenario does not complete without a push")
    lo, hi = 0.0, float(initial)
    while survives(hi):
        lo, hi = hi, min(f_max, 1.5 * hi)
        if lo >= f_max:
            return PushSearchResult(lo, axis, scenario.toggles.number, evals)
    while hi - lo > resolution:
        mid = math.floor(0.5 * (lo + hi))
        if mid <= lo:
            mid = lo + resolution
        if survives(mid):
            lo = mid
        else:
            hi = mid
    return PushSearchResult(lo, axis, scenario.toggles.number, evals)


def _worker_count() -> int:
    env = os.environ.get("NMPC_THREADS")
    return max(1, int(env)) if env else max(1, os.cpu_count() or 1)


def _push_job(args):
    scenario, axis, strategy = args
    return max_push_search(scenario.with_strategy(strategy), axis)


def push_table(scenario: Scenario, strategies=(1, 2, 3, 4), axes=("x", "y"),
               workers: int | None = None) -> dict:
    """``{(axis, strategy): force}`` over a worker pool capped by ``NMPC_THREADS``."""
    jobs = [(scenario, a, s) for a in axes for s in strategies]
    workers = workers or _worker_count()
    if workers == 1:
        results = [_push_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_push_job, jobs))
    return {(j[1], j[2]): r.force for j, r in zip(jobs, results)}


# -- solver timing ------------------------------------------------------------

@dataclass(frozen=True)
class TimingRow:
    n_s: int
    eps_achieved: float
    mean_time_s: float


def timing_study(scenario: Scenario, ns_values=range(1, 7), repeats: int = 1) -> list[TimingRow]:
    """Fixed-iteration SQP sweep over the closed-loop gait.

    Each run forces exactly ``n_s`` iterations per tick (``eps = 0``). The
    achieved threshold is the largest terminal ``min(F^m)`` over all ticks,
    i.e. the smallest ``eps`` that every tick would have met.
    """
    rows = []
    for n_s in ns_values:
        sqp = replace(scenario.sqp, eps=0.0, n_s=int(n_s))
        times, eps = [], 0.0
        for _ in range(repeats):
            res = run_episode(replace(scenario, sqp=sqp))
            if not res.outcome.completed:
                raise ScenarioInvalid(f"timing gait did not complete with n_s={n_s}: {res.outcome}")
            times.append(res.log.column("solve_time_s"))
            eps = max(eps, float(res.log.column("sqp_min_increment").max()))
        rows.append(TimingRow(int(n_s), eps, float(np.mean(np.concatenate(times)))))
    return rows


def format_timing(rows: list[TimingRow]) -> str:
    lines = [f"{'N_s':>4} {'eps achieved':>14} {'mean time [ms]':>15}"]
    for r in rows:
        lines.append(f"{r.n_s:>4} {r.eps_achieved:>14.2e} {1e3 * r.mean_time_s:>15.3f}")
    return "\n".join(lines)
