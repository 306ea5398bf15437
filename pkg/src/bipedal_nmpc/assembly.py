"""Assemble the per-tick NMPC problem as a QCQP.

Decision vector layout (``n_t = 5 n_h + 3 n_f``)::

    [jerk c_x | jerk c_y | jerk c_z | jerk theta_r | jerk theta_p | D_x | D_y | D_z]

where ``D_*`` are the locations of the next ``n_f`` footsteps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gait import FootstepPlan, HorizonMapping, ReferenceBundle, build_mapping, side_sign
from .pendulum import CX, CY, CZ, N_CHANNELS, TP, TR, ModelParams, PendulumState, PredictionMatrices, transition
from .qcqp import DimensionMismatch, QcqpProblem, QuadraticConstraints

CHANNEL_NAMES = ("jerk_c_x", "jerk_c_y", "jerk_c_z", "jerk_theta_r", "jerk_theta_p", "D_x", "D_y", "D_z")


@dataclass(frozen=True)
class Layout:
    n_h: int
    n_f: int

    @property
    def n_t(self) -> int:
        return N_CHANNELS * self.n_h + 3 * self.n_f

    def jerk(self, ch: int) -> slice:
        return slice(ch * self.n_h, (ch + 1) * self.n_h)

    def step(self, axis: int) -> slice:
        start = N_CHANNELS * self.n_h + axis * self.n_f
        return slice(start, start + self.n_f)

    def channels(self) -> list[slice]:
        return [self.jerk(c) for c in range(N_CHANNELS)] + [self.step(a) for a in range(3)]

    def first_jerks(self, x: np.ndarray) -> np.ndarray:
        return x[[self.jerk(c).start for c in range(N_CHANNELS)]]

    def next_step(self, x: np.ndarray, k: int = 0) -> np.ndarray:
        return np.array([x[self.step(a).start + k] for a in range(3)])


@dataclass(frozen=True)
class Weights:
    """Objective weights per motion channel (c_x, c_y, c_z, theta_r, theta_p)
    and per step axis (D_x, D_y, D_z)."""

    alpha: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    beta: tuple = (50.0, 50.0, 200.0, 200.0, 200.0)
    gamma: tuple = (1e-2, 1e-2, 1e-3, 1e-3, 1e-3)
    delta: tuple = (1000.0, 1000.0, 1000.0)

    def __post_init__(self):
        for name, n in (("alpha", 5), ("beta", 5), ("gamma", 5), ("delta", 3)):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != n or min(vals) < 0:
                raise ValueError(f"{name} needs {n} non-negative entries")
            object.__setattr__(self, name, vals)
        for c in range(5):
            if self.beta[c] == 0 and self.gamma[c] == 0:
                raise ValueError(f"channel {c}: beta and gamma cannot both be zero")

    def scaled(self, k: float) -> "Weights":
        mul = lambda t: tuple(k * v for v in t)
        return Weights(mul(self.alpha), mul(self.beta), mul(self.gamma), mul(self.delta))


@dataclass(frozen=True)
class Bounds:
    """Feasibility bounds; ZMP box is foot-relative, step ranges are
    relative to the previous step, angles are absolute."""

    p_x: tuple = (-0.03, 0.07)
    p_y: tuple = (-0.05, 0.05)
    d_x: tuple = (-0.1, 0.3)
    d_y: tuple = (0.11, 0.2)
    rate_x: tuple = (-1.0, 3.0)
    rate_y: tuple = (-1.0, 1.0)
    h: tuple = (-0.15, 0.1)
    theta_r: tuple = (-0.087, 0.175)
    theta_p: tuple = (-0.175, 0.175)
    tau_r: tuple = (-80.0, 80.0)
    tau_p: tuple = (-80.0, 80.0)

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo < hi:
                raise ValueError(f"bound {name}: min must be below max")
            object.__setattr__(self, name, (lo, hi))


STRATEGIES = {
    1: (True, False, False),
    2: (True, True, False),
    3: (True, True, True),
    4: (False, True, True),
}


@dataclass(frozen=True)
class StrategyToggles:
    """Which balance strategies the optimizer may use.

    A disabled strategy is pinned to its reference with equality rows.
    ``pin_next_only`` restricts the rotation/height pins to the first sample.
    """

    allow_step_adjust: bool = True
    allow_body_rotation: bool = True
    allow_height_variation: bool = True
    pin_next_only: bool = False

    @classmethod
    def strategy(cls, n: int, pin_next_only: bool = False) -> "StrategyToggles":
        if n not in STRATEGIES:
            raise ValueError(f"strategy must be one of {sorted(STRATEGIES)}, got {n}")
        return cls(*STRATEGIES[n], pin_next_only=pin_next_only)

    @property
    def number(self) -> int | None:
        key = (self.allow_step_adjust, self.allow_body_rotation, self.allow_height_variation)
        return next((k for k, v in STRATEGIES.items() if v == key), None)

    def pinned_channels(self) -> set[int]:
        """Indices into ``CHANNEL_NAMES`` fully fixed by equality rows."""
        pinned = {7}  # step heights always follow the surface
        if not self.allow_step_adjust:
            pinned |= {5, 6}
        if not self.pin_next_only:
            if not self.allow_body_rotation:
                pinned |= {TR, TP}
            if not self.allow_height_variation:
                pinned.add(CZ)
        return pinned


def _check(state: PendulumState, pred: PredictionMatrices, mapping: HorizonMapping):
    if mapping.n_h != len(pred.P_ps):
        raise DimensionMismatch(f"mapping has {mapping.n_h} samples, prediction {len(pred.P_ps)}")


def assemble_objective(state: PendulumState, refs: ReferenceBundle, weights: Weights,
                       pred: PredictionMatrices, n_f: int) -> tuple[np.ndarray, np.ndarray]:
    """``(G, g)`` such that ``x'Gx + g'x`` equals the tracking cost up to a constant."""
    lay = Layout(pred.n_h, n_f)
    if len(refs.d_x) != n_f or len(refs.c_x) != pred.n_h:
        raise DimensionMismatch("reference sizes do not match the layout")
    G = np.zeros((lay.n_t, lay.n_t))
    g = np.zeros(lay.n_t)
    PvuTPvu = pred.P_vu.T @ pred.P_vu
    PpuTPpu = pred.P_pu.T @ pred.P_pu
    eye = np.eye(pred.n_h)
    for c, ref in enumerate(refs.motion()):
        a, b, gm = weights.alpha[c], weights.beta[c], weights.gamma[c]
        s = lay.jerk(c)
        G[s, s] = 0.5 * gm * eye + 0.5 * a * PvuTPvu + 0.5 * b * PpuTPpu
        xh = state.channel(c)
        g[s] = (a * pred.P_vu.T @ (pred.P_vs @ xh) + b * pred.P_pu.T @ (pred.P_ps @ xh)
                - b * pred.P_pu.T @ ref)
    for axis, ref in enumerate(refs.steps()):
        s = lay.step(axis)
        G[s, s] = 0.5 * weights.delta[axis] * np.eye(n_f)
        g[s] = -weights.delta[axis] * ref
    return G, g


class _Affine:
    """Per-sample affine maps ``M x + c`` over the decision vector."""

    def __init__(self, state: PendulumState, pred: PredictionMatrices, mapping: HorizonMapping, support):
        self.lay = Layout(pred.n_h, mapping.n_f)
        self.rows = len(pred.P_ps)
        self.state, self.pred, self.mapping, self.support = state, pred, mapping, support

    def pos(self, ch):
        M = np.zeros((self.rows, self.lay.n_t))
        M[:, self.lay.jerk(ch)] = self.pred.P_pu
        return M, self.pred.P_ps @ self.state.channel(ch)

    def acc(self, ch):
        M = np.zeros((self.rows, self.lay.n_t))
        M[:, self.lay.jerk(ch)] = self.pred.P_au
        return M, self.pred.P_as @ self.state.channel(ch)

    def foot(self, axis):
        M = np.zeros((self.rows, self.lay.n_t))
        M[:, self.lay.step(axis)] = self.mapping.E_c
        return M, self.mapping.e_c * self.support[axis]


def assemble_zmp_constraints(state: PendulumState, mapping: HorizonMapping, plan: FootstepPlan,
                             refs: ReferenceBundle, bounds: Bounds, pred: PredictionMatrices,
                             params: ModelParams) -> QuadraticConstraints:
    """Foot-relative ZMP box as ``4 n_h`` quadratic rows.

    Row blocks (each ``n_h`` long): x-upper, x-lower, y-upper, y-lower. Each
    row equals ``m (g + c_z'') (p - d - bound)`` for the upper bounds and its
    negation with the lower bound, so ``h <= 0`` iff the ZMP respects it.
    Support heights are taken from the reference surface.
    """
    return _zmp_rows(state, mapping, plan.support, refs.support_z, bounds, pred, params)


def assemble_tick_zmp_constraints(state: PendulumState, plan: FootstepPlan, refs: ReferenceBundle,
                                  bounds: Bounds, params: ModelParams, dt_ctrl: float, n_h: int,
                                  n_f: int) -> QuadraticConstraints:
    """ZMP box rows for the state reached after one control tick.

    The horizon samples start one ``dt_mpc`` ahead, so without these four
    rows the ZMP the plant actually passes through between replans is
    never constrained. Only the first jerk of each channel enters.
    """
    A, B = transition(dt_ctrl)
    cols = np.zeros((3, n_h))
    cols[:, 0] = B
    pred = PredictionMatrices(A[:1], A[1:2], A[2:3], cols[:1], cols[1:2], cols[2:3], dt_ctrl, n_h)
    mapping = build_mapping(plan, dt_ctrl, 1, n_f)
    support_z = mapping.support_sequence(plan.support[2], refs.d_z)
    return _zmp_rows(state, mapping, plan.support, support_z, bounds, pred, params)


def _zmp_rows(state, mapping, support, support_z, bounds, pred, params) -> QuadraticConstraints:
    _check(state, pred, mapping)
    aff = _Affine(state, pred, mapping, support)
    m, g = params.m, params.g
    Bz, bz = aff.acc(CZ)
    bz = bz + g
    Cz, cz = aff.pos(CZ)
    cz = cz - support_z
    lefts, rights, vs, sigmas = [], [], [], []
    for ch, axis, th_ch, inertia, mom_sign, box in (
        (CX, 0, TP, params.I_y, -1.0, bounds.p_x),
        (CY, 1, TR, params.I_x, 1.0, bounds.p_y),
    ):
        P, p = aff.pos(ch)
        D, d = aff.foot(axis)
        A1 = P - D
        Ba, ba = aff.acc(ch)
        T, t = aff.acc(th_ch)
        for bound, sgn in ((box[1], 1.0), (box[0], -1.0)):
            a1 = p - d - bound
            left = np.stack([m * A1, -m * Cz], axis=1)
            right = np.stack([Bz, Ba], axis=1)
            v = (m * (a1[:, None] * Bz + bz[:, None] * A1) - m * (cz[:, None] * Ba + ba[:, None] * Cz)
                 + mom_sign * inertia * T)
            sigma = m * a1 * bz - m * cz * ba + mom_sign * inertia * t
            lefts.append(sgn * left)
            rights.append(right)
            vs.append(sgn * v)
            sigmas.append(sgn * sigma)
    return QuadraticConstraints(
        np.concatenate(lefts), np.concatenate(rights), np.concatenate(vs), np.concatenate(sigmas)
    )


@dataclass
class _Rows:
    n: int
    A: list = field(default_factory=list)
    b: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)
    count: int = 0

    def add(self, name: str, A: np.ndarray, b: np.ndarray):
        A = np.atleast_2d(A)
        b = np.atleast_1d(np.asarray(b, dtype=float))
        start = self.count
        self.A.append(A)
        self.b.append(b)
        self.count += len(b)
        prev = self.labels.get(name)
        self.labels[name] = slice(prev.start if prev else start, self.count)

    def box(self, name: str, M: np.ndarray, const: np.ndarray, lo, hi):
        """``lo <= M x + const <= hi`` as two row blocks."""
        if hi is not None:
            self.add(name, M, hi - const)
        if lo is not None:
            self.add(name, -M, const - lo)

    def stacked(self):
        if not self.A:
            return np.zeros((0, self.n)), np.zeros(0)
        return np.vstack(self.A), np.concatenate(self.b)


def _pin_rows(P, p, ref, pred: PredictionMatrices, block: slice, first_only: bool, x0: np.ndarray):
    """Equality rows fixing a channel to ``ref``.

    Over the full horizon the channel follows a receding three-sample
    deadbeat onto ``ref`` held at rest, pinned on the jerks. Inverting the
    position rollout instead is exponentially ill-conditioned: the sampled
    triple integrator has a zero outside the unit circle, so round-off in the
    initial state grows into large tail jerks.
    """
    if first_only:
        return P[:1], (ref - p)[:1]
    M = np.zeros_like(P)
    M[:, block] = np.eye(pred.n_h)
    return M, deadbeat_jerks(x0, ref, pred.dt)


def deadbeat_jerks(x0: np.ndarray, ref: np.ndarray, dt: float) -> np.ndarray:
    """Jerks steering ``[pos, vel, acc]`` to ``(ref[k + 2], 0, 0)`` three samples ahead, per sample."""
    A, B = transition(dt)
    reach = np.column_stack([A @ A @ B, A @ B, B])
    A3 = A @ A @ A
    x = np.asarray(x0, dtype=float)
    n = len(ref)
    out = np.empty(n)
    for k in range(n):
        target = np.array([ref[min(k + 2, n - 1)], 0.0, 0.0])
        out[k] = np.linalg.solve(reach, target - A3 @ x)[0]
        x = A @ x + B * out[k]
    return out


def assemble_linear_constraints(state: PendulumState, plan: FootstepPlan, mapping: HorizonMapping,
                                refs: ReferenceBundle, bounds: Bounds, pred: PredictionMatrices,
                                params: ModelParams, toggles: StrategyToggles, dt_ctrl: float,
                                prev_next_step=None):
    """Linear inequality and equality rows.

    ``prev_next_step`` is the ``(x, y)`` next-step location solved at the
    previous tick for the same cycle; the reference is used when absent.

    Returns:
        ``(A_in, b_in, A_eq, b_eq, labels)`` with ``labels`` mapping row-group
        names to slices (keys prefixed ``in:`` / ``eq:``).
    """
    _check(state, pred, mapping)
    aff = _Affine(state, pred, mapping, plan.support)
    lay = aff.lay
    n_f = mapping.n_f
    ineq, eq = _Rows(lay.n_t), _Rows(lay.n_t)
    pinned = toggles.pinned_channels()

    # step location range, chained from the current support
    if toggles.allow_step_adjust:
        for axis, (lo, hi) in ((0, bounds.d_x), (1, bounds.d_y)):
            for i in range(n_f):
                row = np.zeros(lay.n_t)
                row[lay.step(axis).start + i] = 1.0
                if i == 0:
                    const = -plan.support[axis]
                else:
                    row[lay.step(axis).start + i - 1] = -1.0
                    const = 0.0
                # laterally the signed width must point away from the previous foot
                sgn = side_sign(plan.side(plan.cycle + i + 1)) if axis == 1 else 1.0
                ineq.box(f"step_range_{'xy'[axis]}", sgn * row[None, :], np.array([sgn * const]), lo, hi)
        # step-rate limit on the next step only
        prev = prev_next_step if prev_next_step is not None else (refs.d_x[0], refs.d_y[0])
        for axis, (lo, hi) in ((0, bounds.rate_x), (1, bounds.rate_y)):
            row = np.zeros(lay.n_t)
            row[lay.step(axis).start] = 1.0
            ineq.box(f"step_rate_{'xy'[axis]}", row[None, :], np.array([-prev[axis]]), lo * dt_ctrl, hi * dt_ctrl)
    else:
        for axis, ref in ((0, refs.d_x), (1, refs.d_y)):
            M = np.zeros((n_f, lay.n_t))
            M[:, lay.step(axis)] = np.eye(n_f)
            eq.add("pin_steps", M, ref)

    # step heights follow the surface
    M = np.zeros((n_f, lay.n_t))
    M[:, lay.step(2)] = np.eye(n_f)
    eq.add("step_height", M, refs.d_z)

    P, p = aff.pos(CZ)
    if CZ not in pinned:
        ineq.box("height_band", P, p - refs.support_z - params.h_z_ref, bounds.h[0], bounds.h[1])
        A, a = aff.acc(CZ)
        ineq.box("no_free_fall", A, a, -params.g, None)
    if not toggles.allow_height_variation:
        eq.add("pin_height", *_pin_rows(P, p, refs.c_z, pred, lay.jerk(CZ), toggles.pin_next_only,
                                        state.channel(CZ)))

    for ch, box, tau, inertia, ref, name in (
        (TR, bounds.theta_r, bounds.tau_r, params.I_x, refs.theta_r, "r"),
        (TP, bounds.theta_p, bounds.tau_p, params.I_y, refs.theta_p, "p"),
    ):
        P, p = aff.pos(ch)
        if ch not in pinned:
            ineq.box(f"angle_{name}", P, p, box[0], box[1])
            A, a = aff.acc(ch)
            ineq.box(f"torque_{name}", inertia * A, inertia * a, tau[0], tau[1])
        if not toggles.allow_body_rotation:
            eq.add(f"pin_angle_{name}", *_pin_rows(P, p, ref, pred, lay.jerk(ch), toggles.pin_next_only,
                                                  state.channel(ch)))

    A_in, b_in = ineq.stacked()
    A_eq, b_eq = eq.stacked()
    labels = {f"in:{k}": v for k, v in ineq.labels.items()}
    labels.update({f"eq:{k}": v for k, v in eq.labels.items()})
    return A_in, b_in, A_eq, b_eq, labels


def build_problem(state: PendulumState, plan: FootstepPlan, refs: ReferenceBundle, mapping: HorizonMapping,
                  weights: Weights, bounds: Bounds, toggles: StrategyToggles, pred: PredictionMatrices,
                  params: ModelParams, dt_ctrl: float, prev_next_step=None,
                  guard_next_tick: bool = False) -> QcqpProblem:
    """Full per-tick QCQP.

    With ``guard_next_tick`` (and ``dt_ctrl < dt_mpc``) four ZMP rows for
    the state one control tick ahead follow the ``4 n_h`` horizon rows.
    """
    G, g = assemble_objective(state, refs, weights, pred, mapping.n_f)
    quad = assemble_zmp_constraints(state, mapping, plan, refs, bounds, pred, params)
    if guard_next_tick and dt_ctrl < pred.dt - 1e-12:
        tick = assemble_tick_zmp_constraints(state, plan, refs, bounds, params, dt_ctrl, pred.n_h, mapping.n_f)
        quad = QuadraticConstraints(*(np.concatenate([getattr(quad, f), getattr(tick, f)])
                                      for f in ("left", "right", "v", "sigma")))
    A_in, b_in, A_eq, b_eq, labels = assemble_linear_constraints(
        state, plan, mapping, refs, bounds, pred, params, toggles, dt_ctrl, prev_next_step
    )
    return QcqpProblem(G, g, quad, A_in, b_in, A_eq, b_eq, labels=labels)
