import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bipedal_nmpc.assembly import (
    Bounds,
    Layout,
    StrategyToggles,
    Weights,
    assemble_linear_constraints,
    assemble_objective,
    assemble_tick_zmp_constraints,
    assemble_zmp_constraints,
    build_problem,
    deadbeat_jerks,
)
from bipedal_nmpc.gait import FootstepPlan, StepSpec, build_mapping, build_references, side_sign
from bipedal_nmpc.pendulum import ModelParams, PendulumState, build_prediction, step_state, transition, zmp
from bipedal_nmpc.qcqp import SqpSettings, solve_sqp

PARAMS = ModelParams(I_x=0.8, I_y=1.2)
BOUNDS = Bounds()


def random_setup(seed, n_h=31, dt=0.05, n_f=2, elapsed=None, heights=(0.0, 0.1, -0.1)):
    rng = np.random.default_rng(seed)
    specs = [StepSpec(rng.uniform(0, 0.2), rng.uniform(0.12, 0.18), rng.choice(heights))]
    plan = FootstepPlan.from_specs(specs, 8)
    el = rng.uniform(0, 0.79) if elapsed is None else elapsed
    plan = FootstepPlan(plan.ref_steps, plan.durations, elapsed=el,
                        support=plan.ref_steps[0] + [rng.normal(0, 0.02), rng.normal(0, 0.02), 0.0])
    x = np.zeros((5, 3))
    x[:, 0] = [0.02, -0.03, PARAMS.h_z_ref, 0.01, -0.02]
    x += rng.normal(scale=0.05, size=(5, 3))
    state = PendulumState(x)
    pred = build_prediction(dt, n_h)
    mapping = build_mapping(plan, dt, n_h, n_f)
    refs = build_references(plan, mapping, PARAMS)
    return rng, state, plan, pred, mapping, refs


def predicted(state, pred, lay, x):
    """(pos, acc) arrays of shape (5, n_h) for decision vector ``x``."""
    pos = np.array([pred.P_ps @ state.channel(c) + pred.P_pu @ x[lay.jerk(c)] for c in range(5)])
    acc = np.array([pred.P_as @ state.channel(c) + pred.P_au @ x[lay.jerk(c)] for c in range(5)])
    return pos, acc


def direct_zmp_rows(state, plan, pred, mapping, refs, x):
    """m (g + c_z'') (p - d - bound), signed so that <= 0 means inside, via ``zmp``."""
    lay = Layout(pred.n_h, mapping.n_f)
    pos, acc = predicted(state, pred, lay, x)
    out = np.zeros((4, pred.n_h))
    for k in range(pred.n_h):
        s = np.zeros((5, 3))
        s[:, 0], s[:, 2] = pos[:, k], acc[:, k]
        p = zmp(PendulumState(s), refs.support_z[k], PARAMS)
        scale = PARAMS.m * (PARAMS.g + acc[2, k])
        for axis in range(2):
            d = mapping.e_c[k] * plan.support[axis] + mapping.E_c[k] @ x[lay.step(axis)]
            box = (BOUNDS.p_x, BOUNDS.p_y)[axis]
            out[2 * axis, k] = scale * (p[axis] - d - box[1])
            out[2 * axis + 1, k] = -scale * (p[axis] - d - box[0])
    return out.reshape(-1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_zmp_rows_match_direct_evaluation(seed):
    rng, state, plan, pred, mapping, refs = random_setup(seed)
    quad = assemble_zmp_constraints(state, mapping, plan, refs, BOUNDS, pred, PARAMS)
    lay = Layout(pred.n_h, mapping.n_f)
    assert quad.n_constraints == 4 * pred.n_h
    for _ in range(5):
        x = rng.normal(scale=0.5, size=lay.n_t)
        x[lay.jerk(2)] *= 0.1  # keep g + c_z'' positive
        direct = direct_zmp_rows(state, plan, pred, mapping, refs, x)
        np.testing.assert_allclose(quad.values(x), direct, rtol=1e-9, atol=1e-9 * np.abs(direct).max())


def direct_cost(state, refs, w, pred, lay, x):
    total = 0.0
    for c, ref in enumerate(refs.motion()):
        u = x[lay.jerk(c)]
        X = pred.P_ps @ state.channel(c) + pred.P_pu @ u
        V = pred.P_vs @ state.channel(c) + pred.P_vu @ u
        total += 0.5 * (w.gamma[c] * u @ u + w.alpha[c] * V @ V + w.beta[c] * (X - ref) @ (X - ref))
    for a, ref in enumerate(refs.steps()):
        D = x[lay.step(a)]
        total += 0.5 * w.delta[a] * (D - ref) @ (D - ref)
    return total


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_objective_matches_direct_cost_up_to_constant(seed):
    rng, state, plan, pred, mapping, refs = random_setup(seed)
    w = Weights(alpha=rng.uniform(0, 3, 5), beta=rng.uniform(1, 300, 5), gamma=rng.uniform(1e-4, 1, 5),
                delta=rng.uniform(1, 1e3, 3))
    G, g = assemble_objective(state, refs, w, pred, mapping.n_f)
    lay = Layout(pred.n_h, mapping.n_f)
    xs = rng.normal(size=(4, lay.n_t))
    offsets = [direct_cost(state, refs, w, pred, lay, x) - (x @ G @ x + g @ x) for x in xs]
    np.testing.assert_allclose(offsets, offsets[0], rtol=1e-9, atol=1e-9 * abs(offsets[0]))


def test_full_size_dimensions():
    _, state, plan, pred, mapping, refs = random_setup(0)
    prob = build_problem(state, plan, refs, mapping, Weights(), BOUNDS, StrategyToggles(), pred, PARAMS, 0.005)
    assert prob.n_vars == 161
    assert prob.quad.n_constraints == 124


def direct_linear_residuals(state, plan, mapping, refs, pred, x, dt_ctrl, prev):
    """Residuals ``value - limit`` (<= 0 when satisfied) of every inequality group."""
    lay = Layout(pred.n_h, mapping.n_f)
    pos, acc = predicted(state, pred, lay, x)
    both = lambda v, lo, hi: np.concatenate([v - hi, lo - v])
    out = {}
    for axis, key, rng_ in ((0, "x", BOUNDS.d_x), (1, "y", BOUNDS.d_y)):
        D = x[lay.step(axis)]
        prevs = np.concatenate([[plan.support[axis]], D[:-1]])
        sgn = np.array([side_sign(plan.side(plan.cycle + i + 1)) if axis else 1.0 for i in range(len(D))])
        out[f"in:step_range_{key}"] = both(sgn * (D - prevs), *rng_)
        rate = (BOUNDS.rate_x, BOUNDS.rate_y)[axis]
        out[f"in:step_rate_{key}"] = both(np.array([D[0] - prev[axis]]), rate[0] * dt_ctrl, rate[1] * dt_ctrl)
    out["in:height_band"] = both(pos[2] - refs.support_z - PARAMS.h_z_ref, *BOUNDS.h)
    out["in:no_free_fall"] = -PARAMS.g - acc[2]
    out["in:angle_r"] = both(pos[3], *BOUNDS.theta_r)
    out["in:angle_p"] = both(pos[4], *BOUNDS.theta_p)
    out["in:torque_r"] = both(PARAMS.I_x * acc[3], *BOUNDS.tau_r)
    out["in:torque_p"] = both(PARAMS.I_y * acc[4], *BOUNDS.tau_p)
    return out


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_linear_rows_match_their_meaning(seed):
    rng, state, plan, pred, mapping, refs = random_setup(seed)
    prev = (refs.d_x[0] + 0.001, refs.d_y[0] - 0.002)
    A_in, b_in, A_eq, b_eq, labels = assemble_linear_constraints(
        state, plan, mapping, refs, BOUNDS, pred, PARAMS, StrategyToggles(), 0.005, prev)
    lay = Layout(pred.n_h, mapping.n_f)
    x = rng.normal(scale=0.3, size=lay.n_t)
    direct = direct_linear_residuals(state, plan, mapping, refs, pred, x, 0.005, prev)
    assert set(direct) == {k for k in labels if k.startswith("in:")}
    r = A_in @ x - b_in
    for key, want in direct.items():
        np.testing.assert_allclose(np.sort(r[labels[key]]), np.sort(want), atol=1e-10)
    # step heights always follow the surface
    np.testing.assert_allclose(A_eq[labels["eq:step_height"]] @ x - b_eq[labels["eq:step_height"]],
                               x[lay.step(2)] - refs.d_z, atol=1e-12)


@pytest.mark.parametrize("strategy", [1, 2, 3, 4])
def test_disabled_strategies_are_pinned(strategy):
    # flat ground: across a stair edge the pinned height lags the reference by three samples
    _, state, plan, pred, mapping, refs = random_setup(5, elapsed=0.3, heights=(0.0,))
    state = PendulumState.at_rest((plan.support[0], plan.support[1], plan.support[2] + PARAMS.h_z_ref))
    tog = StrategyToggles.strategy(strategy)
    prob = build_problem(state, plan, refs, mapping, Weights(), BOUNDS, tog, pred, PARAMS, 0.005)
    lay = Layout(pred.n_h, mapping.n_f)
    x0 = np.zeros(lay.n_t)
    for a, r in enumerate(refs.steps()):
        x0[lay.step(a)] = r
    x, rep = solve_sqp(prob, x0, SqpSettings(eps=1e-10, n_s=10))
    assert np.abs(prob.A_eq @ x - prob.b_eq).max() < 1e-9
    pos, _ = predicted(state, pred, lay, x)
    if not tog.allow_height_variation:
        np.testing.assert_allclose(pos[2], refs.c_z, atol=1e-9)
    if not tog.allow_body_rotation:
        np.testing.assert_allclose(pos[3:], 0.0, atol=1e-9)
    if not tog.allow_step_adjust:
        np.testing.assert_allclose(x[lay.step(0)], refs.d_x, atol=1e-9)
        np.testing.assert_allclose(x[lay.step(1)], refs.d_y, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(-0.5, 0.5), st.integers(4, 60))
def test_deadbeat_pin_settles_in_three_samples(x0, ref, n_h):
    dt = 0.05
    u = deadbeat_jerks(np.array(x0), np.full(n_h, ref), dt)
    A, B = transition(dt)
    x = np.array(x0)
    for k in range(n_h):
        x = A @ x + B * u[k]
        if k >= 2:
            np.testing.assert_allclose(x, [ref, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(u[3:], 0.0, atol=1e-6)


def test_deadbeat_pin_does_not_amplify_round_off():
    # exact inversion of the position rollout grows this by ~3.7 per sample
    x0 = np.array([1e-15, -1e-15, 1e-15])
    u = deadbeat_jerks(x0, np.zeros(31), 0.05)
    assert np.abs(u).max() < 1e-9
    assert np.all(deadbeat_jerks(np.zeros(3), np.zeros(31), 0.05) == 0.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.005, 0.01, 0.02]))
def test_tick_rows_match_zmp_after_one_control_tick(seed, dt_ctrl):
    rng, state, plan, pred, mapping, refs = random_setup(seed, elapsed=0.3, heights=(0.0,))
    lay = Layout(pred.n_h, mapping.n_f)
    x = rng.normal(scale=0.5, size=lay.n_t)
    rows = assemble_tick_zmp_constraints(state, plan, refs, BOUNDS, PARAMS, dt_ctrl, pred.n_h, mapping.n_f)
    assert rows.n_constraints == 4
    nxt = PendulumState(step_state(state.x, lay.first_jerks(x), dt_ctrl))
    p = zmp(nxt, plan.support[2], PARAMS)
    tick = build_mapping(plan, dt_ctrl, 1, mapping.n_f)
    scale = PARAMS.m * (PARAMS.g + nxt.com_acc[2])
    want = []
    for axis in range(2):
        d = tick.e_c[0] * plan.support[axis] + tick.E_c[0] @ x[lay.step(axis)]
        box = (BOUNDS.p_x, BOUNDS.p_y)[axis]
        want += [scale * (p[axis] - d - box[1]), -scale * (p[axis] - d - box[0])]
    np.testing.assert_allclose(rows.values(x), want, rtol=1e-10, atol=1e-8)


def test_pin_next_only_binds_first_sample():
    _, state, plan, pred, mapping, refs = random_setup(2)
    tog = StrategyToggles(True, False, False, pin_next_only=True)
    *_, labels = assemble_linear_constraints(state, plan, mapping, refs, BOUNDS, pred, PARAMS, tog, 0.005)
    for key in ("eq:pin_height", "eq:pin_angle_r", "eq:pin_angle_p"):
        assert labels[key].stop - labels[key].start == 1
    assert "in:height_band" in labels  # channel stays free beyond the first sample


def test_uniform_weight_scaling_leaves_solution_unchanged():
    _, state, plan, pred, mapping, refs = random_setup(11, elapsed=0.2)
    state = PendulumState.at_rest((plan.support[0], plan.support[1] + 0.03, PARAMS.h_z_ref))
    lay = Layout(pred.n_h, mapping.n_f)
    x0 = np.zeros(lay.n_t)
    sols = []
    for k in (1.0, 7.0):
        prob = build_problem(state, plan, refs, mapping, Weights().scaled(k), BOUNDS, StrategyToggles(), pred,
                             PARAMS, 0.005)
        x, _ = solve_sqp(prob, x0, SqpSettings(eps=0.0, n_s=4))
        sols.append(x)
    np.testing.assert_allclose(sols[0], sols[1], atol=1e-6)


def test_weights_and_bounds_validation():
    with pytest.raises(ValueError):
        Weights(alpha=(1.0,) * 4)
    with pytest.raises(ValueError):
        Weights(beta=(0.0,) * 5, gamma=(0.0,) * 5)
    with pytest.raises(ValueError):
        Bounds(p_x=(0.1, -0.1))
    with pytest.raises(ValueError):
        StrategyToggles.strategy(5)
    assert StrategyToggles.strategy(2).number == 2
